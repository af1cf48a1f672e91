# cross_validation_study.py
import os
from pathlib import Path

from vivarium.core.engine import Engine

from vivarium_ppap.composites.cross_validation import (
    CrossValidationComposer, create_cross_validation_state, summarize_folds,
)
from vivarium_ppap.utils.simple_config import create_ppap_config

manifest_path = Path(os.environ.get('PPAP_MANIFEST', 'synth_data/manifest.jsonl'))
if not manifest_path.exists():
    print(f"Skipping study: {manifest_path} not found. "
          "Create it with `ppap synth --n-scenes 100 --seed 0 --out-dir synth_data`")
    exit()


if __name__ == '__main__':
    # Seeds per fold; ten gives a 50-model estimate
    num_replicates = int(os.environ.get('PPAP_SEEDS', 10))

    process_config = create_ppap_config(manifest_path, output_base_dir='cv_results', replicates=num_replicates)
    process_config.update(run_name='conv_dpa', max_workers=2)

    composer = CrossValidationComposer({'training_process': process_config})
    initial_state = create_cross_validation_state({
        'augmentation': 'conv',
        'attention': 'dpa',
        'dropout': 0.1,
        'lr': 5e-5,
        'max_epochs': 100,
        'batch_size': 32,
    })

    sim = Engine(
        composite=composer.generate(),
        initial_state=initial_state
    )

    print(f"--- Cross-validating CONV + DPA: 5 folds x {num_replicates} seeds ---")
    sim.update(1.0)

    folds = sim.emitter.get_data()[1.0]['folds']
    results_df = summarize_folds(folds)
    output_filename = "cross_validation_results.csv"
    results_df.to_csv(output_filename, index=False)

    succeeded = results_df[results_df['success']]
    print(f"\n--- Cross-validation complete ---")
    print(f"Results saved to {output_filename}")
    print(f"Models trained: {len(succeeded)} of {len(results_df)}")
    print("\nPer-fold validation MSE:")
    print(succeeded.groupby('fold')['val_mse'].agg(['mean', 'std']))
    print(f"\nOverall MSE: {succeeded['val_mse'].mean():.4f} +/- {succeeded['val_mse'].std():.4f}")
    print(f"Overall MAE: {succeeded['val_mae'].mean():.4f} +/- {succeeded['val_mae'].std():.4f}")
