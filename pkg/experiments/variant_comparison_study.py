# variant_comparison_study.py
import itertools
import os
from pathlib import Path

import pandas as pd
from vivarium.core.engine import Engine
from vivarium.core.composer import Composer

from vivarium_ppap.model import AttentionVariant, AugmentationVariant
from vivarium_ppap.processes.ppap_training_process import PPAPTrainingProcess
from vivarium_ppap.utils.simple_config import create_ppap_config, create_vivarium_experiment_state

manifest_path = Path(os.environ.get('PPAP_MANIFEST', 'synth_data/manifest.jsonl'))
if not manifest_path.exists():
    print(f"Skipping study: {manifest_path} not found. "
          "Create it with `ppap synth --n-scenes 100 --seed 0 --out-dir synth_data`")
    exit()

config = create_ppap_config(manifest_path, output_base_dir='variant_results', replicates=3)
config['timestamp_run_names'] = False


class PPAPComposer(Composer):
    defaults = {'ppap_process': config}

    def generate_processes(self, config):
        return {'ppap': PPAPTrainingProcess(config['ppap_process'])}

    def generate_topology(self, config):
        return {
            'ppap': {
                'inputs': ('inputs',),
                'outputs': ('outputs',),
            }
        }


if __name__ == '__main__':
    # Every augmentation x attention pair, three seeds each, fold 0 held out
    combinations = list(itertools.product(
        [v.value for v in AugmentationVariant],
        [v.value for v in AttentionVariant],
    ))

    all_results = []
    for augmentation, attention in combinations:
        print(f"--- Training {augmentation.upper()} + {attention.upper()} ---")

        run_params = {
            'augmentation': augmentation,
            'attention': attention,
            'dropout': 0.1,
            'lr': 5e-5,
            'max_epochs': 100,
            'batch_size': 32,
            'validation_fold': 0,
        }

        composer = PPAPComposer()
        composite = composer.generate()
        sim = Engine(
            composite=composite,
            initial_state=create_vivarium_experiment_state(run_params)
        )
        sim.update(1.0)

        final_output = sim.emitter.get_data()[1.0]['outputs']
        for rep_result in final_output['replicate_results']:
            results = rep_result['results'] or {}
            all_results.append({
                'augmentation': augmentation,
                'attention': attention,
                'replicate_id': rep_result['replicate_id'],
                'seed': rep_result['seed'],
                'val_mse': results.get('val_mse'),
                'val_mae': results.get('val_mae'),
                'val_nll': results.get('val_nll'),
                'training_success': rep_result['success'],
            })

    results_df = pd.DataFrame(all_results)
    output_filename = "variant_comparison_results.csv"
    results_df.to_csv(output_filename, index=False)

    summary = (
        results_df[results_df['training_success']]
        .groupby(['augmentation', 'attention'])[['val_mse', 'val_mae']]
        .agg(['mean', 'std'])
        .sort_values(('val_mse', 'mean'))
    )

    print(f"\n--- Variant comparison complete ---")
    print(f"Results saved to {output_filename}")
    print("\nMean and standard deviation over seeds:")
    print(summary)
