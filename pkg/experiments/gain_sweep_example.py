# gain_sweep_example.py
import os
from pathlib import Path

import pandas as pd
from vivarium.core.engine import Engine
from vivarium.core.composer import Composer

from vivarium_ppap.dsp import log_mel_spectrogram, read_wav
from vivarium_ppap.inference import SILENT_ID, gain_sweep, load_bank
from vivarium_ppap.model import load_weights
from vivarium_ppap.processes.ppap_query_process import PPAPQueryProcess
from vivarium_ppap.utils.simple_config import create_vivarium_experiment_state

# Produced by `ppap train` and `ppap precompute`
weights_path = Path(os.environ.get('PPAP_WEIGHTS', 'run/weights.ppapw'))
cache_path = Path(os.environ.get('PPAP_CACHE', 'run/maskers.ppapc'))
soundscape_path = Path(os.environ.get('PPAP_SOUNDSCAPE', 'synth_data/soundscapes/scene_0000.wav'))
for path in (weights_path, cache_path, soundscape_path):
    if not path.exists():
        print(f"Skipping example: {path} not found")
        exit()


class QueryComposer(Composer):
    defaults = {
        'query_process': {
            'weights_path': str(weights_path),
            'cache_path': str(cache_path),
            'include_silent': True,
        }
    }

    def generate_processes(self, config):
        return {'query': PPAPQueryProcess(config['query_process'])}

    def generate_topology(self, config):
        return {
            'query': {
                'inputs': ('inputs',),
                'outputs': ('outputs',),
            }
        }


if __name__ == '__main__':
    # Step 1: rank every cached masker over a coarse gain grid
    composer = QueryComposer()
    sim = Engine(
        composite=composer.generate(),
        initial_state=create_vivarium_experiment_state({
            'soundscape_wav': str(soundscape_path),
            'masker_ids': [],
            'gamma_range': (-2.0, 2.0),
            'gamma_count': 9,
            'top_k': 5,
        })
    )
    sim.update(1.0)

    final_output = sim.emitter.get_data()[1.0]['outputs']
    print(f"--- Top masker-gain pairs for {soundscape_path.name} ---")
    print(pd.DataFrame(final_output['ranked_pairs']).to_string(index=False))
    print(f"Model calls (f_s, f_m, gao): {final_output['call_counts']}")

    # Step 2: fine sweep for the best masker and the silent baseline
    model, _ = load_weights(weights_path)
    bank = load_bank(cache_path, model)
    soundscape = log_mel_spectrogram(read_wav(soundscape_path), **model.config.spectrogram_kwargs())
    best_masker = final_output['ranked_pairs'][0]['masker_id']
    sweep_ids = [best_masker] if best_masker == SILENT_ID else [best_masker, SILENT_ID]

    sweeps = pd.concat([gain_sweep(model, soundscape, masker_id, bank) for masker_id in sweep_ids])
    output_filename = "gain_sweep_results.csv"
    sweeps.to_csv(output_filename, index=False)

    print(f"\n--- Gain sweep complete ---")
    print(f"Results saved to {output_filename}")
    for masker_id, sweep in sweeps.groupby('masker_id'):
        peak = sweep.loc[sweep['mu'].idxmax()]
        print(f"{masker_id}: peak ISOPL {peak['mu']:.3f} at log10 gain {peak['gamma']:.2f}")
