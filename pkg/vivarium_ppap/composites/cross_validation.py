"""
Cross-validation as a vivarium composite: one PPAPTrainingProcess per held-out
fold, each wired to its own ``folds/fold_<k>`` store.
"""

from typing import Any, Dict, Iterable, Optional

import pandas as pd
from vivarium.core.composer import Composer

from vivarium_ppap.data import N_FOLDS
from vivarium_ppap.processes.ppap_training_process import PPAPTrainingProcess


class CrossValidationComposer(Composer):
    defaults = {
        'training_process': {},  # PPAPTrainingProcess parameters shared by every fold
        'folds': tuple(range(N_FOLDS)),
    }

    def generate_processes(self, config):
        processes = {}
        for fold in config['folds']:
            params = dict(config['training_process'])
            if params.get('run_name'):
                params['run_name'] = f"{params['run_name']}_fold{fold}"
            processes[f'fold_{fold}'] = PPAPTrainingProcess(params)
        return processes

    def generate_topology(self, config):
        return {
            f'fold_{fold}': {
                'inputs': ('folds', f'fold_{fold}', 'inputs'),
                'outputs': ('folds', f'fold_{fold}', 'outputs'),
            }
            for fold in config['folds']
        }


def create_cross_validation_state(
    hyperparameters: Optional[Dict[str, Any]] = None,
    folds: Iterable[int] = range(N_FOLDS),
) -> Dict[str, Any]:
    """Initial Engine state: the same hyperparameters for every fold, each holding out its own."""
    hyperparameters = dict(hyperparameters or {})
    return {
        'folds': {
            f'fold_{fold}': {
                'inputs': {**hyperparameters, 'validation_fold': fold},
                'outputs': {},
            }
            for fold in folds
        }
    }


def summarize_folds(fold_outputs: Dict[str, Dict[str, Any]]) -> pd.DataFrame:
    """One row per (fold, replicate) from the emitted ``folds`` store."""
    rows = []
    for fold_name, store in sorted(fold_outputs.items()):
        for replicate in store['outputs'].get('replicate_results', []):
            row = {
                'fold': int(fold_name.split('_')[-1]),
                'replicate_id': replicate['replicate_id'],
                'seed': replicate['seed'],
                'success': replicate['success'],
            }
            row.update(replicate['results'] or {})
            rows.append(row)
    return pd.DataFrame(rows)
