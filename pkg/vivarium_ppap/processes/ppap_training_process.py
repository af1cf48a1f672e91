import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

import pandas as pd
from vivarium.core.process import Process

from vivarium_ppap.data import build_training_data, read_manifest
from vivarium_ppap.model import ModelConfig
from vivarium_ppap.training import save_training_artifacts, train
from vivarium_ppap.utils.atomic import atomic_path, atomic_write_text

logger = logging.getLogger(__name__)


class PPAPTrainingProcess(Process):
    """
    Vivarium wrapper that trains PPAP models on one cross-validation fold.

    Features:
    - Runs seeded training replicates (seed = base_seed + replicate index)
    - Tracks hyperparameter changes from defaults
    - Generates meaningful run names
    - Saves weights, per-epoch metrics and metadata per replicate
    - Maintains an experiment log
    """

    defaults = {
        'manifest_path': None,  # JSON-lines manifest; audio paths are relative to it
        'model': {},  # ModelConfig fields shared by every run of this process
        'output_base_dir': None,
        'run_name': None,  # Custom name for this run; if None, generates a descriptive name
        'max_params_in_name': 3,
        'replicates': 1,
        'base_seed': 0,
        'max_workers': 1,  # Replicates trained concurrently
        'progress': False,
        'timestamp_run_names': True,
    }

    def __init__(self, parameters=None):
        super().__init__(parameters)

        if not self.parameters.get('manifest_path'):
            raise ValueError(
                "manifest_path parameter is required. Use:\n"
                "from vivarium_ppap.utils.simple_config import create_ppap_config\n"
                "config = create_ppap_config('/path/to/manifest.jsonl')\n"
                "process = PPAPTrainingProcess(config)"
            )
        self.manifest_path = Path(self.parameters['manifest_path'])
        if not self.manifest_path.exists():
            raise FileNotFoundError(f"Manifest not found: {self.manifest_path}")

        self._data_cache = {}

    def _base_config(self):
        return ModelConfig.from_dict(dict(self.parameters.get('model') or {}))

    def ports_schema(self):
        """Training hyperparameters in, per-replicate results out."""
        return {
            'inputs': {
                'augmentation': {
                    '_default': self._base_config().augmentation.value,
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Feature Augmentation',
                    '_description': 'How soundscape and masker embeddings are mixed under the gain: cat, add or conv',
                    '_category': 'Architecture',
                },
                'attention': {
                    '_default': self._base_config().attention.value,
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Attention Fusion',
                    '_description': 'Query-key-value fusion: aa, dpa, mha4 or passthrough',
                    '_category': 'Architecture',
                },
                'dropout': {
                    '_default': self._base_config().dropout,
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Dropout Rate',
                    '_description': 'Dropout applied inside every conv block during training',
                    '_category': 'Architecture',
                },
                'lr': {
                    '_default': 5e-5,
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Learning Rate',
                    '_description': 'Adam step size',
                    '_category': 'Optimizer',
                },
                'max_epochs': {
                    '_default': 100,
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Epochs',
                    '_description': 'Number of passes over the training folds',
                    '_category': 'Optimizer',
                },
                'batch_size': {
                    '_default': 32,
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Batch Size',
                    '_description': 'Records per Adam step',
                    '_category': 'Optimizer',
                },
                'validation_fold': {
                    '_default': 0,
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Validation Fold',
                    '_description': 'Fold held out for validation; None trains on every record',
                    '_category': 'Cross-validation',
                },
            },
            'outputs': {
                'replicate_results': {
                    '_default': [],
                    '_updater': 'set',
                    '_emit': True,
                },
                'training_success': {
                    '_default': False,
                    '_updater': 'set',
                    '_emit': True,
                },
                'output_directory': {
                    '_default': '',
                    '_updater': 'set',
                    '_emit': True,
                },
                'parameter_changes': {
                    '_default': {},
                    '_updater': 'set',
                    '_emit': True,
                },
                'run_metadata': {
                    '_default': {},
                    '_updater': 'set',
                    '_emit': True,
                },
            },
        }

    def next_update(self, timestep, states):
        """Trains every seeded replicate for the requested fold and returns their results."""
        run_params = states['inputs']
        num_replicates = self.parameters.get('replicates', 1)
        logger.info(f"PPAPTrainingProcess: Starting batch of {num_replicates} seeded replicate(s).")

        parameter_changes = self._identify_parameter_changes(run_params)
        run_name = self._generate_run_name(parameter_changes)
        config = self._base_config().with_variants(run_params['augmentation'], run_params['attention'])
        config = ModelConfig.from_dict({**config.to_dict(), 'dropout': float(run_params['dropout'])})

        if self.parameters.get('output_base_dir'):
            output_base = Path(self.parameters['output_base_dir'])
        else:
            output_base = Path.cwd() / "training_results"
        batch_output_dir = output_base / run_name
        batch_output_dir.mkdir(parents=True, exist_ok=True)

        logger.info("--- Phase 1: Loading spectrograms ---")
        data = self._training_data(config)

        logger.info("--- Phase 2: Training replicates ---")
        jobs = []
        for i in range(num_replicates):
            replicate_id = i + 1
            run_metadata = self._create_run_metadata(run_params, parameter_changes, run_name)
            run_metadata['replicate_id'] = replicate_id
            run_metadata['total_replicates'] = num_replicates
            run_metadata['seed'] = self.parameters.get('base_seed', 0) + i
            jobs.append({
                'replicate_id': replicate_id,
                'seed': run_metadata['seed'],
                'output_dir': batch_output_dir / f"replicate_{replicate_id}",
                'metadata': run_metadata,
            })

        def run_replicate(job):
            return train(
                data,
                run_params['validation_fold'],
                config,
                job['seed'],
                lr=float(run_params['lr']),
                max_epochs=int(run_params['max_epochs']),
                batch_size=int(run_params['batch_size']),
                progress=self.parameters.get('progress', False),
            )

        completed_jobs = []
        with ThreadPoolExecutor(max_workers=max(1, self.parameters.get('max_workers', 1))) as executor:
            future_to_job = {executor.submit(run_replicate, job): job for job in jobs}
            for future in as_completed(future_to_job):
                job = future_to_job[future]
                try:
                    job['result'] = future.result()
                    logger.info(f"  > Replicate {job['replicate_id']} (seed {job['seed']}) finished training")
                except Exception as e:
                    job['error'] = str(e)
                    logger.error(f"  > Replicate {job['replicate_id']} (seed {job['seed']}) failed: {e}")
                completed_jobs.append(job)

        logger.info("--- Phase 3: Recording results ---")
        replicate_outputs = []
        for job in completed_jobs:
            run_metadata = job['metadata']
            result = job.get('result')
            if result is not None:
                files = save_training_artifacts(result, job['output_dir'])
                atomic_write_text(
                    job['output_dir'] / 'config.json',
                    json.dumps({**run_params, 'model': config.to_dict(), 'seed': job['seed']}, indent=2, sort_keys=True),
                )
                metrics = result.final_metrics()
                run_metadata.update({
                    'training_success': True,
                    'training_completed_at': pd.Timestamp.now().isoformat(),
                    'best_epoch': result.best_epoch,
                    **metrics,
                })
                replicate_outputs.append({
                    'replicate_id': job['replicate_id'],
                    'seed': job['seed'],
                    'success': True,
                    'output_directory': str(job['output_dir']),
                    'error_message': None,
                    'results': {'best_epoch': result.best_epoch, **metrics},
                    'files_generated': sorted(p.name for p in files.values()) + ['config.json'],
                })
            else:
                error_message = f"Training failed: {job['error']}"
                run_metadata.update({'training_success': False, 'error_message': error_message})
                replicate_outputs.append({
                    'replicate_id': job['replicate_id'],
                    'seed': job['seed'],
                    'success': False,
                    'output_directory': str(job['output_dir']),
                    'error_message': error_message,
                    'results': None,
                    'files_generated': [],
                })

            atomic_write_text(job['output_dir'] / 'run_metadata.json', json.dumps(run_metadata, indent=2, default=str))
            self._update_experiment_log(output_base, run_metadata)

        overall_success = all(rep['success'] for rep in replicate_outputs)
        return {
            'outputs': {
                'replicate_results': sorted(replicate_outputs, key=lambda r: r['replicate_id']),
                'training_success': overall_success,
                'output_directory': str(batch_output_dir),
                'parameter_changes': parameter_changes,
                'run_metadata': self._create_run_metadata(run_params, parameter_changes, run_name),
            }
        }

    def _training_data(self, config):
        # spectrograms depend only on the input geometry, not on the variants
        key = (config.soundscape_shape, tuple(sorted(config.spectrogram_kwargs().items())))
        if key not in self._data_cache:
            manifest = read_manifest(self.manifest_path)
            self._data_cache[key] = build_training_data(manifest, self.manifest_path.parent, config)
        return self._data_cache[key]

    def _identify_parameter_changes(self, run_params):
        """Identify which hyperparameters have been changed from their defaults."""
        defaults = {param: schema['_default'] for param, schema in self.ports_schema()['inputs'].items()}
        parameter_changes = {}
        for param, value in run_params.items():
            if param in defaults and value != defaults[param]:
                parameter_changes[param] = {
                    'current_value': value,
                    'default_value': defaults[param],
                    'change_type': self._classify_change(value, defaults[param]),
                }
        return parameter_changes

    def _classify_change(self, current, default):
        if isinstance(current, bool) and isinstance(default, bool):
            return 'toggled'
        elif isinstance(current, (int, float)) and isinstance(default, (int, float)):
            return 'increased' if current > default else 'decreased'
        else:
            return 'modified'

    def _generate_run_name(self, parameter_changes):
        """Generate a descriptive run name based on hyperparameter changes."""
        if self.parameters.get('run_name'):
            return self.parameters['run_name']

        suffix = ''
        if self.parameters.get('timestamp_run_names', True):
            suffix = '_' + pd.Timestamp.now().strftime("%Y%m%d_%H%M%S")

        if not parameter_changes:
            return f"default_run{suffix}"

        name_parts = []
        max_params = self.parameters.get('max_params_in_name', 3)
        priority_params = ['augmentation', 'attention', 'validation_fold', 'lr']

        for param in priority_params:
            if param in parameter_changes and len(name_parts) < max_params:
                name_parts.append(self._format_param_for_name(param, parameter_changes[param]))
        for param, change in parameter_changes.items():
            if param not in priority_params and len(name_parts) < max_params:
                name_parts.append(self._format_param_for_name(param, change))

        if len(parameter_changes) > max_params:
            name_parts.append(f"plus{len(parameter_changes) - max_params}more")

        return "_".join(name_parts) + suffix

    def _format_param_for_name(self, param, change):
        value = change['current_value']
        if param in ('augmentation', 'attention'):
            return str(value).upper()
        elif param == 'validation_fold':
            return "AllFolds" if value is None else f"Fold{int(value)}"
        elif param == 'lr':
            return f"LR{value:g}"
        elif isinstance(value, float) and value.is_integer():
            return f"{param}{int(value)}"
        elif isinstance(value, (int, float)):
            return f"{param}{value:g}"
        else:
            return f"{param}_{value}"

    def _create_run_metadata(self, run_params, parameter_changes, run_name):
        return {
            'run_name': run_name,
            'created_at': pd.Timestamp.now().isoformat(),
            'vivarium_wrapper_version': '1.0.0',
            'total_parameters': len(run_params),
            'parameters_changed': len(parameter_changes),
            'parameter_changes': parameter_changes,
            'training_config': {
                'manifest_path': str(self.manifest_path),
                'augmentation': run_params.get('augmentation'),
                'attention': run_params.get('attention'),
                'validation_fold': run_params.get('validation_fold'),
                'lr': run_params.get('lr'),
                'max_epochs': run_params.get('max_epochs'),
            },
            'training_success': None,
            'training_completed_at': None,
            'best_epoch': None,
            'val_mse': None,
        }

    def _update_experiment_log(self, output_base, run_metadata):
        """Append this replicate to ``experiment_log.csv`` under the output base."""
        log_file = output_base / "experiment_log.csv"
        config = run_metadata['training_config']
        log_entry = {
            'run_name': run_metadata['run_name'],
            'replicate_id': run_metadata.get('replicate_id'),
            'seed': run_metadata.get('seed'),
            'created_at': run_metadata['created_at'],
            'training_success': run_metadata['training_success'],
            'parameters_changed': run_metadata['parameters_changed'],
            'augmentation': config['augmentation'],
            'attention': config['attention'],
            'validation_fold': config['validation_fold'],
            'best_epoch': run_metadata.get('best_epoch'),
            'val_mse': run_metadata.get('val_mse'),
            'val_mae': run_metadata.get('val_mae'),
            'output_directory': run_metadata['run_name'],
        }
        for param, change in run_metadata.get('parameter_changes', {}).items():
            log_entry[f'{param}_value'] = change['current_value']
            log_entry[f'{param}_default'] = change['default_value']

        if log_file.exists():
            try:
                df = pd.read_csv(log_file)
                new_df = pd.concat([df, pd.DataFrame([log_entry])], ignore_index=True)
            except Exception as e:
                logger.warning(f"Could not read existing log file: {e}")
                new_df = pd.DataFrame([log_entry])
        else:
            new_df = pd.DataFrame([log_entry])

        try:
            with atomic_path(log_file) as tmp:
                new_df.to_csv(tmp, index=False)
            logger.info(f"Updated experiment log: {log_file}")
        except Exception as e:
            logger.warning(f"Could not update experiment log: {e}")
