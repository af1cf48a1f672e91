#!/usr/bin/env python3
"""
End-to-end tests for the PPAP vivarium wrappers using pytest.

These tests train real (tiny) models on a synthetic-oracle dataset to verify
the complete workflow:
- Hyperparameter injection through the inputs port
- Run naming and output directory layout
- Weights, metrics and metadata files per replicate
- Vivarium integration for cross-validation and queries
- Multiple seeded replicates

The synthetic-oracle acceptance runs train the full-size network and are
marked ``slow``.

Usage:

    Full test suite:
        pytest E2E_test.py -v

    Including the long acceptance runs:
        PPAP_RUN_SLOW=1 pytest E2E_test.py -v

    Or run a single test:
        pytest E2E_test.py::TestCompleteWorkflow::test_minimal_training -v
"""

import json
import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy.stats import spearmanr

from vivarium_ppap.data import SILENT, build_training_data, default_scene_specs, generate_synthetic_dataset
from vivarium_ppap.dsp import log_mel_spectrogram, read_wav
from vivarium_ppap.inference import SILENT_ID, gain_sweep, precompute_bank, save_bank
from vivarium_ppap.model import ModelConfig, load_weights
from vivarium_ppap.training import evaluate, train
from vivarium_ppap.utils.simple_config import create_ppap_config


@pytest.fixture
def training_process(tmp_path, tiny_dataset):
    """Fixture providing a PPAPTrainingProcess on the tiny dataset."""
    from vivarium_ppap.processes.ppap_training_process import PPAPTrainingProcess

    _, data_dir = tiny_dataset
    parameters = create_ppap_config(data_dir / 'manifest.jsonl', tmp_path / 'runs', replicates=1)
    parameters['model'] = ModelConfig.tiny().to_dict()
    yield PPAPTrainingProcess(parameters)


@pytest.fixture
def minimal_hyperparameters():
    """Fixture providing hyperparameters for a fast run."""
    return {
        'augmentation': 'conv',
        'attention': 'dpa',
        'dropout': 0.1,
        'lr': 5e-5,
        'max_epochs': 2,
        'batch_size': 16,
        'validation_fold': 0,
    }


@pytest.fixture
def custom_hyperparameters():
    """Fixture providing non-default hyperparameters."""
    return {
        'augmentation': 'add',
        'attention': 'mha4',
        'dropout': 0.1,
        'lr': 1e-3,
        'max_epochs': 2,
        'batch_size': 16,
        'validation_fold': 3,
    }


class TestCompleteWorkflow:
    """Test the complete training workflow with real (tiny) models."""

    def test_minimal_training(self, training_process, minimal_hyperparameters):
        """Train one replicate and verify outputs."""
        states = {'inputs': minimal_hyperparameters}
        start_time = time.time()

        results = training_process.next_update(1.0, states)
        elapsed_time = time.time() - start_time
        print(f"Training completed in {elapsed_time:.1f} seconds")

        assert 'outputs' in results
        outputs = results['outputs']
        assert outputs['training_success'] is True

        replicate_results = outputs['replicate_results']
        assert len(replicate_results) == 1
        assert replicate_results[0]['success'] is True
        assert replicate_results[0]['replicate_id'] == 1
        assert replicate_results[0]['seed'] == 0

        output_directory = Path(outputs['output_directory'])
        replicate_dir = output_directory / "replicate_1"
        assert replicate_dir.exists()

        for expected_file in ['weights.ppapw', 'metrics.csv', 'config.json', 'run_metadata.json']:
            file_path = replicate_dir / expected_file
            assert file_path.exists(), f"Missing expected file: {expected_file}"
            assert file_path.stat().st_size > 0, f"Empty file: {expected_file}"

    def test_output_file_content(self, training_process, minimal_hyperparameters):
        """Output files contain the history, the trained weights and the run metadata."""
        results = training_process.next_update(1.0, {'inputs': minimal_hyperparameters})
        replicate = results['outputs']['replicate_results'][0]
        replicate_dir = Path(replicate['output_directory'])

        metrics = pd.read_csv(replicate_dir / 'metrics.csv')
        assert list(metrics['epoch']) == [1, 2]
        assert metrics['val_mse'].notna().all()

        model, metadata = load_weights(replicate_dir / 'weights.ppapw')
        assert model.config.attention.value == 'dpa'
        assert metadata['validation_fold'] == 0
        assert metadata['best_epoch'] == replicate['results']['best_epoch']

        run_metadata = json.loads((replicate_dir / 'run_metadata.json').read_text())
        assert run_metadata['training_success'] is True
        assert run_metadata['val_mse'] == pytest.approx(replicate['results']['val_mse'])

    def test_parameter_injection(self, training_process, custom_hyperparameters):
        """Non-default hyperparameters reach the trained model and the config echo."""
        results = training_process.next_update(1.0, {'inputs': custom_hyperparameters})
        replicate_dir = Path(results['outputs']['replicate_results'][0]['output_directory'])

        model, metadata = load_weights(replicate_dir / 'weights.ppapw')
        assert model.config.augmentation.value == 'add'
        assert model.config.attention.value == 'mha4'
        assert metadata['validation_fold'] == 3

        echo = json.loads((replicate_dir / 'config.json').read_text())
        assert echo['lr'] == 1e-3
        assert echo['model']['embed_dim'] == 8

    def test_run_name_generation(self, training_process, custom_hyperparameters):
        """Run names list the changed hyperparameters in priority order."""
        changes = training_process._identify_parameter_changes(custom_hyperparameters)
        assert set(changes) == {'augmentation', 'attention', 'lr', 'max_epochs', 'batch_size', 'validation_fold'}
        assert changes['lr']['change_type'] == 'increased'

        run_name = training_process._generate_run_name(changes)
        assert run_name.startswith('ADD_MHA4_Fold3_plus3more_')

    def test_multiple_replicates(self, tmp_path, tiny_dataset, minimal_hyperparameters):
        """Replicates use consecutive seeds and each land in their own directory."""
        from vivarium_ppap.processes.ppap_training_process import PPAPTrainingProcess

        _, data_dir = tiny_dataset
        parameters = create_ppap_config(data_dir / 'manifest.jsonl', tmp_path / 'runs', replicates=2)
        parameters.update(model=ModelConfig.tiny().to_dict(), base_seed=7, max_workers=2, run_name='two_seeds')
        process = PPAPTrainingProcess(parameters)

        outputs = process.next_update(1.0, {'inputs': minimal_hyperparameters})['outputs']
        assert outputs['training_success'] is True
        assert [r['seed'] for r in outputs['replicate_results']] == [7, 8]
        assert Path(outputs['output_directory']).name == 'two_seeds'

        log = pd.read_csv(tmp_path / 'runs' / 'experiment_log.csv')
        assert sorted(log['seed']) == [7, 8]
        assert log['training_success'].all()

        first = (tmp_path / 'runs' / 'two_seeds' / 'replicate_1' / 'weights.ppapw').read_bytes()
        second = (tmp_path / 'runs' / 'two_seeds' / 'replicate_2' / 'weights.ppapw').read_bytes()
        assert first != second

    def test_failed_replicate_is_reported(self, training_process, minimal_hyperparameters):
        """A fold with no records fails the replicate without raising."""
        states = {'inputs': {**minimal_hyperparameters, 'validation_fold': 9}}
        outputs = training_process.next_update(1.0, states)['outputs']
        assert outputs['training_success'] is False
        assert "Fold 9" in outputs['replicate_results'][0]['error_message']

    def test_error_handling_missing_manifest(self, tmp_path):
        from vivarium_ppap.processes.ppap_training_process import PPAPTrainingProcess

        with pytest.raises(ValueError, match="manifest_path"):
            PPAPTrainingProcess({})
        with pytest.raises(FileNotFoundError):
            PPAPTrainingProcess({'manifest_path': str(tmp_path / 'absent.jsonl')})


class TestVivarium_integration:
    """Test Vivarium-specific integration features."""

    def test_cross_validation_engine(self, tmp_path, tiny_dataset, minimal_hyperparameters):
        """Every fold trains under one Engine update."""
        from vivarium.core.engine import Engine

        from vivarium_ppap.composites.cross_validation import (
            CrossValidationComposer, create_cross_validation_state, summarize_folds,
        )

        _, data_dir = tiny_dataset
        process_params = create_ppap_config(data_dir / 'manifest.jsonl', tmp_path / 'cv', replicates=1)
        process_params.update(model=ModelConfig.tiny().to_dict(), run_name='cv')
        composite = CrossValidationComposer({'training_process': process_params, 'folds': (0, 1, 2)}).generate()

        hyperparameters = {k: v for k, v in minimal_hyperparameters.items() if k != 'validation_fold'}
        initial_state = create_cross_validation_state(hyperparameters, folds=(0, 1, 2))
        engine = Engine(composite=composite, initial_state=initial_state)

        assert 'folds' in engine.state.get_value()
        engine.update(1.0)

        folds = engine.state.get_value()['folds']
        summary = summarize_folds(folds)
        assert summary['fold'].tolist() == [0, 1, 2]
        assert summary['success'].all()
        assert summary['val_mse'].notna().all()
        assert sorted(p.name for p in (tmp_path / 'cv').iterdir() if p.is_dir()) == ['cv_fold0', 'cv_fold1', 'cv_fold2']

    def test_query_engine(self, tmp_path, tiny_dataset, tiny_config):
        """PPAPQueryProcess ranks masker-gain pairs for a soundscape under an Engine."""
        from vivarium.core.composer import Composer
        from vivarium.core.engine import Engine

        from vivarium_ppap.processes.ppap_query_process import PPAPQueryProcess
        from vivarium_ppap.model import save_weights

        manifest, data_dir = tiny_dataset
        data = build_training_data(manifest, data_dir, tiny_config)
        result = train(data, 0, tiny_config, seed=0, max_epochs=1, batch_size=16, progress=False)
        weights = save_weights(tmp_path / 'weights.ppapw', result.model, result.metadata())

        kwargs = tiny_config.spectrogram_kwargs()
        maskers = [(p.stem, log_mel_spectrogram(read_wav(p), **kwargs))
                   for p in sorted((data_dir / 'maskers').glob('*.wav'))]
        cache = save_bank(tmp_path / 'maskers.ppapc', precompute_bank(maskers, result.model))

        class QueryComposer(Composer):
            defaults = {'query_process': {'weights_path': str(weights), 'cache_path': str(cache),
                                          'include_silent': True}}

            def generate_processes(self, config):
                return {'query': PPAPQueryProcess(config['query_process'])}

            def generate_topology(self, config):
                return {'query': {'inputs': ('globals', 'inputs'), 'outputs': ('globals', 'outputs')}}

        soundscape = data_dir / manifest['soundscape_wav'].iloc[0]
        initial_state = {'globals': {'inputs': {
            'soundscape_wav': str(soundscape),
            'masker_ids': [],
            'gamma_range': (-2.0, 2.0),
            'gamma_count': 5,
            'top_k': 3,
        }}}
        engine = Engine(composite=QueryComposer().generate(), initial_state=initial_state)
        engine.update(1.0)

        outputs = engine.state.get_value()['globals']['outputs']
        assert outputs['query_success'] is True
        assert len(outputs['ranked_pairs']) == 3
        assert outputs['call_counts'] == {'f_s': 1, 'f_m': 0, 'gao': 5 * (len(maskers) + 1)}

    def test_ports_schema_completeness(self, training_process):
        """Ports schema exposes every training hyperparameter with a default and updater."""
        schema = training_process.ports_schema()
        assert 'inputs' in schema and 'outputs' in schema

        for param in ['augmentation', 'attention', 'dropout', 'lr', 'max_epochs', 'batch_size', 'validation_fold']:
            assert param in schema['inputs'], f"Missing essential input parameter: {param}"
            assert '_default' in schema['inputs'][param]
            assert '_updater' in schema['inputs'][param]

        for param in ['replicate_results', 'training_success', 'output_directory', 'parameter_changes']:
            assert param in schema['outputs'], f"Missing essential output parameter: {param}"


@pytest.fixture(scope='module')
def oracle_run(tmp_path_factory):
    """CONV+DPA trained on 2000 synthetic records (100 scenes x 20), fold 0 held out."""
    out_dir = tmp_path_factory.mktemp('oracle')
    specs = default_scene_specs(noise_std=0.1)
    manifest = generate_synthetic_dataset(specs, n_scenes=100, seed=0, out_dir=out_dir, records_per_scene=20)
    config = ModelConfig()
    data = build_training_data(manifest, out_dir, config)
    result = train(data, 0, config, seed=0, lr=5e-5, max_epochs=100, batch_size=32)
    return manifest, out_dir, data, result


@pytest.mark.slow
class TestSyntheticOracleRecovery:
    """Full-size acceptance runs against the synthetic oracle."""

    def _sweeps(self, oracle_run):
        manifest, out_dir, _, result = oracle_run
        model = result.model
        kwargs = model.config.spectrogram_kwargs()
        maskers = [(p.stem, log_mel_spectrogram(read_wav(p), **kwargs))
                   for p in sorted((out_dir / 'maskers').glob('*.wav'))]
        bank = precompute_bank(maskers, model)
        held_out = manifest[(manifest['fold'] == 0) & (manifest['masker_wav'] != SILENT)]
        soundscape = log_mel_spectrogram(read_wav(out_dir / held_out['soundscape_wav'].iloc[0]), **kwargs)
        return {m: gain_sweep(model, soundscape, m, bank) for m in ('bird_00', 'traffic_00', SILENT_ID)}

    def test_held_out_fold_mse(self, oracle_run):
        _, _, data, result = oracle_run
        _, val_idx = data.split(0)
        metrics = evaluate(result.model, data, val_idx, result.gamma_stats)
        print(f"held-out MSE {metrics['mse']:.4f}")
        assert metrics['mse'] <= 0.04

    def test_sweep_shapes_follow_the_oracle(self, oracle_run):
        sweeps = self._sweeps(oracle_run)
        specs = {s.masker_class: s for s in default_scene_specs()}

        bird = sweeps['bird_00']
        oracle = specs['bird'].oracle_mean(bird['gamma'].to_numpy())
        assert spearmanr(bird['mu'], oracle).correlation >= 0.9
        assert -1.0 <= bird.loc[bird['mu'].idxmax(), 'gamma'] <= 0.0

        traffic = sweeps['traffic_00']
        assert spearmanr(traffic['mu'], traffic['gamma']).correlation <= -0.9

    def test_silent_sweep_is_flat(self, oracle_run):
        sweeps = self._sweeps(oracle_run)
        assert np.std(sweeps[SILENT_ID]['mu']) <= 0.25 * np.std(sweeps['bird_00']['mu'])
