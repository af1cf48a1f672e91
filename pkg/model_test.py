"""
Tests for the PPAP network: shapes, augmentation and attention variants, the
Gaussian head, the NLL loss, silent-gain randomization, weight files and the
full-model gradient check.

Usage:
    pytest model_test.py -v
"""

import math
from itertools import product

import numpy as np
import pytest
import torch

from vivarium_ppap.dsp import Spectrogram
from vivarium_ppap.errors import DataValidationError, ShapeError, UsageError
from vivarium_ppap.model import (
    AddAugmentation, AdditiveAttention, AttentionVariant, AugmentationVariant, CatAugmentation,
    ConvAugmentation, DotProductAttention, GainSpec, GammaStats, ModelConfig, MultiHeadAttention,
    PassThroughAttention, PPAPModel, PredictedDistribution, gradcheck_model, load_weights,
    nll_loss, sample_silent_gamma, save_weights, serialize_weights, weights_digest,
)

ALL_COMBINATIONS = list(product([v.value for v in AugmentationVariant], [v.value for v in AttentionVariant]))


@pytest.fixture
def tiny_model(tiny_config):
    return PPAPModel(tiny_config, seed=0).eval()


def _random_inputs(config, batch=(), seed=0):
    gen = torch.Generator().manual_seed(seed)
    soundscape = torch.randn(batch + config.soundscape_shape, generator=gen)
    masker = torch.randn(batch + config.masker_shape, generator=gen)
    return soundscape, masker


class TestModelConfig:

    def test_default_geometry(self):
        config = ModelConfig()
        assert config.n_frames == 20
        assert config.pooled_mel_bins == 2
        assert config.embed_dim == 128
        assert config.conv_channels == (16, 32, 48, 64, 64)

    def test_tiny_geometry(self, tiny_config):
        assert (tiny_config.n_frames, tiny_config.embed_dim) == (2, 8)

    def test_embed_dim_must_match_flatten(self):
        with pytest.raises(UsageError, match="embed_dim"):
            ModelConfig(embed_dim=64)

    def test_heads_must_divide_embed_dim(self):
        with pytest.raises(UsageError):
            ModelConfig.tiny(attention='mha4', n_heads=3)

    def test_unknown_variant(self):
        with pytest.raises(UsageError, match="choose one of"):
            ModelConfig.tiny(augmentation='mul')

    def test_dict_round_trip(self, tiny_config):
        assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config


class TestFeatureExtraction:

    def test_full_size_shapes(self):
        model = PPAPModel(ModelConfig(), seed=0).eval()
        with torch.no_grad():
            k = model.extract_soundscape_features(torch.zeros(644, 64, 2))
            q = model.extract_masker_features(torch.zeros(644, 64, 1))
        assert tuple(k.shape) == (20, 128)
        assert tuple(q.shape) == (20, 128)

    def test_zero_input_is_deterministic_and_finite(self, tiny_model, tiny_config):
        with torch.no_grad():
            a = tiny_model.extract_soundscape_features(torch.zeros(tiny_config.soundscape_shape))
            b = tiny_model.extract_soundscape_features(torch.zeros(tiny_config.soundscape_shape))
        assert torch.equal(a, b)
        assert torch.all(torch.isfinite(a))

    def test_channel_swap_changes_output(self, tiny_model, tiny_config):
        soundscape, _ = _random_inputs(tiny_config)
        with torch.no_grad():
            a = tiny_model.extract_soundscape_features(soundscape)
            b = tiny_model.extract_soundscape_features(soundscape.flip(-1))
        assert not torch.allclose(a, b)

    def test_silent_masker_embedding_is_finite(self, tiny_model, tiny_config):
        silent = Spectrogram.silent(tiny_config.time_frames, tiny_config.mel_bins)
        with torch.no_grad():
            q = tiny_model.extract_masker_features(silent)
        assert torch.all(torch.isfinite(q))

    def test_masker_branch_is_independent_of_soundscape_branch(self, tiny_model, tiny_config):
        _, masker = _random_inputs(tiny_config)
        with torch.no_grad():
            q = tiny_model.extract_masker_features(masker)
            k = tiny_model.extract_soundscape_features(torch.cat([masker, masker], dim=-1))
        assert not torch.allclose(q, k)

    def test_shape_mismatch(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.extract_soundscape_features(torch.zeros(16, 8, 1))


class TestAugmentation:

    def test_add_ignores_queries_at_zero_gain(self):
        for seed in range(10):
            model = PPAPModel(ModelConfig.tiny(augmentation='add'), seed=seed).eval()
            gen = torch.Generator().manual_seed(seed)
            k = torch.randn(2, 8, generator=gen)
            outputs = [model.augment(k, torch.randn(2, 8, generator=gen), 0.0) for _ in range(10)]
            assert all(torch.equal(outputs[0], out) for out in outputs[1:])

    def test_cat_input_width(self):
        layer = CatAugmentation(128)
        k, q = torch.zeros(20, 128), torch.zeros(20, 128)
        assert layer.stacked_input(k, q, torch.tensor(0.5)).shape == (20, 257)
        assert tuple(layer.dense1.weights.shape) == (257, 128)

    def test_conv_stack_shape(self):
        layer = ConvAugmentation(128)
        stack = layer.stacked_input(torch.zeros(20, 128), torch.zeros(20, 128), torch.tensor(1.5))
        assert stack.shape == (20, 128, 3)
        assert torch.all(stack[..., 2] == 1.5)

    @pytest.mark.parametrize('layer_cls', [CatAugmentation, AddAugmentation, ConvAugmentation])
    def test_output_shape_with_batch(self, layer_cls):
        layer = layer_cls(8)
        layer.reset_parameters(torch.Generator().manual_seed(0))
        out = layer(torch.randn(4, 2, 8), torch.randn(4, 2, 8), torch.randn(4))
        assert out.shape == (4, 2, 8)

    def test_gain_changes_values(self, tiny_model):
        k, q = torch.randn(2, 8), torch.randn(2, 8)
        assert not torch.allclose(tiny_model.augment(k, q, -1.0), tiny_model.augment(k, q, 1.0))


class TestAttention:

    def test_dpa_with_identical_keys_is_uniform(self):
        q = torch.randn(5, 8)
        k = torch.randn(1, 8).expand(5, 8)
        v = torch.randn(5, 8)
        z, weights = DotProductAttention()(q, k, v)
        assert torch.allclose(weights, torch.full((1, 5), 0.2))
        assert torch.allclose(z, v.mean(dim=0))

    @pytest.mark.parametrize('attention', [AdditiveAttention(8), DotProductAttention(), MultiHeadAttention(8, 4)])
    def test_weights_sum_to_one(self, attention):
        attention.reset_parameters(torch.Generator().manual_seed(1))
        q, k, v = torch.randn(3, 5, 8), torch.randn(3, 5, 8), torch.randn(3, 5, 8)
        z, weights = attention(q, k, v)
        assert z.shape == (3, 8)
        assert torch.all(weights >= 0)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(weights.shape[:-1]))

    def test_mha_reports_one_distribution_per_head(self):
        attention = MultiHeadAttention(8, 4)
        attention.reset_parameters(torch.Generator().manual_seed(1))
        _, weights = attention(torch.randn(5, 8), torch.randn(5, 8), torch.randn(5, 8))
        assert weights.shape == (4, 5)

    def test_mha_rejects_indivisible_width(self):
        with pytest.raises(ShapeError):
            MultiHeadAttention(10, 4)

    def test_passthrough_of_row_constant_values(self):
        c = torch.randn(8)
        z, weights = PassThroughAttention()(torch.randn(5, 8), torch.randn(5, 8), c.expand(5, 8))
        assert weights is None
        assert torch.allclose(z, c)


class TestHeadAndLoss:

    def test_zero_head_gives_standard_normal(self, tiny_model):
        with torch.no_grad():
            tiny_model.fo.weights.zero_()
            tiny_model.fo.bias.zero_()
        pred = tiny_model.predict_head(torch.randn(8))
        assert pred.mu.item() == 0.0
        assert pred.log_sigma.item() == 0.0
        assert pred.sigma.item() == 1.0

    def test_log_sigma_is_clamped(self, tiny_model):
        with torch.no_grad():
            tiny_model.fo.weights.zero_()
            tiny_model.fo.bias.copy_(torch.tensor([1.5, 10.0]))
        pred = tiny_model.predict_head(torch.randn(8))
        assert pred.log_sigma.item() == 3.0
        assert pred.mu.item() == 1.5

    @pytest.mark.parametrize('y, mu, sigma, expected', [
        (0.3, 0.3, 1.0, 0.0),
        (1.0, 0.0, 1.0, 0.5),
        (0.5, 0.0, 0.5, 0.5 + math.log(0.5)),
    ])
    def test_nll_spot_values(self, y, mu, sigma, expected):
        pred = PredictedDistribution(
            torch.tensor([mu], dtype=torch.float64), torch.tensor([math.log(sigma)], dtype=torch.float64),
        )
        assert nll_loss(pred, [y]).item() == pytest.approx(expected, abs=1e-9)

    def test_nll_accepts_a_list_of_predictions(self):
        preds = [
            PredictedDistribution(torch.tensor(0.0, dtype=torch.float64), torch.tensor(0.0, dtype=torch.float64)),
            PredictedDistribution(torch.tensor(1.0, dtype=torch.float64), torch.tensor(0.0, dtype=torch.float64)),
        ]
        assert nll_loss(preds, [0.0, 0.0]).item() == pytest.approx(0.25, abs=1e-12)

    def test_nll_gradient_vanishes_at_the_label(self):
        mu = torch.tensor([0.4], dtype=torch.float64, requires_grad=True)
        loss = nll_loss(PredictedDistribution(mu, torch.tensor([0.2], dtype=torch.float64)), [0.4])
        (grad,) = torch.autograd.grad(loss, mu)
        assert grad.item() == 0.0

    def test_nll_empty_batch(self):
        with pytest.raises(DataValidationError):
            nll_loss([], [])

    def test_nll_length_mismatch(self):
        pred = PredictedDistribution(torch.zeros(2), torch.zeros(2))
        with pytest.raises(ShapeError):
            nll_loss(pred, [0.0, 0.0, 0.0])


class TestSilentGain:

    def test_tiny_spread_stays_at_the_mean(self):
        stats = GammaStats(0.3, 1e-9)
        assert sample_silent_gamma(stats, np.random.default_rng(0)) == pytest.approx(0.3, abs=1e-6)

    def test_sample_mean_within_clt_bound(self):
        stats = GammaStats(-0.5, 0.8)
        rng = np.random.default_rng(0)
        draws = np.array([sample_silent_gamma(stats, rng) for _ in range(100_000)])
        assert abs(draws.mean() - stats.upsilon) < 4 * stats.zeta / math.sqrt(100_000)

    def test_zero_spread_is_rejected(self):
        with pytest.raises(DataValidationError):
            GammaStats(0.0, 0.0)

    def test_training_forward_randomizes_only_silent_rows(self, tiny_config):
        model = PPAPModel(ModelConfig.tiny(dropout=0.0), seed=0)
        soundscape, masker = _random_inputs(tiny_config, batch=(2,))
        stats = GammaStats(0.0, 1.0)
        model.train()
        a = model(soundscape, masker, torch.tensor([0.5, 0.5]), [False, True], stats, np.random.default_rng(1))
        b = model(soundscape, masker, torch.tensor([0.5, 0.5]), [False, True], stats, np.random.default_rng(2))
        assert a.mu[0].item() == pytest.approx(b.mu[0].item(), abs=1e-6)
        assert a.mu[1].item() != pytest.approx(b.mu[1].item(), abs=1e-6)

    def test_silent_rows_need_statistics(self, tiny_config):
        model = PPAPModel(tiny_config, seed=0).train()
        soundscape, masker = _random_inputs(tiny_config)
        with pytest.raises(UsageError):
            model(soundscape, masker, 0.0, [True])


class TestForward:

    def test_eval_forward_is_repeatable(self, tiny_model, tiny_config):
        soundscape, masker = _random_inputs(tiny_config)
        with torch.no_grad():
            a = tiny_model(soundscape, masker, 0.25)
            b = tiny_model(soundscape, masker, 0.25)
        assert torch.equal(a.mu, b.mu) and torch.equal(a.log_sigma, b.log_sigma)
        assert a.mu.shape == ()

    def test_indexed_forward_matches_per_record_forward(self, tiny_model, tiny_config):
        soundscapes, maskers = _random_inputs(tiny_config, batch=(2,))
        s_idx, m_idx, gamma = [0, 1, 1], [1, 0, 1], torch.tensor([-1.0, 0.0, 1.5])
        with torch.no_grad():
            batched = tiny_model.forward_indexed(soundscapes, maskers, s_idx, m_idx, gamma)
            for row in range(3):
                single = tiny_model(soundscapes[s_idx[row]], maskers[m_idx[row]], gamma[row])
                assert batched.mu[row].item() == pytest.approx(single.mu.item(), abs=1e-5)

    def test_non_finite_gain(self, tiny_model, tiny_config):
        soundscape, masker = _random_inputs(tiny_config)
        with pytest.raises(DataValidationError):
            tiny_model(soundscape, masker, float('nan'))

    def test_gain_spec_matches_its_log_gain(self, tiny_model, tiny_config):
        soundscape, masker = _random_inputs(tiny_config)
        with torch.no_grad():
            by_spec = tiny_model(soundscape, masker, GainSpec(100.0))
            by_gamma = tiny_model(soundscape, masker, 2.0)
        assert by_spec.mu.item() == pytest.approx(by_gamma.mu.item(), abs=1e-6)

    def test_gain_spec_rejects_non_positive_gain(self):
        with pytest.raises(DataValidationError):
            GainSpec(0.0)
        assert GainSpec(0.0, is_silent=True).gamma == 0.0


class TestWeightFiles:

    def test_round_trip_preserves_predictions(self, tmp_path, tiny_model, tiny_config):
        save_weights(tmp_path / 'w.ppapw', tiny_model, {'seed': 0})
        loaded, metadata = load_weights(tmp_path / 'w.ppapw')
        soundscape, masker = _random_inputs(tiny_config)
        with torch.no_grad():
            assert torch.equal(tiny_model(soundscape, masker, 0.1).mu, loaded(soundscape, masker, 0.1).mu)
        assert metadata == {'seed': 0}
        assert not loaded.training
        assert weights_digest(loaded) == weights_digest(tiny_model)

    def test_same_seed_same_bytes(self, tiny_config):
        assert serialize_weights(PPAPModel(tiny_config, 4)) == serialize_weights(PPAPModel(tiny_config, 4))
        assert weights_digest(PPAPModel(tiny_config, 4)) != weights_digest(PPAPModel(tiny_config, 5))

    def test_file_layout(self, tmp_path, tiny_model):
        payload = save_weights(tmp_path / 'w.ppapw', tiny_model).read_bytes()
        assert payload.startswith(b'PPAPW1')
        n_floats = sum(t.numel() for t in tiny_model.state_dict().values())
        header_len = int.from_bytes(payload[6:10], 'little')
        assert len(payload) == 10 + header_len + 4 * n_floats

    def test_bad_magic(self, tmp_path):
        (tmp_path / 'bad.ppapw').write_bytes(b'NOTPPAP')
        with pytest.raises(DataValidationError, match="magic"):
            load_weights(tmp_path / 'bad.ppapw')

    def test_trailing_bytes(self, tmp_path, tiny_model):
        path = save_weights(tmp_path / 'w.ppapw', tiny_model)
        path.write_bytes(path.read_bytes() + b'\x00\x00\x00\x00')
        with pytest.raises(DataValidationError, match="trailing"):
            load_weights(path)


class TestGradientCheck:

    @pytest.mark.parametrize('augmentation, attention', ALL_COMBINATIONS)
    def test_full_model_gradients(self, augmentation, attention):
        report = gradcheck_model(augmentation, attention, seed=0, max_elements=12)
        failing = [(g.name, g.max_relative_error) for g in report if not g.passed]
        assert not failing, failing

    def test_report_lists_every_parameter_group(self):
        report = gradcheck_model('cat', 'aa', seed=0, max_elements=2)
        model = PPAPModel(ModelConfig.tiny(augmentation='cat', attention='aa'))
        assert [g.name for g in report] == [name for name, _ in model.named_parameters()]

    def test_corrupted_backward_is_caught(self):
        report = gradcheck_model('conv', 'dpa', seed=0, max_elements=4, corrupt_backward=True)
        assert any(not g.passed for g in report)
