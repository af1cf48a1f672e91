"""
The PPAP network.

Two convolutional branches embed the soundscape (keys) and the masker
(queries); an augmentation layer mixes them in feature space conditioned on the
log-gain, an attention block fuses queries, keys and gain-conditioned values
into one vector, and a dense head predicts the mean and log standard deviation
of the pleasantness response.
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from vivarium_ppap import numerics
from vivarium_ppap.dsp import HOP_SIZE, MEL_BINS, SAMPLE_RATE, WINDOW_SIZE, Spectrogram
from vivarium_ppap.errors import DataValidationError, ShapeError, UsageError
from vivarium_ppap.utils.atomic import atomic_write_bytes

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b'PPAPW1'


class AugmentationVariant(str, Enum):
    CAT = 'cat'
    ADD = 'add'
    CONV = 'conv'


class AttentionVariant(str, Enum):
    AA = 'aa'
    DPA = 'dpa'
    MHA4 = 'mha4'
    PASSTHROUGH = 'passthrough'


def _parse_variant(enum_cls, value):
    try:
        return enum_cls(str(value.value if isinstance(value, Enum) else value).lower())
    except ValueError:
        choices = ', '.join(v.value for v in enum_cls)
        raise UsageError(f"Unknown {enum_cls.__name__} '{value}'; choose one of: {choices}") from None


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and spectrogram constants.

    ``n_frames`` (N) and ``embed_dim`` (D) are tied to the spectrogram shape by
    the pooling chain: each conv block halves time and frequency (floor), and
    the final frequency bins times the last channel count must equal D.
    """

    time_frames: int = 644
    mel_bins: int = MEL_BINS
    soundscape_channels: int = 2
    conv_channels: Tuple[int, ...] = (16, 32, 48, 64, 64)
    embed_dim: int = 128
    augmentation: AugmentationVariant = AugmentationVariant.CONV
    attention: AttentionVariant = AttentionVariant.DPA
    n_heads: int = 4
    dropout: float = numerics.DEFAULT_DROPOUT
    log_sigma_range: Tuple[float, float] = (-6.0, 3.0)
    bn_momentum: float = numerics.BN_MOMENTUM
    sample_rate: int = SAMPLE_RATE
    window_size: int = WINDOW_SIZE
    hop: int = HOP_SIZE

    def __post_init__(self):
        object.__setattr__(self, 'augmentation', _parse_variant(AugmentationVariant, self.augmentation))
        object.__setattr__(self, 'attention', _parse_variant(AttentionVariant, self.attention))
        object.__setattr__(self, 'conv_channels', tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, 'log_sigma_range', tuple(float(v) for v in self.log_sigma_range))

        if not self.conv_channels:
            raise UsageError("conv_channels must name at least one block")
        if self.n_frames < 1 or self.pooled_mel_bins < 1:
            raise UsageError(
                f"{len(self.conv_channels)} pooling stages collapse a {self.time_frames}x{self.mel_bins} "
                f"spectrogram; use fewer conv blocks or a larger input"
            )
        flattened = self.pooled_mel_bins * self.conv_channels[-1]
        if flattened != self.embed_dim:
            raise UsageError(
                f"embed_dim {self.embed_dim} must equal pooled mel bins ({self.pooled_mel_bins}) "
                f"x last conv channels ({self.conv_channels[-1]}) = {flattened}"
            )
        if self.attention is AttentionVariant.MHA4 and self.embed_dim % self.n_heads:
            raise UsageError(f"embed_dim {self.embed_dim} is not divisible by {self.n_heads} heads")
        lo, hi = self.log_sigma_range
        if lo >= hi:
            raise UsageError(f"log_sigma_range must be increasing, got {self.log_sigma_range}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def n_frames(self) -> int:
        return self.time_frames // (2 ** len(self.conv_channels))

    @property
    def pooled_mel_bins(self) -> int:
        return self.mel_bins // (2 ** len(self.conv_channels))

    @property
    def soundscape_shape(self) -> Tuple[int, int, int]:
        return (self.time_frames, self.mel_bins, self.soundscape_channels)

    @property
    def masker_shape(self) -> Tuple[int, int, int]:
        return (self.time_frames, self.mel_bins, 1)

    def spectrogram_kwargs(self) -> dict:
        return {
            'sample_rate': self.sample_rate,
            'window_size': self.window_size,
            'hop': self.hop,
            'mel_bins': self.mel_bins,
        }

    def to_dict(self) -> dict:
        data = asdict(self)
        data['augmentation'] = self.augmentation.value
        data['attention'] = self.attention.value
        data['conv_channels'] = list(self.conv_channels)
        data['log_sigma_range'] = list(self.log_sigma_range)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelConfig':
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"Unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def tiny(cls, **overrides) -> 'ModelConfig':
        """Gradient-check sized network: 16x8x2 input, three blocks, N=2, D=8."""
        base = dict(time_frames=16, mel_bins=8, soundscape_channels=2, conv_channels=(4, 6, 8), embed_dim=8)
        base.update(overrides)
        return cls(**base)

    def with_variants(self, augmentation=None, attention=None) -> 'ModelConfig':
        return replace(
            self,
            augmentation=augmentation if augmentation is not None else self.augmentation,
            attention=attention if attention is not None else self.attention,
        )


@dataclass(frozen=True)
class GainSpec:
    """Digital gain of a masker; ``gamma`` is its base-10 log."""

    g: float
    is_silent: bool = False

    def __post_init__(self):
        if not self.is_silent and not (self.g > 0 and math.isfinite(self.g)):
            raise DataValidationError(f"gain must be a positive finite multiplier, got {self.g}")

    @property
    def gamma(self) -> float:
        if self.g > 0 and math.isfinite(self.g):
            return math.log10(self.g)
        return 0.0


@dataclass(frozen=True)
class GammaStats:
    """Mean (upsilon) and std (zeta) of training log-gains for non-silent maskers."""

    upsilon: float
    zeta: float

    def __post_init__(self):
        if not self.zeta > 0:
            raise DataValidationError(f"gamma std must be positive, got {self.zeta}")


@dataclass
class PredictedDistribution:
    """Normal response model; ``mu`` and ``log_sigma`` share leading dimensions."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    def numpy(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.mu.detach().cpu().numpy(), self.log_sigma.detach().cpu().numpy()


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weights = nn.Parameter(torch.zeros(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out))

    def reset_parameters(self, generator: torch.Generator):
        fan_in = self.weights.shape[0]
        numerics.init_uniform_fan_in(self.weights, fan_in, generator)
        numerics.init_uniform_fan_in(self.bias, fan_in, generator)

    def forward(self, x):
        return numerics.dense(x, self.weights, self.bias)


class ConvBlock(nn.Module):
    """3x3 conv -> batch norm -> dropout -> swish -> 2x2 average pool."""

    def __init__(self, c_in: int, c_out: int, dropout: float, momentum: float):
        super().__init__()
        self.dropout = dropout
        self.momentum = momentum
        self.conv = nn.Module()
        self.conv.kernel = nn.Parameter(torch.zeros(3, 3, c_in, c_out))
        self.conv.bias = nn.Parameter(torch.zeros(c_out))
        self.bn = nn.Module()
        self.bn.scale = nn.Parameter(torch.ones(c_out))
        self.bn.shift = nn.Parameter(torch.zeros(c_out))
        self.bn.register_buffer('running_mean', torch.zeros(c_out))
        self.bn.register_buffer('running_var', torch.ones(c_out))

    def reset_parameters(self, generator: torch.Generator):
        kh, kw, c_in, _ = self.conv.kernel.shape
        fan_in = kh * kw * c_in
        numerics.init_uniform_fan_in(self.conv.kernel, fan_in, generator)
        numerics.init_uniform_fan_in(self.conv.bias, fan_in, generator)

    def forward(self, x, generator=None):
        mode = 'train' if self.training else 'eval'
        x = numerics.conv2d(x, self.conv.kernel, self.conv.bias, padding='same')
        x = numerics.batch_norm(
            x, self.bn.scale, self.bn.shift, self.bn.running_mean, self.bn.running_var,
            mode=mode, momentum=self.momentum,
        )
        x = numerics.dropout(x, self.dropout, mode, generator)
        x = numerics.swish(x)
        return numerics.avg_pool2d(x, 2)


class FeatureExtractor(nn.Module):
    """Conv blocks ``block1..blockB`` followed by a freq x channel flatten to ``(N, D)``."""

    def __init__(self, in_channels: int, config: ModelConfig):
        super().__init__()
        self.in_channels = in_channels
        self.config = config
        c_in = in_channels
        for i, c_out in enumerate(config.conv_channels, start=1):
            self.add_module(f'block{i}', ConvBlock(c_in, c_out, config.dropout, config.bn_momentum))
            c_in = c_out

    def blocks(self):
        return [getattr(self, f'block{i}') for i in range(1, len(self.config.conv_channels) + 1)]

    def reset_parameters(self, generator):
        for block in self.blocks():
            block.reset_parameters(generator)

    def forward(self, x, generator=None):
        expected = (self.config.time_frames, self.config.mel_bins, self.in_channels)
        if tuple(x.shape[-3:]) != expected:
            raise ShapeError(f"Expected spectrogram shape {expected}, got {tuple(x.shape[-3:])}")
        for block in self.blocks():
            x = block(x, generator)
        # (..., N, F', C') -> (..., N, F' * C')
        return x.reshape(tuple(x.shape[:-2]) + (x.shape[-2] * x.shape[-1],))


class CatAugmentation(nn.Module):
    """Dense^2 over ``[k | q | gamma * 1]``."""

    def __init__(self, d: int):
        super().__init__()
        self.dense1 = Dense(2 * d + 1, d)
        self.dense2 = Dense(d, d)

    def reset_parameters(self, generator):
        self.dense1.reset_parameters(generator)
        self.dense2.reset_parameters(generator)

    def stacked_input(self, k, q, gamma):
        column = gamma[..., None, None].expand(tuple(k.shape[:-1]) + (1,))
        return torch.cat([k, q, column], dim=-1)

    def forward(self, k, q, gamma):
        x = self.stacked_input(k, q, gamma)
        return self.dense2(numerics.swish(self.dense1(x)))


class AddAugmentation(nn.Module):
    """Dense^2 over ``k + gamma * q``."""

    def __init__(self, d: int):
        super().__init__()
        self.dense1 = Dense(d, d)
        self.dense2 = Dense(d, d)

    def reset_parameters(self, generator):
        self.dense1.reset_parameters(generator)
        self.dense2.reset_parameters(generator)

    def forward(self, k, q, gamma):
        x = k + gamma[..., None, None] * q
        return self.dense2(numerics.swish(self.dense1(x)))


class ConvAugmentation(nn.Module):
    """Dense over a per-feature length-3 convolution across the stack ``[k || q || gamma * 1]``."""

    def __init__(self, d: int):
        super().__init__()
        self.conv = nn.Module()
        self.conv.kernel = nn.Parameter(torch.zeros(3, d))
        self.conv.bias = nn.Parameter(torch.zeros(d))
        self.dense = Dense(d, d)

    def reset_parameters(self, generator):
        numerics.init_uniform_fan_in(self.conv.kernel, 3, generator)
        numerics.init_uniform_fan_in(self.conv.bias, 3, generator)
        self.dense.reset_parameters(generator)

    def stacked_input(self, k, q, gamma):
        plane = gamma[..., None, None].expand_as(k)
        return torch.stack([k, q, plane], dim=-1)

    def forward(self, k, q, gamma):
        stack = self.stacked_input(k, q, gamma)
        collapsed = torch.einsum('...nds,sd->...nd', stack, self.conv.kernel) + self.conv.bias
        return self.dense(collapsed)


AUGMENTATIONS = {
    AugmentationVariant.CAT: CatAugmentation,
    AugmentationVariant.ADD: AddAugmentation,
    AugmentationVariant.CONV: ConvAugmentation,
}


class AdditiveAttention(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.query = Dense(d, d)
        self.key = Dense(d, d)
        self.score = nn.Parameter(torch.zeros(d))

    def reset_parameters(self, generator):
        self.query.reset_parameters(generator)
        self.key.reset_parameters(generator)
        numerics.init_uniform_fan_in(self.score, self.score.shape[0], generator)

    def forward(self, q, k, v):
        q_bar = q.mean(dim=-2, keepdim=True)
        energy = torch.tanh(self.query(q_bar) + self.key(k)) @ self.score
        weights = torch.softmax(energy, dim=-1)
        z = (weights[..., None] * v).sum(dim=-2)
        return z, weights[..., None, :]


class DotProductAttention(nn.Module):
    def reset_parameters(self, generator):
        pass

    def forward(self, q, k, v):
        q_bar = q.mean(dim=-2)
        energy = torch.einsum('...d,...nd->...n', q_bar, k) / math.sqrt(k.shape[-1])
        weights = torch.softmax(energy, dim=-1)
        z = (weights[..., None] * v).sum(dim=-2)
        return z, weights[..., None, :]


class MultiHeadAttention(nn.Module):
    """Projected dot-product attention with the time-mean query as the single query."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ShapeError(f"embed_dim {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.query = Dense(d, d)
        self.key = Dense(d, d)
        self.value = Dense(d, d)
        self.output = Dense(d, d)

    def reset_parameters(self, generator):
        for layer in (self.query, self.key, self.value, self.output):
            layer.reset_parameters(generator)

    def _split(self, x):
        # (..., n, D) -> (..., H, n, Dh)
        x = x.reshape(tuple(x.shape[:-1]) + (self.n_heads, self.head_dim))
        return x.transpose(-3, -2)

    def forward(self, q, k, v):
        q_bar = q.mean(dim=-2, keepdim=True)
        Q = self._split(self.query(q_bar))
        K = self._split(self.key(k))
        V = self._split(self.value(v))
        scores = Q @ K.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        context = (weights @ V).squeeze(-2)
        context = context.reshape(tuple(context.shape[:-2]) + (-1,))
        return self.output(context), weights.squeeze(-2)


class PassThroughAttention(nn.Module):
    """Ablation without attention: the time-mean of the values."""

    def reset_parameters(self, generator):
        pass

    def forward(self, q, k, v):
        return v.mean(dim=-2), None


def build_attention(config: ModelConfig) -> nn.Module:
    d = config.embed_dim
    if config.attention is AttentionVariant.AA:
        return AdditiveAttention(d)
    if config.attention is AttentionVariant.DPA:
        return DotProductAttention()
    if config.attention is AttentionVariant.MHA4:
        return MultiHeadAttention(d, config.n_heads)
    return PassThroughAttention()


class PPAPModel(nn.Module):
    """Gain-conditioned PPAP network.

    Submodules follow the component names: ``fs`` soundscape extractor, ``fm``
    masker extractor, ``fg`` augmentation, ``fa`` attention, ``fo`` output head.
    Use ``model.train()`` / ``model.eval()`` to switch modes.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        self.fs = FeatureExtractor(config.soundscape_channels, config)
        self.fm = FeatureExtractor(1, config)
        self.fg = AUGMENTATIONS[config.augmentation](config.embed_dim)
        self.fa = build_attention(config)
        self.fo = Dense(config.embed_dim, 2)
        self.generator = torch.Generator()
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        generator = torch.Generator().manual_seed(seed)
        for component in (self.fs, self.fm, self.fg, self.fa, self.fo):
            component.reset_parameters(generator)
        self.generator.manual_seed(seed + 1)

    def parameter_set(self) -> numerics.ParameterSet:
        return numerics.ParameterSet(self, rng_seed=self.seed)

    def _as_tensor(self, spec) -> torch.Tensor:
        if isinstance(spec, Spectrogram):
            spec = spec.values
        dtype = next(self.parameters()).dtype
        return torch.as_tensor(np.asarray(spec) if not torch.is_tensor(spec) else spec, dtype=dtype)

    def _gamma_tensor(self, gamma, like: torch.Tensor) -> torch.Tensor:
        if isinstance(gamma, GainSpec):
            gamma = gamma.gamma
        gamma = torch.as_tensor(gamma, dtype=like.dtype)
        if not torch.all(torch.isfinite(gamma)):
            raise DataValidationError("gamma must be finite")
        return gamma

    def extract_soundscape_features(self, spec) -> torch.Tensor:
        return self.fs(self._as_tensor(spec), self.generator)

    def extract_masker_features(self, spec) -> torch.Tensor:
        return self.fm(self._as_tensor(spec), self.generator)

    def augment(self, k, q, gamma) -> torch.Tensor:
        if k.shape != q.shape:
            raise ShapeError(f"keys {tuple(k.shape)} and queries {tuple(q.shape)} differ in shape")
        return self.fg(k, q, self._gamma_tensor(gamma, k))

    def fuse(self, q, k, v, return_weights: bool = False):
        z, weights = self.fa(q, k, v)
        return (z, weights) if return_weights else z

    def predict_head(self, z) -> PredictedDistribution:
        raw = self.fo(z)
        lo, hi = self.config.log_sigma_range
        return PredictedDistribution(raw[..., 0], torch.clamp(raw[..., 1], lo, hi))

    def predict_from_embeddings(self, k, q, gamma) -> PredictedDistribution:
        """The f_g -> f_a -> f_o stage shared by training and the query scheduler."""
        v = self.augment(k, q, gamma)
        return self.predict_head(self.fuse(q, k, v))

    def forward(
        self,
        soundscape,
        masker,
        gamma,
        is_silent=None,
        gamma_stats: Optional[GammaStats] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> PredictedDistribution:
        k = self.extract_soundscape_features(soundscape)
        q = self.extract_masker_features(masker)
        gamma = self._gamma_tensor(gamma, k)
        if self.training and is_silent is not None:
            gamma = randomize_silent_gammas(gamma, is_silent, gamma_stats, rng)
        return self.predict_from_embeddings(k, q, gamma)

    def forward_indexed(self, soundscapes, maskers, soundscape_index, masker_index, gamma) -> PredictedDistribution:
        """Batched forward that embeds each distinct clip once and gathers rows by index."""
        soundscape_index = torch.as_tensor(np.asarray(soundscape_index), dtype=torch.long)
        masker_index = torch.as_tensor(np.asarray(masker_index), dtype=torch.long)
        k = self.extract_soundscape_features(soundscapes)[soundscape_index]
        q = self.extract_masker_features(maskers)[masker_index]
        return self.predict_from_embeddings(k, q, self._gamma_tensor(gamma, k))


def sample_silent_gamma(stats: GammaStats, rng: np.random.Generator) -> float:
    """Draw a stand-in log-gain for a silent masker from N(upsilon, zeta^2)."""
    if not stats.zeta > 0:
        raise DataValidationError(f"gamma std must be positive, got {stats.zeta}")
    return float(rng.normal(stats.upsilon, stats.zeta))


def randomize_silent_gammas(gamma: torch.Tensor, is_silent, stats: Optional[GammaStats], rng) -> torch.Tensor:
    silent = np.atleast_1d(np.asarray(is_silent, dtype=bool))
    if not silent.any():
        return gamma
    if stats is None or rng is None:
        raise UsageError("Training on silent maskers needs gamma statistics and a random generator")
    values = gamma.detach().clone().reshape(-1)
    for i in np.flatnonzero(silent):
        values[i] = sample_silent_gamma(stats, rng)
    return values.reshape(gamma.shape)


def nll_loss(predictions, labels) -> torch.Tensor:
    """Mean over the batch of 0.5 * ((y - mu) / sigma)^2 + log sigma."""
    if isinstance(predictions, (list, tuple)):
        if not predictions:
            raise DataValidationError("nll_loss needs at least one prediction")
        mu = torch.stack([torch.as_tensor(p.mu) for p in predictions]).reshape(-1)
        log_sigma = torch.stack([torch.as_tensor(p.log_sigma) for p in predictions]).reshape(-1)
    else:
        mu = predictions.mu.reshape(-1)
        log_sigma = predictions.log_sigma.reshape(-1)
    y = torch.as_tensor(labels, dtype=mu.dtype).reshape(-1)
    if y.numel() == 0 or mu.numel() == 0:
        raise DataValidationError("nll_loss needs a non-empty batch")
    if y.numel() != mu.numel():
        raise ShapeError(f"{mu.numel()} predictions but {y.numel()} labels")
    residual = (y - mu) * torch.exp(-log_sigma)
    return torch.mean(0.5 * residual ** 2 + log_sigma)


def _tensor_block(model: PPAPModel) -> Tuple[list, bytes]:
    entries, chunks = [], []
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().numpy().astype('<f4')
        entries.append({'name': name, 'shape': list(array.shape), 'dtype': 'float32'})
        chunks.append(array.tobytes())
    return entries, b''.join(chunks)


def weights_digest(model: PPAPModel) -> str:
    """sha256 over the config and the float32 tensor block; identifies a trained model."""
    entries, block = _tensor_block(model)
    header = json.dumps({'config': model.config.to_dict(), 'tensors': entries}, sort_keys=True).encode('utf-8')
    return hashlib.sha256(header + block).hexdigest()


def serialize_weights(model: PPAPModel, metadata: Optional[dict] = None) -> bytes:
    entries, block = _tensor_block(model)
    header = {
        'config': model.config.to_dict(),
        'tensors': entries,
        'metadata': metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    return WEIGHTS_MAGIC + struct.pack('<I', len(header_bytes)) + header_bytes + block


def save_weights(path: Union[str, Path], model: PPAPModel, metadata: Optional[dict] = None) -> Path:
    """Write a ``PPAPW1`` weight file atomically."""
    return atomic_write_bytes(path, serialize_weights(model, metadata))


def load_weights(path: Union[str, Path]) -> Tuple[PPAPModel, dict]:
    """Read a ``PPAPW1`` weight file; returns an eval-mode model and the stored metadata."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Weight file not found: {path}")
    payload = path.read_bytes()
    if not payload.startswith(WEIGHTS_MAGIC):
        raise DataValidationError(f"{path} is not a PPAP weight file (bad magic)")
    offset = len(WEIGHTS_MAGIC)
    (header_len,) = struct.unpack_from('<I', payload, offset)
    offset += 4
    header = json.loads(payload[offset:offset + header_len].decode('utf-8'))
    offset += header_len

    model = PPAPModel(ModelConfig.from_dict(header['config']))
    expected = model.state_dict()
    state = {}
    for entry in header['tensors']:
        name, shape = entry['name'], tuple(entry['shape'])
        if name not in expected or tuple(expected[name].shape) != shape:
            raise DataValidationError(f"{path}: tensor {name} {shape} does not fit the stored config")
        count = int(np.prod(shape)) if shape else 1
        array = np.frombuffer(payload, dtype='<f4', count=count, offset=offset).reshape(shape)
        offset += 4 * count
        state[name] = torch.from_numpy(array.astype(np.float32))
    if offset != len(payload):
        raise DataValidationError(f"{path}: {len(payload) - offset} trailing bytes after the tensor block")
    missing = set(expected) - set(state)
    if missing:
        raise DataValidationError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model, header.get('metadata', {})


def gradcheck_model(
    augmentation=AugmentationVariant.CONV,
    attention=AttentionVariant.DPA,
    seed: int = 0,
    batch_size: int = 3,
    max_elements: Optional[int] = None,
    corrupt_backward: bool = False,
    config: Optional[ModelConfig] = None,
):
    """Finite-difference check of the full model in 64-bit eval mode at the tiny config."""
    config = (config or ModelConfig.tiny()).with_variants(augmentation, attention)
    model = PPAPModel(config, seed).double().eval()
    gen = torch.Generator().manual_seed(seed)
    soundscape = torch.randn((batch_size,) + config.soundscape_shape, generator=gen, dtype=torch.float64)
    masker = torch.randn((batch_size,) + config.masker_shape, generator=gen, dtype=torch.float64)
    gamma = torch.rand(batch_size, generator=gen, dtype=torch.float64) * 4.0 - 2.0
    labels = torch.rand(batch_size, generator=gen, dtype=torch.float64) * 2.0 - 1.0

    def loss_fn():
        return nll_loss(model(soundscape, masker, gamma), labels)

    return numerics.finite_difference_check(
        loss_fn, model.parameter_set(), max_elements=max_elements, seed=seed, corrupt_backward=corrupt_backward,
    )
