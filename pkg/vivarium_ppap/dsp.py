"""
Audio front end: WAV IO, STFT magnitudes and the log-mel spectrogram the model consumes.

Conventions (fixed so spectrograms are reproducible bit for bit):
- periodic Hann window, hop = W/2, no centering or padding, so a frame never
  reaches past the end of the signal and T = floor((L - W) / H) + 1
- HTK mel scale, mel(f) = 2595 * log10(1 + f / 700), triangular filters with
  unit peaks spanning 0 Hz to sr/2
- energy = squared magnitude, log is natural with a floor of 1e-10
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import librosa
import numpy as np
import scipy.signal
import soundfile as sf

from vivarium_ppap.errors import DataValidationError, ShapeError, TooShortError
from vivarium_ppap.utils.atomic import atomic_path

logger = logging.getLogger(__name__)

SAMPLE_RATE = 44100
WINDOW_SIZE = 4096
HOP_SIZE = 2048
MEL_BINS = 64
LOG_FLOOR = 1e-10

WAV_SUBTYPES = {
    16: 'PCM_16',
    24: 'PCM_24',
    32: 'FLOAT',
}


@dataclass(frozen=True)
class AudioClip:
    """Digital audio in full-scale units, stored channels-first as ``(C, L)``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ShapeError(f"AudioClip samples must be (channels, length), got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise DataValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, 'samples', samples)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate

    def scaled(self, factor: float) -> 'AudioClip':
        return AudioClip(self.samples * factor, self.sample_rate)

    def clipped(self) -> Tuple['AudioClip', int]:
        """Clip to [-1, 1]; returns the clipped clip and the number of samples changed."""
        n_clipped = int(np.count_nonzero(np.abs(self.samples) > 1.0))
        return AudioClip(np.clip(self.samples, -1.0, 1.0), self.sample_rate), n_clipped

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples))))


@dataclass(frozen=True)
class Spectrogram:
    """Log-mel energies laid out as ``(T, F, C)``."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ShapeError(f"Spectrogram values must be (T, F, C), got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataValidationError("Spectrogram contains non-finite values")
        object.__setattr__(self, 'values', values)

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]

    @property
    def mel_bins(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    @classmethod
    def silent(cls, frame_count: int, mel_bins: int, channels: int = 1) -> 'Spectrogram':
        """Spectrogram of a silent track: every entry sits at the log floor."""
        return cls(np.full((frame_count, mel_bins, channels), np.log(LOG_FLOOR)))


def frame_count(length: int, window_size: int = WINDOW_SIZE, hop: int = HOP_SIZE) -> int:
    if length < window_size:
        raise TooShortError(
            f"Clip of {length} samples is too short for one analysis window of {window_size} samples"
        )
    return (length - window_size) // hop + 1


def hann_window(window_size: int) -> np.ndarray:
    return scipy.signal.get_window('hann', window_size, fftbins=True)


def stft_magnitude(clip: AudioClip, window_size: int = WINDOW_SIZE, hop: int = HOP_SIZE) -> np.ndarray:
    """Magnitude STFT per channel, shape ``(C, T, W/2 + 1)``.

    Frame ``t`` covers samples ``[t * hop, t * hop + window_size)``.
    """
    if window_size % 2:
        raise DataValidationError(f"window_size must be even, got {window_size}")
    if hop < 1:
        raise DataValidationError(f"hop must be at least 1, got {hop}")
    n_frames = frame_count(clip.length, window_size, hop)

    spectrum = librosa.stft(
        clip.samples,
        n_fft=window_size,
        hop_length=hop,
        win_length=window_size,
        window=hann_window(window_size),
        center=False,
    )
    # librosa returns (C, bins, frames)
    magnitude = np.abs(spectrum).transpose(0, 2, 1)
    assert magnitude.shape[1] == n_frames
    return magnitude


def mel_center_frequencies(mel_bins: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Center frequency of each triangular filter in Hz."""
    edges = librosa.mel_frequencies(n_mels=mel_bins + 2, fmin=0.0, fmax=sample_rate / 2.0, htk=True)
    return edges[1:-1]


def mel_filterbank(mel_bins: int = MEL_BINS, sample_rate: int = SAMPLE_RATE, fft_size: int = WINDOW_SIZE) -> np.ndarray:
    """Triangular HTK mel filters with unit peaks, shape ``(F, W/2 + 1)``."""
    if mel_bins < 1:
        raise DataValidationError(f"mel_bins must be at least 1, got {mel_bins}")
    if fft_size % 2:
        raise DataValidationError(f"fft_size must be even, got {fft_size}")
    n_bins = fft_size // 2 + 1
    if mel_bins > n_bins:
        raise DataValidationError(
            f"{mel_bins} mel bins cannot be resolved from {n_bins} FFT bins; use fewer mel bins or a longer window"
        )
    weights = librosa.filters.mel(
        sr=sample_rate,
        n_fft=fft_size,
        n_mels=mel_bins,
        fmin=0.0,
        fmax=sample_rate / 2.0,
        htk=True,
        norm=None,
        dtype=np.float64,
    )
    empty = np.flatnonzero(weights.max(axis=1) <= 0.0)
    if empty.size:
        logger.warning(f"Mel filters {empty.tolist()} have no support at fft_size={fft_size}")
    return weights


def log_mel_spectrogram(
    clip: AudioClip,
    sample_rate: int = SAMPLE_RATE,
    window_size: int = WINDOW_SIZE,
    hop: int = HOP_SIZE,
    mel_bins: int = MEL_BINS,
) -> Spectrogram:
    """Log-mel spectrogram of ``clip``, shape ``(T, F, C)``.

    ``sample_rate`` is the rate the model was configured for; a clip recorded at
    any other rate is rejected rather than resampled.
    """
    if clip.sample_rate != sample_rate:
        raise DataValidationError(
            f"Clip sample rate {clip.sample_rate} Hz does not match the configured {sample_rate} Hz"
        )
    if not np.all(np.isfinite(clip.samples)):
        raise DataValidationError("Clip contains NaN or Inf samples")

    magnitude = stft_magnitude(clip, window_size, hop)
    energy = np.square(magnitude)
    filters = mel_filterbank(mel_bins, sample_rate, window_size)
    mel_energy = np.einsum('ctk,fk->tfc', energy, filters)
    return Spectrogram(np.log(np.maximum(mel_energy, LOG_FLOOR)))


def read_wav(path: Union[str, Path]) -> AudioClip:
    """Read a PCM (16/24-bit) or 32-bit float WAV file into full-scale floats."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"WAV file not found: {path}")
    info = sf.info(str(path))
    if info.subtype not in WAV_SUBTYPES.values():
        raise DataValidationError(
            f"Unsupported WAV encoding {info.subtype} in {path}; expected one of {sorted(WAV_SUBTYPES.values())}"
        )
    # soundfile divides integer PCM by 2**(bits - 1)
    data, sample_rate = sf.read(str(path), dtype='float64', always_2d=True)
    return AudioClip(data.T, sample_rate)


def write_wav(path: Union[str, Path], clip: AudioClip, bits: int = 16) -> Path:
    if bits not in WAV_SUBTYPES:
        raise DataValidationError(f"bits must be one of {sorted(WAV_SUBTYPES)}, got {bits}")
    clipped, n_clipped = clip.clipped()
    if n_clipped:
        logger.warning(f"Clipped {n_clipped} samples while writing {path}")
    with atomic_path(path) as tmp:
        sf.write(str(tmp), clipped.samples.T, clipped.sample_rate, subtype=WAV_SUBTYPES[bits], format='WAV')
    return Path(path)
