"""
Response datasets: ISO Pleasantness labels, SMR mixing, fold assignment and a
synthetic-oracle generator that stands in for listening-test data.

A manifest is a pandas DataFrame with one row per response, stored as JSON
lines. Audio paths are relative to the manifest's directory.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.signal

from vivarium_ppap.calibration import (
    GainLookupTable, SceneMeta, save_lookup_tables, smr_to_gain, synth_lookup_table,
)
from vivarium_ppap.dsp import AudioClip, Spectrogram, log_mel_spectrogram, read_wav, write_wav
from vivarium_ppap.errors import DataValidationError, OutOfRangeError, ShapeError, UsageError
from vivarium_ppap.model import GammaStats, ModelConfig
from vivarium_ppap.utils.atomic import atomic_path, atomic_write_text

logger = logging.getLogger(__name__)

SILENT = 'SILENT'
N_FOLDS = 5
GAMMA_RANGE = (-2.0, 2.0)
SOUNDSCAPE_SPDR = 2.0  # Pa per unit full scale of the simulated recorder
MASKER_RMS = 0.05

RATING_ITEMS = (
    'pleasant', 'eventful', 'uneventful', 'chaotic',
    'vibrant', 'calm', 'annoying', 'monotonous',
)
_DIAGONAL = math.sqrt(2.0) / 2.0
_PLEASANTNESS_SCALE = 4.0 + 4.0 * math.sqrt(2.0)

MANIFEST_COLUMNS = ['scene_id', 'soundscape_wav', 'masker_wav', 'gain', 'label', 'fold']


def iso_pleasantness(ratings: Union[Mapping[str, int], Sequence[int]]) -> float:
    """ISO Pleasantness in [-1, 1] from the 8 circumplex Likert ratings.

    Ratings are centered at 3; eventful and uneventful do not contribute.
    """
    if isinstance(ratings, Mapping):
        missing = [item for item in RATING_ITEMS if item not in ratings]
        if missing:
            raise DataValidationError(f"Missing ratings for {missing}")
        values = [ratings[item] for item in RATING_ITEMS]
    else:
        values = list(ratings)
        if len(values) != len(RATING_ITEMS):
            raise DataValidationError(f"Expected {len(RATING_ITEMS)} ratings, got {len(values)}")
    for item, value in zip(RATING_ITEMS, values):
        if value not in (1, 2, 3, 4, 5):
            raise OutOfRangeError(f"Rating for '{item}' must be an integer from 1 to 5, got {value}")

    c = {item: value - 3 for item, value in zip(RATING_ITEMS, values)}
    raw = (c['pleasant'] - c['annoying']
           + _DIAGONAL * (c['calm'] - c['chaotic'] + c['vibrant'] - c['monotonous']))
    return raw / _PLEASANTNESS_SCALE


def mix_at_smr(
    soundscape: AudioClip,
    masker: AudioClip,
    table: GainLookupTable,
    scene: SceneMeta,
    smr: float,
) -> Tuple[AudioClip, int]:
    """Add the masker at ``smr`` dBA relative to the scene level; returns the mixture and the clip count."""
    if soundscape.sample_rate != masker.sample_rate:
        raise DataValidationError(
            f"Sample rates differ: soundscape {soundscape.sample_rate} Hz, masker {masker.sample_rate} Hz"
        )
    if soundscape.length != masker.length:
        raise ShapeError(f"Length mismatch: soundscape {soundscape.length}, masker {masker.length} samples")
    if masker.channels not in (1, soundscape.channels):
        raise ShapeError(f"A {masker.channels}-channel masker cannot be mixed into {soundscape.channels} channels")
    gain = smr_to_gain(table, scene, smr)
    mixture, n_clipped = AudioClip(soundscape.samples + gain * masker.samples, soundscape.sample_rate).clipped()
    if n_clipped:
        logger.warning(f"Mixing into scene '{scene.scene_id}' at SMR {smr:+.1f} dBA clipped {n_clipped} samples")
    return mixture, n_clipped


@dataclass(frozen=True)
class ResponseRecord:
    scene_id: str
    soundscape_wav: str
    masker_wav: str
    gain: float
    label: float
    fold: int
    ratings: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if not self.is_silent and not (self.gain > 0 and math.isfinite(self.gain)):
            raise DataValidationError(f"Record in scene '{self.scene_id}' has invalid gain {self.gain}")
        if not -1.0 <= self.label <= 1.0:
            raise OutOfRangeError(f"Record in scene '{self.scene_id}' has label {self.label} outside [-1, 1]")
        if not 0 <= self.fold < N_FOLDS:
            raise OutOfRangeError(f"Record in scene '{self.scene_id}' has fold {self.fold} outside 0..{N_FOLDS - 1}")
        if self.ratings is not None:
            iso_pleasantness(self.ratings)

    @property
    def is_silent(self) -> bool:
        return self.masker_wav == SILENT

    @property
    def gamma(self) -> float:
        return math.log10(self.gain) if self.gain > 0 else 0.0


def validate_manifest(manifest: pd.DataFrame) -> List[ResponseRecord]:
    missing = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
    if missing:
        raise DataValidationError(f"Manifest is missing columns {missing}")
    if manifest.empty:
        raise DataValidationError("Manifest has no records")
    records = []
    for row in manifest.itertuples(index=False):
        ratings = getattr(row, 'ratings', None)
        if isinstance(ratings, float) and math.isnan(ratings):
            ratings = None
        records.append(ResponseRecord(
            scene_id=str(row.scene_id),
            soundscape_wav=str(row.soundscape_wav),
            masker_wav=str(row.masker_wav),
            gain=float(row.gain),
            label=float(row.label),
            fold=int(row.fold),
            ratings=tuple(int(r) for r in ratings) if ratings is not None else None,
        ))
    return records


def write_manifest(path: Union[str, Path], manifest: pd.DataFrame) -> Path:
    with atomic_path(path) as tmp:
        manifest.to_json(tmp, orient='records', lines=True, double_precision=15)
    return Path(path)


def read_manifest(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    manifest = pd.read_json(path, orient='records', lines=True, dtype={'scene_id': str})
    validate_manifest(manifest)
    return manifest


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """One masker class of the synthetic oracle, with the ambience template it brings.

    The oracle mean response is ``clip(a0 + a1*g + a2*g^2 + class_offset + scene_offset, -1, 1)``
    for log-gain ``g``; responses add ``N(0, noise_std^2)`` and are clipped again.
    """

    masker_class: str
    a0: float
    a1: float
    a2: float
    class_offset: float = 0.0
    noise_std: float = 0.1
    smr: float = 0.0
    ambience_color: str = 'pink'
    ambience_level: float = 65.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise DataValidationError(f"noise_std must be non-negative, got {self.noise_std}")
        if self.masker_class not in MASKER_SYNTHESIZERS and self.masker_class != 'silent':
            raise UsageError(f"Unknown masker class '{self.masker_class}'")
        if self.ambience_color not in COLOR_EXPONENTS:
            raise UsageError(f"Unknown ambience color '{self.ambience_color}'")

    @property
    def is_silent(self) -> bool:
        return self.masker_class == 'silent'

    def oracle_mean(self, gamma, scene_offset: float = 0.0):
        value = self.a0 + self.a1 * gamma + self.a2 * np.square(gamma) + self.class_offset + scene_offset
        return np.clip(value, -1.0, 1.0)

    def argmax_gamma(self) -> Optional[float]:
        if self.a2 < 0:
            return -self.a1 / (2.0 * self.a2)
        return None


def default_scene_specs(noise_std: float = 0.1) -> List[SyntheticSceneSpec]:
    """Inverted-U for bird and water maskers, decreasing for traffic and construction, flat for silence."""
    return [
        SyntheticSceneSpec('bird', a0=0.20, a1=-0.20, a2=-0.20, class_offset=0.10,
                           noise_std=noise_std, smr=-3.0, ambience_color='pink', ambience_level=62.0),
        SyntheticSceneSpec('water', a0=0.15, a1=-0.30, a2=-0.15, class_offset=0.05,
                           noise_std=noise_std, smr=0.0, ambience_color='white', ambience_level=66.0),
        SyntheticSceneSpec('traffic', a0=-0.20, a1=-0.25, a2=-0.02, class_offset=-0.05,
                           noise_std=noise_std, smr=3.0, ambience_color='brown', ambience_level=70.0),
        SyntheticSceneSpec('construction', a0=-0.30, a1=-0.30, a2=0.0, class_offset=-0.05,
                           noise_std=noise_std, smr=6.0, ambience_color='pink', ambience_level=72.0),
        SyntheticSceneSpec('silent', a0=0.0, a1=0.0, a2=0.0, class_offset=0.0,
                           noise_std=noise_std, smr=0.0, ambience_color='brown', ambience_level=58.0),
    ]


COLOR_EXPONENTS = {'white': 0.0, 'pink': 1.0, 'brown': 2.0}
COLOR_OFFSETS = {'white': -0.15, 'pink': 0.0, 'brown': 0.05}


def scene_offset(color: str, level: float) -> float:
    """Pleasantness shift of an ambience: louder and harsher scenes rate lower."""
    return COLOR_OFFSETS[color] - 0.02 * (level - 65.0)


def colored_noise(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n)
    freqs[0] = freqs[1]
    spectrum *= freqs ** (-exponent / 2.0)
    noise = np.fft.irfft(spectrum, n)
    return noise / np.sqrt(np.mean(noise ** 2))


def synthesize_ambience(color: str, level: float, n: int, sample_rate: int, rng: np.random.Generator) -> AudioClip:
    shared = colored_noise(n, COLOR_EXPONENTS[color], rng)
    left = 0.8 * shared + 0.6 * colored_noise(n, COLOR_EXPONENTS[color], rng)
    right = 0.8 * shared + 0.6 * colored_noise(n, COLOR_EXPONENTS[color], rng)
    target_rms = 20e-6 * 10.0 ** (level / 20.0) / SOUNDSCAPE_SPDR
    samples = np.stack([left, right])
    samples *= target_rms / np.sqrt(np.mean(samples ** 2))
    return AudioClip(samples, sample_rate)


def _bird(n, sr, rng):
    out = np.zeros(n)
    position = int(rng.uniform(0.0, 0.2) * sr)
    while position < n:
        dur = rng.uniform(0.05, 0.15)
        end = min(n, position + int(dur * sr))
        local = np.arange(end - position) / sr
        f0, f1 = rng.uniform(2500, 4000), rng.uniform(4500, 7000)
        out[position:end] += scipy.signal.chirp(local, f0=f0, t1=dur, f1=f1) * np.hanning(end - position)
        position = end + int(rng.uniform(0.05, 0.4) * sr)
    return out


def _water(n, sr, rng):
    sos = scipy.signal.butter(4, [400, 5000], btype='bandpass', fs=sr, output='sos')
    noise = scipy.signal.sosfilt(sos, rng.standard_normal(n))
    swell = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * np.arange(n) / sr)
    return noise * swell


def _traffic(n, sr, rng):
    sos = scipy.signal.butter(4, 300, btype='lowpass', fs=sr, output='sos')
    rumble = scipy.signal.sosfilt(sos, colored_noise(n, 2.0, rng))
    passby = 1.0 + 0.8 * np.sin(np.pi * np.arange(n) / n * rng.uniform(1.0, 3.0)) ** 2
    return rumble * passby


def _construction(n, sr, rng):
    out = np.zeros(n)
    decay = np.exp(-np.arange(int(0.08 * sr)) / (0.015 * sr))
    position = int(rng.uniform(0.0, 0.3) * sr)
    while position < n:
        burst = rng.standard_normal(decay.size) * decay
        end = min(n, position + burst.size)
        out[position:end] += burst[:end - position]
        position += int(rng.uniform(0.2, 0.5) * sr)
    return out


MASKER_SYNTHESIZERS = {
    'bird': _bird,
    'water': _water,
    'traffic': _traffic,
    'construction': _construction,
}


def synthesize_masker(masker_class: str, n: int, sample_rate: int, rng: np.random.Generator) -> AudioClip:
    if masker_class == 'silent':
        return AudioClip(np.zeros(n), sample_rate)
    raw = MASKER_SYNTHESIZERS[masker_class](n, sample_rate, rng)
    raw *= MASKER_RMS / max(np.sqrt(np.mean(raw ** 2)), 1e-12)
    return AudioClip(raw, sample_rate)


def make_folds(manifest: pd.DataFrame, k: int = N_FOLDS, seed: int = 0) -> pd.DataFrame:
    """Assign scene-disjoint folds; fold sizes differ by at most one scene."""
    if k < 2:
        raise UsageError(f"Need at least 2 folds, got {k}")
    scenes = sorted(manifest['scene_id'].astype(str).unique())
    if len(scenes) < k:
        raise DataValidationError(f"{len(scenes)} scenes cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(scenes))
    fold_of = {scenes[i]: rank % k for rank, i in enumerate(order)}
    annotated = manifest.copy()
    annotated['fold'] = annotated['scene_id'].astype(str).map(fold_of).astype(int)
    return annotated


def _gamma_stats(gammas: np.ndarray) -> GammaStats:
    if gammas.size < 2:
        raise DataValidationError(
            f"Need at least 2 non-silent training records to estimate gain statistics, got {gammas.size}"
        )
    return GammaStats(float(np.mean(gammas)), float(np.std(gammas)))


def compute_gamma_stats(manifest: pd.DataFrame, training_folds: Iterable[int]) -> GammaStats:
    """Mean and population std of log10 gain over non-silent records in ``training_folds``."""
    rows = manifest[manifest['fold'].isin(list(training_folds)) & (manifest['masker_wav'] != SILENT)]
    return _gamma_stats(np.log10(rows['gain'].to_numpy(dtype=np.float64)))


def generate_synthetic_dataset(
    specs: Sequence[SyntheticSceneSpec],
    n_scenes: int,
    seed: int,
    out_dir: Union[str, Path],
    records_per_scene: int = 20,
    maskers_per_class: int = 2,
    duration: float = 30.0,
    sample_rate: int = 44100,
    write_mixtures: bool = False,
) -> pd.DataFrame:
    """Synthesize ambiences, maskers and oracle responses; writes WAVs, lookup tables and ``manifest.jsonl``."""
    if n_scenes < 1:
        raise UsageError(f"n_scenes must be at least 1, got {n_scenes}")
    if not specs:
        raise UsageError("At least one SyntheticSceneSpec is needed")
    out_dir = Path(out_dir)
    n = int(round(duration * sample_rate))
    audio_rng, label_rng, choice_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))

    masker_paths: Dict[str, List[str]] = {}
    tables: Dict[str, GainLookupTable] = {}
    for spec in specs:
        if spec.is_silent or spec.masker_class in masker_paths:
            continue
        masker_paths[spec.masker_class] = []
        for variant in range(maskers_per_class):
            masker_id = f"{spec.masker_class}_{variant:02d}"
            clip = synthesize_masker(spec.masker_class, n, sample_rate, audio_rng)
            rel = f"maskers/{masker_id}.wav"
            write_wav(out_dir / rel, clip)
            masker_paths[spec.masker_class].append(rel)
            tables[masker_id] = synth_lookup_table(clip, reference_spdr=SOUNDSCAPE_SPDR, seed=seed, masker_id=masker_id)

    rows = []
    for scene_no in range(n_scenes):
        scene_id = f"scene_{scene_no:04d}"
        template = specs[choice_rng.integers(len(specs))]
        level = float(template.ambience_level + choice_rng.uniform(-5.0, 5.0))
        ambience = synthesize_ambience(template.ambience_color, level, n, sample_rate, audio_rng)
        soundscape_rel = f"soundscapes/{scene_id}.wav"
        write_wav(out_dir / soundscape_rel, ambience)
        offset = scene_offset(template.ambience_color, level)

        for record_no in range(records_per_scene):
            spec = specs[choice_rng.integers(len(specs))]
            gamma = float(choice_rng.uniform(*GAMMA_RANGE))
            noise = float(label_rng.normal(0.0, spec.noise_std)) if spec.noise_std > 0 else 0.0
            if spec.is_silent:
                masker_rel, gain = SILENT, 1.0
                mean = float(spec.oracle_mean(0.0, offset))
            else:
                masker_rel = masker_paths[spec.masker_class][choice_rng.integers(maskers_per_class)]
                gain = 10.0 ** gamma
                mean = float(spec.oracle_mean(gamma, offset))
            rows.append({
                'scene_id': scene_id,
                'soundscape_wav': soundscape_rel,
                'masker_wav': masker_rel,
                'gain': gain,
                'label': float(np.clip(mean + noise, -1.0, 1.0)),
                'fold': 0,
                'masker_class': spec.masker_class,
                'ambient_spl': level,
                'oracle_mean': mean,
            })
            if write_mixtures and record_no == 0 and not spec.is_silent:
                table = tables[Path(masker_rel).stem]
                mixture, _ = mix_at_smr(ambience, read_wav(out_dir / masker_rel), table,
                                        SceneMeta(scene_id, level), spec.smr)
                write_wav(out_dir / f"mixtures/{scene_id}_{spec.masker_class}.wav", mixture)

    manifest = pd.DataFrame(rows)
    if n_scenes >= 2:
        manifest = make_folds(manifest, min(N_FOLDS, n_scenes), seed)
    save_lookup_tables(out_dir / 'lookup_tables.jsonl', tables.values())
    write_manifest(out_dir / 'manifest.jsonl', manifest)
    atomic_write_text(out_dir / 'specs.json', json.dumps([asdict(s) for s in specs], indent=2))
    logger.info(f"Synthesized {len(manifest)} records over {n_scenes} scenes in {out_dir}")
    return manifest


@dataclass
class TrainingData:
    """A manifest resolved into spectrogram tables plus per-record index arrays.

    Row 0 of ``maskers`` is always the silent-track spectrogram.
    """

    soundscapes: np.ndarray
    maskers: np.ndarray
    soundscape_index: np.ndarray
    masker_index: np.ndarray
    gammas: np.ndarray
    silent: np.ndarray
    labels: np.ndarray
    folds: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def split(self, validation_fold: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
        indices = np.arange(len(self))
        if validation_fold is None:
            return indices, indices[:0]
        if not 0 <= validation_fold < N_FOLDS:
            raise UsageError(f"Fold {validation_fold} is not one of 0..{N_FOLDS - 1}")
        is_val = self.folds == validation_fold
        return indices[~is_val], indices[is_val]

    def gamma_stats(self, indices: np.ndarray) -> GammaStats:
        chosen = indices[~self.silent[indices]]
        return _gamma_stats(self.gammas[chosen].astype(np.float64))


def build_training_data(
    manifest: pd.DataFrame,
    manifest_dir: Union[str, Path],
    config: ModelConfig,
    max_workers: int = 4,
) -> TrainingData:
    """Load every distinct WAV once and compute its log-mel spectrogram."""
    records = validate_manifest(manifest)
    manifest_dir = Path(manifest_dir)
    kwargs = config.spectrogram_kwargs()

    soundscape_files = sorted({r.soundscape_wav for r in records})
    masker_files = sorted({r.masker_wav for r in records if not r.is_silent})

    def spectrogram_of(rel: str, expected) -> np.ndarray:
        spec = log_mel_spectrogram(read_wav(manifest_dir / rel), **kwargs)
        if spec.shape != expected:
            raise ShapeError(f"{rel}: spectrogram shape {spec.shape} does not match the model's {expected}")
        return spec.values.astype(np.float32)

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        soundscapes = list(executor.map(lambda p: spectrogram_of(p, config.soundscape_shape), soundscape_files))
        maskers = list(executor.map(lambda p: spectrogram_of(p, config.masker_shape), masker_files))

    silent = Spectrogram.silent(config.time_frames, config.mel_bins).values.astype(np.float32)
    soundscape_row = {p: i for i, p in enumerate(soundscape_files)}
    masker_row = {p: i + 1 for i, p in enumerate(masker_files)}
    masker_row[SILENT] = 0

    return TrainingData(
        soundscapes=np.stack(soundscapes),
        maskers=np.stack([silent] + maskers),
        soundscape_index=np.array([soundscape_row[r.soundscape_wav] for r in records]),
        masker_index=np.array([masker_row[r.masker_wav] for r in records]),
        gammas=np.array([r.gamma for r in records], dtype=np.float32),
        silent=np.array([r.is_silent for r in records]),
        labels=np.array([r.label for r in records], dtype=np.float32),
        folds=np.array([r.fold for r in records]),
    )
