"""
Masker-gain query scheduling.

For one soundscape and a plan of ``eta_m`` maskers by ``eta_g`` gains:

- ``query_naive`` runs the whole network per pair: f_s, f_m and the head each
  ``eta_g * eta_m`` times.
- ``query_optimized`` runs f_s once, f_m once per masker (never when a
  MaskerBank is supplied, the silent track included) and the f_g/f_a/f_o
  head once per pair.

Both return the same grid within 1e-6. Stage wall times are accumulated so
``benchmark_schedules`` can compare measured totals against the sum of stages.
"""

import hashlib
import json
import logging
import statistics
import struct
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from vivarium_ppap.dsp import Spectrogram
from vivarium_ppap.errors import DataValidationError, NumericalError, ShapeError, StaleCacheError, UsageError
from vivarium_ppap.model import ModelConfig, PPAPModel, weights_digest
from vivarium_ppap.utils.atomic import atomic_write_bytes

logger = logging.getLogger(__name__)

CACHE_MAGIC = b'PPAPC1'
SILENT_ID = 'SILENT'
SWEEP_COLUMNS = ['masker_id', 'gamma', 'mu', 'sigma']


def _require_eval(model: PPAPModel):
    if model.training:
        raise UsageError("Queries need an eval-mode model; call model.eval() first")


@dataclass
class MaskerBank:
    """Precomputed query embeddings keyed by masker id, tied to one set of weights.

    The silent-track embedding is stored under ``SILENT_ID`` but is not listed
    among the candidate ``masker_ids``.
    """

    entries: Dict[str, np.ndarray]
    weight_hash: str
    spectrogram_hash: str

    def __contains__(self, masker_id: str) -> bool:
        return masker_id in self.entries

    def __len__(self) -> int:
        return len(self.masker_ids)

    @property
    def masker_ids(self) -> List[str]:
        return [m for m in self.entries if m != SILENT_ID]

    def embedding(self, masker_id: str) -> np.ndarray:
        if masker_id not in self.entries:
            raise DataValidationError(
                f"Masker '{masker_id}' is not in the cache; available: {', '.join(sorted(self.masker_ids))}"
            )
        return self.entries[masker_id]

    def check_model(self, model: PPAPModel):
        digest = weights_digest(model)
        if digest != self.weight_hash:
            raise StaleCacheError(
                f"Masker cache was built for weights {self.weight_hash[:12]}, the model is {digest[:12]}; "
                f"re-run `ppap precompute` with these weights"
            )


@dataclass(frozen=True)
class QueryPlan:
    masker_ids: Tuple[str, ...]
    gammas: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'masker_ids', tuple(self.masker_ids))
        object.__setattr__(self, 'gammas', tuple(float(g) for g in self.gammas))
        if not self.masker_ids:
            raise UsageError("A query plan needs at least one masker")
        if not self.gammas:
            raise UsageError("A query plan needs at least one gain")
        if not all(np.isfinite(self.gammas)):
            raise DataValidationError("Query gains must be finite log-gains")
        if len(set(self.masker_ids)) != len(self.masker_ids):
            raise DataValidationError("A query plan lists a masker more than once")

    @property
    def eta_m(self) -> int:
        return len(self.masker_ids)

    @property
    def eta_g(self) -> int:
        return len(self.gammas)

    @classmethod
    def from_range(cls, masker_ids: Sequence[str], lo: float, hi: float, count: int) -> 'QueryPlan':
        if count < 1:
            raise UsageError(f"Gain count must be at least 1, got {count}")
        gammas = np.linspace(lo, hi, count) if count > 1 else np.array([lo])
        return cls(tuple(masker_ids), tuple(gammas.tolist()))


@dataclass
class QueryResult:
    """Predictions on the (masker, gamma) grid with stage call counts and wall times."""

    plan: QueryPlan
    mu: np.ndarray
    log_sigma: np.ndarray
    schedule: str
    calls: Counter = field(default_factory=Counter)
    times: Dict[str, float] = field(default_factory=lambda: {'f_s': 0.0, 'f_m': 0.0, 'gao': 0.0})
    total_time: float = 0.0

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def call_counts(self) -> Tuple[int, int, int]:
        return self.calls['f_s'], self.calls['f_m'], self.calls['gao']

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, masker_id in enumerate(self.plan.masker_ids):
            for j, gamma in enumerate(self.plan.gammas):
                rows.append({
                    'masker_id': masker_id,
                    'gamma': gamma,
                    'mu': float(self.mu[i, j]),
                    'sigma': float(self.sigma[i, j]),
                })
        return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


@contextmanager
def _stage(result: QueryResult, name: str, calls: int = 1):
    start = time.perf_counter()
    yield
    result.times[name] += time.perf_counter() - start
    result.calls[name] += calls


def spectrogram_digest(spectrograms: Iterable[Tuple[str, Spectrogram]]) -> str:
    sha = hashlib.sha256()
    for masker_id, spec in spectrograms:
        sha.update(masker_id.encode('utf-8'))
        sha.update(np.ascontiguousarray(spec.values, dtype='<f4').tobytes())
    return sha.hexdigest()


def precompute_bank(maskers: Sequence[Tuple[str, Spectrogram]], model: PPAPModel) -> MaskerBank:
    """Embed every masker, and the silent track, once with f_m."""
    _require_eval(model)
    maskers = list(maskers)
    seen = set()
    for masker_id, _ in maskers:
        if masker_id == SILENT_ID:
            raise DataValidationError(f"'{SILENT_ID}' is reserved for the silent track; rename that masker")
        if masker_id in seen:
            raise DataValidationError(f"Masker id '{masker_id}' appears twice")
        seen.add(masker_id)
    silent = Spectrogram.silent(model.config.time_frames, model.config.mel_bins)
    entries = {}
    with torch.no_grad():
        for masker_id, spec in maskers + [(SILENT_ID, silent)]:
            entries[masker_id] = model.extract_masker_features(spec).cpu().numpy().astype(np.float32)
    return MaskerBank(entries, weights_digest(model), spectrogram_digest(maskers))


def save_bank(path: Union[str, Path], bank: MaskerBank) -> Path:
    """Write a ``PPAPC1`` feature cache."""
    shapes = {e.shape for e in bank.entries.values()}
    if len(shapes) > 1:
        raise ShapeError(f"Bank embeddings disagree in shape: {sorted(shapes)}")
    n, d = shapes.pop() if shapes else (0, 0)
    header = json.dumps({
        'weight_hash': bank.weight_hash,
        'spectrogram_hash': bank.spectrogram_hash,
        'n': n,
        'd': d,
        'count': len(bank.entries),
    }, sort_keys=True).encode('utf-8')
    chunks = [CACHE_MAGIC, struct.pack('<I', len(header)), header]
    for masker_id, embedding in bank.entries.items():
        raw_id = masker_id.encode('utf-8')
        chunks.append(struct.pack('<H', len(raw_id)))
        chunks.append(raw_id)
        chunks.append(np.ascontiguousarray(embedding, dtype='<f4').tobytes())
    return atomic_write_bytes(path, b''.join(chunks))


def load_bank(path: Union[str, Path], model: Optional[PPAPModel] = None) -> MaskerBank:
    """Read a ``PPAPC1`` cache; with ``model`` given, a weight-hash mismatch raises StaleCacheError."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Masker cache not found: {path}; run `ppap precompute` first")
    payload = path.read_bytes()
    if not payload.startswith(CACHE_MAGIC):
        raise DataValidationError(f"{path} is not a masker cache (bad magic)")
    offset = len(CACHE_MAGIC)
    (header_len,) = struct.unpack_from('<I', payload, offset)
    offset += 4
    header = json.loads(payload[offset:offset + header_len].decode('utf-8'))
    offset += header_len

    n, d = header['n'], header['d']
    entries = {}
    for _ in range(header['count']):
        (id_len,) = struct.unpack_from('<H', payload, offset)
        offset += 2
        masker_id = payload[offset:offset + id_len].decode('utf-8')
        offset += id_len
        embedding = np.frombuffer(payload, dtype='<f4', count=n * d, offset=offset).reshape(n, d)
        offset += 4 * n * d
        entries[masker_id] = embedding.astype(np.float32)
    if offset != len(payload):
        raise DataValidationError(f"{path}: {len(payload) - offset} trailing bytes after the last masker")

    bank = MaskerBank(entries, header['weight_hash'], header['spectrogram_hash'])
    if model is not None:
        bank.check_model(model)
    return bank


def _masker_spectrogram(maskers: Optional[Mapping[str, Spectrogram]], masker_id: str, config: ModelConfig):
    if masker_id == SILENT_ID:
        return Spectrogram.silent(config.time_frames, config.mel_bins)
    if maskers is None or masker_id not in maskers:
        available = sorted(maskers) if maskers else []
        raise DataValidationError(f"No spectrogram for masker '{masker_id}'; available: {available}")
    return maskers[masker_id]


def query_naive(
    model: PPAPModel,
    soundscape: Spectrogram,
    plan: QueryPlan,
    maskers: Mapping[str, Spectrogram],
) -> QueryResult:
    """Full forward pass per (masker, gamma) pair."""
    _require_eval(model)
    result = QueryResult(plan, np.zeros((plan.eta_m, plan.eta_g)), np.zeros((plan.eta_m, plan.eta_g)), 'naive')
    start = time.perf_counter()
    with torch.no_grad():
        for i, masker_id in enumerate(plan.masker_ids):
            masker = _masker_spectrogram(maskers, masker_id, model.config)
            for j, gamma in enumerate(plan.gammas):
                with _stage(result, 'f_s'):
                    k = model.extract_soundscape_features(soundscape)
                with _stage(result, 'f_m'):
                    q = model.extract_masker_features(masker)
                with _stage(result, 'gao'):
                    pred = model.predict_from_embeddings(k, q, gamma)
                result.mu[i, j] = float(pred.mu)
                result.log_sigma[i, j] = float(pred.log_sigma)
    result.total_time = time.perf_counter() - start
    return result


def query_optimized(
    model: PPAPModel,
    soundscape: Spectrogram,
    plan: QueryPlan,
    maskers: Optional[Mapping[str, Spectrogram]] = None,
    bank: Optional[MaskerBank] = None,
) -> QueryResult:
    """Scheduled query: one f_s, cached or once-per-masker f_m, batched heads per masker."""
    _require_eval(model)
    if bank is not None:
        bank.check_model(model)
    result = QueryResult(plan, np.zeros((plan.eta_m, plan.eta_g)), np.zeros((plan.eta_m, plan.eta_g)), 'optimized')
    gammas = torch.tensor(plan.gammas, dtype=next(model.parameters()).dtype)
    start = time.perf_counter()
    with torch.no_grad():
        with _stage(result, 'f_s'):
            k = model.extract_soundscape_features(soundscape)
        for i, masker_id in enumerate(plan.masker_ids):
            if bank is not None and (masker_id in bank or masker_id != SILENT_ID):
                q = torch.as_tensor(bank.embedding(masker_id), dtype=k.dtype)
            else:
                with _stage(result, 'f_m'):
                    q = model.extract_masker_features(_masker_spectrogram(maskers, masker_id, model.config))
            with _stage(result, 'gao', calls=plan.eta_g):
                pred = model.predict_from_embeddings(
                    k.expand((plan.eta_g,) + tuple(k.shape)),
                    q.expand((plan.eta_g,) + tuple(q.shape)),
                    gammas,
                )
            result.mu[i] = pred.mu.cpu().numpy()
            result.log_sigma[i] = pred.log_sigma.cpu().numpy()
    result.total_time = time.perf_counter() - start
    if bank is not None:
        result.schedule = 'cached'
    return result


@dataclass(frozen=True)
class RankedPair:
    masker_id: str
    gamma: float
    mu: float
    sigma: float

    @property
    def gain(self) -> float:
        return 10.0 ** self.gamma

    def to_dict(self) -> dict:
        return {'masker_id': self.masker_id, 'gain': self.gain, 'gamma': self.gamma, 'mu': self.mu, 'sigma': self.sigma}


def rank(result: QueryResult, k: int) -> List[RankedPair]:
    """Top-k cells by mu; ties go to smaller sigma, then masker id, then smaller gain."""
    if k < 1:
        raise UsageError(f"k must be at least 1, got {k}")
    sigma = result.sigma
    cells = [
        RankedPair(masker_id, gamma, float(result.mu[i, j]), float(sigma[i, j]))
        for i, masker_id in enumerate(result.plan.masker_ids)
        for j, gamma in enumerate(result.plan.gammas)
    ]
    cells.sort(key=lambda c: (-c.mu, c.sigma, c.masker_id, c.gamma))
    if k > len(cells):
        logger.warning(f"Requested top {k} of a {len(cells)}-cell grid; returning the full ranking")
    return cells[:k]


def gain_sweep(
    model: PPAPModel,
    soundscape: Spectrogram,
    masker_id: str,
    bank: Optional[MaskerBank],
    gamma_range: Tuple[float, float] = (-2.0, 2.0),
    count: int = 256,
) -> pd.DataFrame:
    """Evenly spaced gamma sweep, endpoints included, as a ``masker_id,gamma,mu,sigma`` frame."""
    if count < 2:
        raise UsageError(f"A sweep needs at least 2 points, got {count}")
    if masker_id != SILENT_ID and (bank is None or masker_id not in bank):
        available = ', '.join(sorted(bank.masker_ids)) if bank is not None else 'none'
        raise DataValidationError(f"Masker '{masker_id}' is not in the cache; available: {available}")
    plan = QueryPlan.from_range([masker_id], gamma_range[0], gamma_range[1], count)
    return query_optimized(model, soundscape, plan, bank=bank).to_frame()


def random_spectrograms(config: ModelConfig, count: int, channels: int, seed: int) -> List[Spectrogram]:
    """Log-mel-like random inputs for timing runs."""
    rng = np.random.default_rng(seed)
    shape = (config.time_frames, config.mel_bins, channels)
    return [Spectrogram(rng.normal(-5.0, 3.0, size=shape).astype(np.float32)) for _ in range(count)]


@dataclass
class BenchReport:
    eta_m: int
    eta_g: int
    repeats: int
    calls: Dict[str, Tuple[int, int, int]]
    stage_times: Dict[str, float]
    totals: Dict[str, float]

    @property
    def speedup(self) -> Dict[str, float]:
        naive = self.totals['naive']
        return {name: naive / max(t, 1e-12) for name, t in self.totals.items() if name != 'naive'}

    @property
    def cached_ratio(self) -> float:
        return self.totals['cached'] / max(self.totals['naive'], 1e-12)

    @property
    def additivity_ratio(self) -> float:
        """Sum of per-stage times over the measured end-to-end optimized total."""
        predicted = self.stage_times['tau_s'] + self.eta_m * self.stage_times['tau_m'] \
            + self.eta_m * self.eta_g * self.stage_times['tau_gao']
        return predicted / max(self.totals['optimized'], 1e-12)

    def to_dict(self) -> dict:
        return {
            'eta_m': self.eta_m,
            'eta_g': self.eta_g,
            'repeats': self.repeats,
            'calls': {k: list(v) for k, v in self.calls.items()},
            'stage_times': self.stage_times,
            'totals': self.totals,
            'speedup': self.speedup,
            'cached_ratio': self.cached_ratio,
            'additivity_ratio': self.additivity_ratio,
        }


def expected_calls(schedule: str, eta_m: int, eta_g: int) -> Tuple[int, int, int]:
    pairs = eta_m * eta_g
    return {
        'naive': (pairs, pairs, pairs),
        'optimized': (1, eta_m, pairs),
        'cached': (1, 0, pairs),
    }[schedule]


def benchmark_schedules(model: PPAPModel, eta_m: int, eta_g: int, repeats: int = 3, seed: int = 0) -> BenchReport:
    """Median-of-repeats wall times for the naive, optimized and cached schedules."""
    if eta_m < 1 or eta_g < 1:
        raise UsageError(f"eta_m and eta_g must be at least 1, got {eta_m} and {eta_g}")
    if repeats < 1:
        raise UsageError(f"repeats must be at least 1, got {repeats}")
    _require_eval(model)
    config = model.config
    soundscape = random_spectrograms(config, 1, config.soundscape_channels, seed)[0]
    masker_specs = random_spectrograms(config, eta_m, 1, seed + 1)
    maskers = {f"masker_{i:03d}": spec for i, spec in enumerate(masker_specs)}
    plan = QueryPlan.from_range(list(maskers), -2.0, 2.0, eta_g)
    bank = precompute_bank(list(maskers.items()), model)

    runs = {
        'naive': lambda: query_naive(model, soundscape, plan, maskers),
        'optimized': lambda: query_optimized(model, soundscape, plan, maskers),
        'cached': lambda: query_optimized(model, soundscape, plan, bank=bank),
    }
    totals, calls, per_stage = {}, {}, {'f_s': [], 'f_m': [], 'gao': []}
    for name, run in runs.items():
        durations = []
        for _ in range(repeats):
            result = run()
            durations.append(result.total_time)
            if name == 'optimized':
                per_stage['f_s'].append(result.times['f_s'] / result.calls['f_s'])
                per_stage['f_m'].append(result.times['f_m'] / result.calls['f_m'])
                per_stage['gao'].append(result.times['gao'] / result.calls['gao'])
        expected = expected_calls(name, eta_m, eta_g)
        if result.call_counts != expected:
            raise NumericalError(f"{name} schedule made {result.call_counts} stage calls, expected {expected}")
        calls[name] = result.call_counts
        totals[name] = statistics.median(durations)
        logger.info(f"{name}: median {totals[name]:.4f}s over {repeats} repeat(s), calls {result.call_counts}")

    stage_times = {
        'tau_s': statistics.median(per_stage['f_s']),
        'tau_m': statistics.median(per_stage['f_m']),
        'tau_gao': statistics.median(per_stage['gao']),
    }
    return BenchReport(eta_m, eta_g, repeats, calls, stage_times, totals)
