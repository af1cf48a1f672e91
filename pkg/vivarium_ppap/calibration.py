"""
Digital-gain bookkeeping for maskers.

A lookup table maps an integer playback level (46-83 dBA) to the digital gain
that plays a masker at that level; fractional levels are interpolated from the
nearest integer entry. SPDR (SPL-to-digital level ratio) normalization brings
maskers with a known recording chain onto the soundscape recorder's scale.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Union

import numpy as np

from vivarium_ppap.dsp import AudioClip
from vivarium_ppap.errors import DataValidationError, OutOfRangeError
from vivarium_ppap.utils.atomic import atomic_write_text

logger = logging.getLogger(__name__)

SPL_MIN = 46
SPL_MAX = 83
REFERENCE_PRESSURE = 20e-6  # Pa
SCENE_SPL_BOUNDS = (20.0, 120.0)
STANDARD_SMRS = (-6.0, -3.0, 0.0, 3.0, 6.0)


def round_half_away(value: float) -> int:
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


@dataclass(frozen=True)
class GainLookupTable:
    """Calibrated gain ``cg[lambda]`` for every integer level from 46 to 83 dBA."""

    masker_id: str
    entries: Mapping[int, float]

    def __post_init__(self):
        entries = {int(k): float(v) for k, v in self.entries.items()}
        expected = list(range(SPL_MIN, SPL_MAX + 1))
        if sorted(entries) != expected:
            missing = sorted(set(expected) - set(entries))
            extra = sorted(set(entries) - set(expected))
            raise DataValidationError(
                f"Lookup table for '{self.masker_id}' must cover {SPL_MIN}..{SPL_MAX} dBA exactly "
                f"(missing {missing}, unexpected {extra})"
            )
        gains = [entries[k] for k in expected]
        if not all(g > 0 and math.isfinite(g) for g in gains):
            raise DataValidationError(f"Lookup table for '{self.masker_id}' has non-positive gains")
        if any(b < a for a, b in zip(gains, gains[1:])):
            raise DataValidationError(f"Lookup table for '{self.masker_id}' is not non-decreasing in level")
        object.__setattr__(self, 'entries', entries)

    def __getitem__(self, level: int) -> float:
        return self.entries[level]

    def to_record(self) -> dict:
        return {'masker_id': self.masker_id, 'gains': {str(k): v for k, v in sorted(self.entries.items())}}

    @classmethod
    def from_record(cls, record: dict) -> 'GainLookupTable':
        if set(record) != {'masker_id', 'gains'}:
            raise DataValidationError(f"Lookup-table record needs exactly masker_id and gains, got {sorted(record)}")
        gains = record['gains']
        bad_keys = [k for k in gains if not (isinstance(k, str) and k.isdigit())]
        if bad_keys:
            raise DataValidationError(f"Lookup-table keys must be integer strings, got {bad_keys}")
        return cls(str(record['masker_id']), {int(k): float(v) for k, v in gains.items()})


@dataclass(frozen=True)
class CalibrationProfile:
    """``d0`` of the soundscape recorder plus the known ``d_j`` of some maskers."""

    d0: float
    masker_spdr: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.d0 > 0:
            raise DataValidationError(f"d0 must be positive, got {self.d0}")
        for masker_id, d in self.masker_spdr.items():
            if not d > 0:
                raise DataValidationError(f"SPDR for masker '{masker_id}' must be positive, got {d}")


@dataclass(frozen=True)
class SceneMeta:
    scene_id: str
    ambient_spl: float  # in-situ LAeq of the unaugmented soundscape, dBA

    def __post_init__(self):
        lo, hi = SCENE_SPL_BOUNDS
        if not lo <= self.ambient_spl <= hi:
            raise DataValidationError(
                f"Scene '{self.scene_id}' level {self.ambient_spl} dBA is outside the {lo}-{hi} dBA sanity range"
            )


def interpolate_gain(table: GainLookupTable, level: float) -> float:
    """Gain that plays the masker at ``level`` dBA: ``cg[round(l)] * 10**((l - round(l)) / 20)``."""
    nearest = round_half_away(level)
    if not SPL_MIN <= nearest <= SPL_MAX:
        raise OutOfRangeError(
            f"{level:.2f} dBA rounds to {nearest}, outside the calibrated {SPL_MIN}-{SPL_MAX} dBA range "
            f"of masker '{table.masker_id}'"
        )
    return table[nearest] * 10.0 ** ((level - nearest) / 20.0)


def smr_to_gain(table: GainLookupTable, scene: SceneMeta, smr: float) -> float:
    """Gain for playing the masker ``smr`` dBA relative to the scene's ambient level."""
    return interpolate_gain(table, scene.ambient_spl + smr)


def normalize_spdr(masker: AudioClip, profile: CalibrationProfile, masker_id: str) -> AudioClip:
    """Rescale a masker by ``d0 / d_j`` onto the soundscape recorder's scale."""
    if masker_id not in profile.masker_spdr:
        raise DataValidationError(
            f"No SPDR recorded for masker '{masker_id}'; calibrate it with a gain lookup table "
            f"and use interpolate_gain instead"
        )
    factor = profile.d0 / profile.masker_spdr[masker_id]
    scaled, n_clipped = masker.scaled(factor).clipped()
    if n_clipped:
        logger.warning(f"SPDR normalization of '{masker_id}' by {factor:.4g} clipped {n_clipped} samples")
    return scaled


def synth_lookup_table(
    masker: AudioClip,
    reference_spdr: float,
    seed: int = 0,
    masker_id: str = 'masker',
    jitter_db: float = 0.0,
) -> GainLookupTable:
    """Lookup table from a simulated playback chain instead of a dummy-head measurement.

    At gain ``g`` the clip plays at ``20 * log10(g * rms * reference_spdr / p_ref)`` dB,
    so ``cg[lambda] = p_ref * 10**(lambda / 20) / (rms * reference_spdr)``. Optional
    ``jitter_db`` adds seeded measurement noise; the table is kept monotone.
    """
    if not reference_spdr > 0:
        raise DataValidationError(f"reference_spdr must be positive, got {reference_spdr}")
    rms = masker.rms()
    if rms <= 0.0:
        raise DataValidationError(f"Masker '{masker_id}' is silent; a silent track has no gain table")
    levels = np.arange(SPL_MIN, SPL_MAX + 1, dtype=np.float64)
    if jitter_db:
        levels = levels + np.random.default_rng(seed).normal(0.0, jitter_db, size=levels.shape)
    gains = REFERENCE_PRESSURE * 10.0 ** (levels / 20.0) / (rms * reference_spdr)
    gains = np.maximum.accumulate(gains)
    return GainLookupTable(masker_id, dict(zip(range(SPL_MIN, SPL_MAX + 1), gains.tolist())))


def save_lookup_tables(path: Union[str, Path], tables: Iterable[GainLookupTable]) -> Path:
    """One JSON record per masker per line."""
    lines = [json.dumps(t.to_record(), sort_keys=True) for t in tables]
    return atomic_write_text(path, '\n'.join(lines) + '\n')


def load_lookup_tables(path: Union[str, Path]) -> Dict[str, GainLookupTable]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Lookup-table file not found: {path}")
    tables: Dict[str, GainLookupTable] = {}
    for line_no, line in enumerate(path.read_text(encoding='utf-8').splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataValidationError(f"{path}:{line_no}: invalid JSON ({e})") from e
        table = GainLookupTable.from_record(record)
        if table.masker_id in tables:
            raise DataValidationError(f"{path}:{line_no}: duplicate masker '{table.masker_id}'")
        tables[table.masker_id] = table
    return tables


def standard_smr_gains(table: GainLookupTable, scene: SceneMeta, smrs: List[float] = STANDARD_SMRS) -> Dict[float, float]:
    return {smr: smr_to_gain(table, scene, smr) for smr in smrs}
