"""
Run configuration for training and query runs.

Config files are plain JSON. A ``RunConfig`` is built from a file (optional)
and then overridden by explicit values, so command-line flags always win.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from vivarium_ppap.errors import UsageError
from vivarium_ppap.model import ModelConfig
from vivarium_ppap.utils.atomic import atomic_write_text

logger = logging.getLogger(__name__)

SEEDED_COMMANDS = {'synth', 'train'}
WEIGHTS_COMMANDS = {'precompute', 'infer', 'sweep', 'bench'}


@dataclass
class RunConfig:
    """Everything one command needs besides its positional inputs."""

    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 5e-5
    max_epochs: int = 100
    batch_size: int = 32
    seed: Optional[int] = None
    fold: Optional[int] = None
    replicates: int = 1
    manifest: Optional[str] = None
    weights: Optional[str] = None
    cache: Optional[str] = None
    output_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.lr <= 0:
            raise UsageError(f"lr must be positive, got {self.lr}")
        if self.max_epochs < 1:
            raise UsageError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.replicates < 1:
            raise UsageError(f"replicates must be at least 1, got {self.replicates}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['model'] = self.model.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"Unknown run config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_sources(cls, config_file: Optional[Union[str, Path]] = None, **overrides) -> 'RunConfig':
        """File values first, then every override that is not None."""
        data = load_config_file(config_file) if config_file else {}
        model_overrides = overrides.pop('model_overrides', None) or {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        model = data.get('model', {})
        if isinstance(model, ModelConfig):
            model = model.to_dict()
        model.update({k: v for k, v in model_overrides.items() if v is not None})
        data['model'] = model
        return cls.from_dict(data)

    def validate(self, command: str):
        """Check paths and required settings before any compute starts."""
        if command in SEEDED_COMMANDS and self.seed is None:
            raise UsageError(f"`{command}` needs an explicit seed")
        if command == 'train':
            if not self.manifest:
                raise UsageError("`train` needs a manifest path")
            if not Path(self.manifest).exists():
                raise FileNotFoundError(f"Manifest not found: {self.manifest}")
            if self.fold is not None and not 0 <= self.fold < 5:
                raise UsageError(f"fold must be one of 0..4, got {self.fold}")
        if command in WEIGHTS_COMMANDS:
            if not self.weights:
                raise UsageError(f"`{command}` needs a weight file")
            if not Path(self.weights).exists():
                raise FileNotFoundError(f"Weight file not found: {self.weights}")
        if command in {'infer', 'sweep'} and self.cache and not Path(self.cache).exists():
            raise FileNotFoundError(f"Masker cache not found: {self.cache}; run `ppap precompute` first")


def create_ppap_config(
    manifest_path: Union[str, Path],
    output_base_dir: Optional[Union[str, Path]] = None,
    replicates: int = 1,
    **model_overrides,
) -> Dict[str, Any]:
    """
    Create a parameter dictionary for PPAPTrainingProcess.

    Args:
        manifest_path: Path to the dataset manifest (JSON lines)
        output_base_dir: Directory for run outputs (optional)
        replicates: Number of seeded training replicates per run
        **model_overrides: ModelConfig fields to change, e.g. ``attention='aa'``

    Returns:
        Dictionary that can be passed to PPAPTrainingProcess

    Example:
        >>> config = create_ppap_config("synth/manifest.jsonl", replicates=3, attention="mha4")
        >>> process = PPAPTrainingProcess(config)
    """
    config = {
        'manifest_path': str(Path(manifest_path)),
        'replicates': replicates,
    }
    if model_overrides:
        config['model'] = ModelConfig(**model_overrides).to_dict()
    if output_base_dir:
        config['output_base_dir'] = str(Path(output_base_dir))
    return config


def create_vivarium_experiment_state(run_parameters: Dict[str, Any]) -> Dict[str, Any]:
    """Initial state for an Engine wrapping one PPAP process under ``inputs``/``outputs``."""
    return {
        'inputs': run_parameters,
        'outputs': {},
    }


def save_config_file(config: Dict[str, Any], filepath: Union[str, Path] = "ppap_config.json") -> Path:
    path = atomic_write_text(filepath, json.dumps(config, indent=2, sort_keys=True))
    logger.info(f"Configuration saved to {filepath}")
    return path


def load_config_file(filepath: Union[str, Path] = "ppap_config.json") -> Dict[str, Any]:
    filepath = Path(filepath)
    if not filepath.exists():
        raise FileNotFoundError(f"Config file not found: {filepath}")
    try:
        return json.loads(filepath.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise UsageError(f"Config file {filepath} is not valid JSON: {e}") from e
