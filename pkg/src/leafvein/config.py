"""Run configuration: defaults <- YAML/JSON file <- command-line flags."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError
from .models import CONFIG_FACTORIES
from .preprocess import MAGNITUDE_MODES, VenationConfig

DATA_ROOT_ENV = "VENATION_DATA_ROOT"
MODEL_CHOICES = tuple(CONFIG_FACTORIES) + ("all",)
INPUT_MODES = ("raw_rgb", "venation")


@dataclass
class RunConfig:
    dataset_root: Optional[str] = None
    output_dir: str = "runs/default"
    model: str = "all"
    input_mode: str = "raw_rgb"
    seed: int = 42
    test_fraction: float = 0.2
    median_kernel: int = 3
    magnitude_mode: str = "euclidean"
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    learning_rate: Optional[float] = None
    pretrained: bool = True
    parallel: bool = False
    svg: bool = False

    @property
    def model_ids(self) -> list[str]:
        return list(CONFIG_FACTORIES) if self.model == "all" else [self.model]

    @property
    def venation(self) -> VenationConfig:
        return VenationConfig(self.median_kernel, self.magnitude_mode)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def validate(self) -> "RunConfig":
        if self.model not in MODEL_CHOICES:
            raise ConfigError(f"model must be one of {MODEL_CHOICES}, got {self.model!r}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if not 0.0 < float(self.test_fraction) < 1.0:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.magnitude_mode not in MAGNITUDE_MODES:
            raise ConfigError(f"magnitude_mode must be one of {MAGNITUDE_MODES}")
        self.venation  # raises on a bad kernel
        if self.epochs is not None and int(self.epochs) < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate is not None and float(self.learning_rate) <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    if value is None:
        return None
    kind = _TYPES[key]
    try:
        if "bool" in kind:
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if "int" in kind:
            return int(value)
        if "float" in kind:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {kind}") from None


def load_config(path=None, overrides: Optional[dict] = None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a key/value document")
        unknown = set(data) - set(_TYPES)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        values.update(data)
    for k, v in (overrides or {}).items():
        if k in _TYPES and v is not None:
            values[k] = v
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    if cfg.dataset_root is None and env.get(DATA_ROOT_ENV):
        cfg.dataset_root = env[DATA_ROOT_ENV]
    return cfg.validate()
