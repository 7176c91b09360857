"""Run configuration: defaults, JSON loading and dotted-path overrides.

A run is described by one JSON document.  Missing fields take the defaults
below, unknown fields are rejected, and command-line flags override single
fields through dotted paths (``train.lr=0.0005``).  The resolved config is
written into every manifest the CLI produces.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

CONFIG_ENV = "LUNGSEG_CONFIG"


@dataclass
class PathsConfig:
    raw: str = "data/raw"  # NIfTI root with ct/, lung/ and infection/ (or the dataset's own folder names)
    output_dir: str = "runs"  # timestamped run directories are created here


@dataclass
class DataConfig:
    hu_window: List[float] = field(default_factory=lambda: [-1000.0, 400.0])
    k: int = 5
    val_fraction: float = 0.12


@dataclass
class ModelConfig:
    widths: List[int] = field(default_factory=lambda: [32, 64, 128, 256])
    bottleneck: int = 512
    ratio: int = 4
    filters: int = 4
    spatial_kernel: int = 7


@dataclass
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 100
    patience: Optional[int] = 10
    max_steps: Optional[int] = None
    lambda_lung: float = 0.5
    runs_per_fold: int = 3


@dataclass
class GanSection:
    depth: int = 6
    base_width: int = 16
    disc_width: int = 16
    disc_layers: int = 3
    lambda_l1: float = 100.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 4
    epochs: int = 100
    max_steps: Optional[int] = None


@dataclass
class AugmentConfig:
    n_classic: int = 300
    n_gan: int = 300


@dataclass
class PostprocessConfig:
    bin_thresh: float = 0.5
    area_thresh: int = 30
    per_component: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    fold: int = 0
    threads: int = 1
    precision: str = "float32"
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    gan: GanSection = field(default_factory=GanSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> "RunConfig":
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if not 0 <= self.fold < self.data.k:
            raise ValueError(f"fold {self.fold} outside 0..{self.data.k - 1}")
        if self.train.runs_per_fold < 1:
            raise ValueError("train.runs_per_fold must be >= 1")
        lo, hi = self.data.hu_window
        if lo >= hi:
            raise ValueError(f"degenerate intensity window ({lo}, {hi})")
        return self


def _merge(obj, raw: Dict[str, Any], where: str) -> None:
    known = {f.name: f for f in fields(obj)}
    for key, value in raw.items():
        path = f"{where}{key}"
        if key not in known:
            raise ValueError(f"unknown config field {path!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ValueError(f"config field {path!r} must be an object")
            _merge(current, value, path + ".")
        else:
            setattr(obj, key, _coerce(current, value, path))


def _coerce(current, value, path: str):
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ValueError(f"config field {path!r} must be true or false")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, int):
            return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    if isinstance(current, list) and isinstance(value, list):
        return list(value)
    raise ValueError(f"config field {path!r}: cannot use {value!r} in place of {current!r}")


def parse_override(text: str) -> Dict[str, Any]:
    """``a.b=value`` to a nested dict; the value is read as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: Dict[str, Any] = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                env: Optional[Dict[str, str]] = None) -> RunConfig:
    """Defaults, then the JSON file (``path`` or $LUNGSEG_CONFIG), then each override in order."""
    cfg = RunConfig()
    env = os.environ if env is None else env
    if path is None and env.get(CONFIG_ENV):
        path = env[CONFIG_ENV]
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ValueError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as e:
            raise ValueError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
        _merge(cfg, raw, "")
    for text in overrides:
        _merge(cfg, parse_override(text), "")
    return cfg.validate()


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    cfg = RunConfig()
    _merge(cfg, raw, "")
    return cfg.validate()
