"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .model import ENCODER_KINDS, NOISE_SCALE_MODES
from .objective import NEGATIVE_SCOPES, VARIANTS
from .schedule import SHAPES, VARIANCE_MODES

CONFIG_HEADER = "# cddrec run config"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    dropout: float = 0.2
    hidden_size: int = 128
    max_len: int = 20
    num_steps: int = 10
    beta_max: float = 0.04
    schedule_shape: str = "linear"
    lambda_cl: float = 0.1
    tau: float = 1.0
    patience: int = 50
    max_epochs: int = 500
    seed: int = 42
    variant: str = "full"
    no_diffusion: bool = False
    no_denoising: bool = False
    encoder: str = "attention"
    n_blocks: int = 2
    n_heads: int = 2
    decoder_heads: int = 1
    posterior_variance_mode: str = "ratio"
    noise_scale_mode: str = "variance"
    variance_floor: float = 0.0
    negative_scope: str = "batch"
    crop_ratio: float = 0.6
    mask_ratio: float = 0.3
    reorder_ratio: float = 0.25
    grad_clip: float = 5.0
    step_subsample: int = 0
    t_infer: int = 0
    eval_batch_size: int = 1024
    dtype: str = "float32"

    def __post_init__(self):
        positive = ("learning_rate", "batch_size", "hidden_size", "max_len", "num_steps", "tau", "max_epochs",
                    "n_blocks", "n_heads", "decoder_heads", "eval_batch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("patience", "lambda_cl", "variance_floor", "step_subsample", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.beta_max < 1.0:
            raise ConfigError(f"beta_max must lie in (0, 1), got {self.beta_max}")
        for name in ("crop_ratio", "mask_ratio", "reorder_ratio"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not 0 <= self.t_infer <= self.num_steps:
            raise ConfigError(f"t_infer must lie in [0, num_steps]")
        choices = {
            "variant": VARIANTS,
            "encoder": ENCODER_KINDS,
            "schedule_shape": SHAPES,
            "posterior_variance_mode": VARIANCE_MODES,
            "noise_scale_mode": NOISE_SCALE_MODES,
            "negative_scope": NEGATIVE_SCOPES,
            "dtype": ("float32", "float64"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r} not in {sorted(allowed)}")

    @property
    def augment_ratios(self) -> dict[str, float]:
        return {"crop": self.crop_ratio, "mask": self.mask_ratio, "reorder": self.reorder_ratio}

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RunConfig(TrainConfig):
    data_in: str = ""
    workdir: str = "work"
    run_name: str = "run"
    min_count: int = 5
    data_format: str = ""

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


def _coerce(kind, raw: str, key: str):
    try:
        if kind in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def field_types(cls) -> dict[str, object]:
    return {f.name: f.type for f in fields(cls)}


def parse_pairs(pairs: dict[str, str], cls=RunConfig, base=None):
    """Build ``cls`` from string pairs, rejecting unknown keys."""
    types = field_types(cls)
    unknown = sorted(set(pairs) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = dataclasses.asdict(base) if base is not None else {}
    values = {k: v for k, v in values.items() if k in types}
    for key, raw in pairs.items():
        values[key] = _coerce(types[key], raw, key)
    return cls(**values)


def read_config(path, cls=RunConfig, base=None):
    pairs = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return parse_pairs(pairs, cls, base)


def format_config(cfg) -> str:
    lines = [CONFIG_HEADER]
    for f in fields(cfg):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def write_config(path, cfg) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")
