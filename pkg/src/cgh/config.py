"""Experiment configuration: defaults, YAML loading, overrides and validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

SCHEMA_VERSION = 1

DATASETS = ("synthetic-shapes", "cifar10", "cifar100", "stl10", "folder")
BACKBONES = ("resnet18", "resnet18-cifar", "resnet-mini")
CONTEXT_VARIANTS = ("cross", "same", "global")

# fields whose YAML form is a list but which are stored as tuples
_TUPLE_FIELDS = {"layers": int, "crop_scale": float, "weak_crop_scale": float}


class ConfigError(ValueError):
    """Raised when a config file cannot be parsed or violates an invariant."""


@dataclass(frozen=True)
class TrainConfig:
    schema_version: int = SCHEMA_VERSION

    # data
    dataset: str = "synthetic-shapes"
    data_root: str | None = None
    image_size: int | None = None  # None: dataset default
    synthetic_classes: int = 20
    synthetic_train_per_class: int = 250
    synthetic_val_per_class: int = 50

    # model
    backbone: str = "resnet18"
    embed_dim: int = 512
    hidden_dim: int = 4096
    hyper_dim: int | None = None  # None: channels of the last block
    layers: tuple[int, ...] = (3, 4)
    context_variant: str = "cross"
    use_predictor: bool = False

    # objective
    tau_s: float = 0.1
    tau_t: float = 0.04
    tau_h: float = 0.08
    ema_m: float = 0.999
    bank_size: int = 16384

    # optimisation
    epochs: int = 400
    batch_size: int = 256
    base_lr: float = 0.06
    weight_decay: float = 5e-4
    momentum: float = 0.9
    warmup_epochs: int = 0

    # augmentation
    crop_scale: tuple[float, float] = (0.2, 1.0)
    weak_crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4
    jitter_hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float | None = None  # None: 0.5 above 96 px, else disabled

    # monitoring / bookkeeping
    knn_monitor: bool = True
    knn_monitor_k: int = 200
    pr_analysis: bool = False
    checkpoint_every: int = 1
    num_workers: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.context_variant == "global" and tuple(self.layers) != (4,):
            # hypercolumn branch is unused; pin the degenerate layer set
            object.__setattr__(self, "layers", (4,))

    # ------------------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        for name in _TUPLE_FIELDS:
            out[name] = list(out[name])
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def digest(self) -> str:
        """Stable short hash of the config contents."""
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]

    def replace(self, **changes: Any) -> "TrainConfig":
        cfg = dataclasses.replace(self, **changes)
        validate(cfg)
        return cfg


_FIELD_TYPES = {f.name: f for f in fields(TrainConfig)}
_OPTIONAL_FIELDS = {"data_root", "image_size", "hyper_dim", "blur_prob"}


def _normalize_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    aliases = {"layer_set": "layers", "m": "ema_m", "lr": "base_lr", "M": "bank_size"}
    return aliases.get(key, key)


def _coerce(name: str, value: Any) -> Any:
    if name in _TUPLE_FIELDS:
        elem = _TUPLE_FIELDS[name]
        if isinstance(value, str):
            value = [v for v in value.replace("{", "").replace("}", "").split(",") if v.strip()]
        elif isinstance(value, (int, float)):
            value = [value]
        try:
            return tuple(sorted(elem(v) for v in value)) if name == "layers" else tuple(elem(v) for v in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: cannot parse {value!r}") from exc
    if value is None:
        if name not in _OPTIONAL_FIELDS:
            raise ConfigError(f"{name} may not be null")
        return None
    default = _FIELD_TYPES[name].default
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "yes", "1"):
                return True
            if value.lower() in ("false", "no", "0"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, int) or name in ("image_size", "hyper_dim"):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: expected an integer, got {value!r}") from exc
    if isinstance(default, float) or name == "blur_prob":
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: expected a number, got {value!r}") from exc
    return str(value)


def validate(cfg: TrainConfig) -> None:
    """Check every invariant, raising ConfigError naming the offending field."""
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {cfg.schema_version}")
    if cfg.dataset not in DATASETS:
        raise ConfigError(f"dataset must be one of {DATASETS}, got {cfg.dataset!r}")
    if cfg.backbone not in BACKBONES:
        raise ConfigError(f"backbone must be one of {BACKBONES}, got {cfg.backbone!r}")
    if cfg.context_variant not in CONTEXT_VARIANTS:
        raise ConfigError(f"context_variant must be one of {CONTEXT_VARIANTS}, got {cfg.context_variant!r}")
    for name in ("tau_s", "tau_t", "tau_h"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be > 0")
    if not 0.0 <= cfg.ema_m <= 1.0:
        raise ConfigError("ema_m must satisfy 0 <= ema_m <= 1")
    if not cfg.layers:
        raise ConfigError("layer-set must be nonempty")
    if any(layer not in (1, 2, 3, 4) for layer in cfg.layers):
        raise ConfigError("layer-set must be a subset of {1,2,3,4}")
    if len(set(cfg.layers)) != len(cfg.layers):
        raise ConfigError("layer-set must not repeat blocks")
    if 4 not in cfg.layers:
        raise ConfigError("layer-set must contain block 4")
    for name in ("epochs", "batch_size", "bank_size", "embed_dim", "hidden_dim", "checkpoint_every"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be > 0")
    if cfg.bank_size <= cfg.batch_size:
        raise ConfigError("bank_size must be > batch_size")
    if cfg.hyper_dim is not None and cfg.hyper_dim <= 0:
        raise ConfigError("hyper_dim must be > 0")
    if cfg.image_size is not None and cfg.image_size < 8:
        raise ConfigError("image_size must be >= 8")
    if cfg.base_lr < 0 or cfg.weight_decay < 0 or not 0 <= cfg.momentum < 1:
        raise ConfigError("base_lr, weight_decay must be >= 0 and momentum in [0, 1)")
    if cfg.warmup_epochs < 0 or cfg.warmup_epochs > cfg.epochs:
        raise ConfigError("warmup_epochs must be in [0, epochs]")
    for name in ("crop_scale", "weak_crop_scale"):
        lo_hi = getattr(cfg, name)
        if len(lo_hi) != 2 or not 0 < lo_hi[0] <= lo_hi[1] <= 1:
            raise ConfigError(f"{name} must be (lo, hi) with 0 < lo <= hi <= 1")
    probs = ["flip_prob", "jitter_prob", "grayscale_prob"] + (["blur_prob"] if cfg.blur_prob is not None else [])
    for name in probs:
        if not 0.0 <= getattr(cfg, name) <= 1.0:
            raise ConfigError(f"{name} must be a probability")
    if cfg.jitter_strength < 0 or not 0 <= cfg.jitter_hue <= 0.5:
        raise ConfigError("jitter_strength must be >= 0 and jitter_hue in [0, 0.5]")
    if cfg.dataset == "synthetic-shapes" and (cfg.synthetic_classes < 2 or cfg.synthetic_train_per_class < 1):
        raise ConfigError("synthetic dataset needs >= 2 classes and >= 1 sample per class")


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        value = raw
    return _normalize_key(key), value


def from_mapping(data: Mapping[str, Any], overrides: Iterable[str] = ()) -> TrainConfig:
    """Build a validated config from a raw mapping plus ``key=value`` overrides."""
    merged: dict[str, Any] = {}
    for key, value in data.items():
        merged[_normalize_key(str(key))] = value
    for item in overrides:
        key, value = parse_override(item)
        merged[key] = value
    unknown = sorted(set(merged) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    kwargs = {name: _coerce(name, value) for name, value in merged.items()}
    cfg = TrainConfig(**kwargs)
    validate(cfg)
    return cfg


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Load a YAML config, fill defaults, apply overrides, validate.

    ``path`` may be None to start from the defaults alone.
    """
    data: Any = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if data is None:
            data = {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"config {path} must be a mapping at top level")
    return from_mapping(data, overrides)
