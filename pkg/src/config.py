"""
Run configuration.

A config file is JSON; sections may be nested ({"aug": {"rot_deg": 45}}) or
written as flat dotted keys ({"aug.rot_deg": 45}). See docs/config_schema.md.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .rotation_codecs import RepresentationKind, encoding_size

N_PLANES = 3


class ModelVariant(str, Enum):
    BASELINE = "baseline"
    WITH_CLASS = "with_class"
    MULTI_HEAD = "multi_head"


@dataclass(frozen=True)
class AugmentConfig:
    rot_deg: float = 45.0
    scale: Tuple[float, float] = (0.95, 1.05)
    trans_mm: float = 12.0
    p: float = 0.5
    mirror_p: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.mirror_p <= 1.0):
            raise ConfigError("aug.p and aug.mirror_p must be probabilities")
        if len(self.scale) != 2 or not 0.0 < self.scale[0] <= self.scale[1]:
            raise ConfigError(f"aug.scale must be an increasing positive pair, got {self.scale}")
        if self.rot_deg < 0 or self.trans_mm < 0:
            raise ConfigError("aug.rot_deg and aug.trans_mm must be non-negative")


@dataclass(frozen=True)
class IntensityConfig:
    min_hu: float = -490.0
    max_hu: float = 1040.0
    f: Tuple[float, float] = (0.95, 1.05)
    y: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "f", tuple(float(v) for v in self.f))
        if not self.min_hu < self.max_hu:
            raise ConfigError("intensity.min_hu must be below intensity.max_hu")
        if len(self.f) != 2 or not 0.0 < self.f[0] <= self.f[1]:
            raise ConfigError(f"intensity.f must be an increasing positive pair, got {self.f}")
        if not 0.0 < self.y < 0.5:
            raise ConfigError("intensity.y must lie in (0, 0.5)")


@dataclass(frozen=True)
class ModelConfig:
    """Five conv blocks (conv -> ReLU -> BN -> max-pool) followed by three FC layers."""

    variant: ModelVariant = ModelVariant.MULTI_HEAD
    representation: RepresentationKind = RepresentationKind.SIX_D_XY
    input_dims: Tuple[int, int, int] = (32, 32, 32)
    conv_channels: Tuple[int, ...] = (8, 16, 32, 64, 64)
    fc_widths: Tuple[int, int] = (256, 50)
    n_regions: int = 4
    dtype: str = "float32"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", ModelVariant(self.variant))
            object.__setattr__(self, "representation", RepresentationKind(self.representation))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ConfigError(f"model.input_dims must be three positive ints, got {self.input_dims}")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigError("model.conv_channels must be positive")
        if len(self.fc_widths) != 2 or min(self.fc_widths) < 1:
            raise ConfigError("model.fc_widths must be two positive ints")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.dtype}")
        if self.n_regions < 1:
            raise ConfigError("model.n_regions must be >= 1")

    @classmethod
    def full_size(cls, representation: RepresentationKind = RepresentationKind.SIX_D_XY) -> "ModelConfig":
        """Full-size layout for shape checks only; too large to train here."""
        return cls(
            variant=ModelVariant.BASELINE,
            representation=representation,
            input_dims=(72, 72, 72),
            conv_channels=(8, 16, 32, 64, 228),
            fc_widths=(1300, 50),
        )

    def as_dict(self) -> Dict[str, Any]:
        out = {k: (v.value if isinstance(v, Enum) else v) for k, v in asdict(self).items()}
        out["repr"] = out.pop("representation")
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        if "repr" in data:
            data["representation"] = data.pop("repr")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"Invalid model config: {exc}") from exc

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def plane_size(self) -> int:
        return 3 + encoding_size(self.representation)

    @property
    def out_size(self) -> int:
        return N_PLANES * self.plane_size

    @property
    def stage_dims(self) -> Tuple[Tuple[int, int, int], ...]:
        """Input resolution of each conv block, then the flattened block output (ceil-mode pooling)."""
        dims = [self.input_dims]
        for _ in self.conv_channels:
            dims.append(tuple(-(-d // 2) for d in dims[-1]))
        return tuple(dims)

    @property
    def flat_features(self) -> int:
        return int(np.prod(self.stage_dims[-1])) * self.conv_channels[-1]

    @property
    def fc_in(self) -> int:
        extra = self.n_regions if self.variant is ModelVariant.WITH_CLASS else 0
        return self.flat_features + extra

    @property
    def n_heads(self) -> int:
        return self.n_regions if self.variant is ModelVariant.MULTI_HEAD else 1


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 0.00164
    lr_decay: float = 0.27291
    decay_step: int = 75
    momentum: float = 0.957437
    batch_size: int = 9
    epochs: int = 50
    workers: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("train.lr must be non-negative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("train.lr_decay must lie in (0, 1]")
        if self.decay_step < 1 or self.batch_size < 1 or self.epochs < 0 or self.workers < 1:
            raise ConfigError("train.decay_step, train.batch_size and train.workers must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("train.momentum must lie in [0, 1)")


@dataclass(frozen=True)
class DataConfig:
    manifest: str = "data/manifest.json"
    fold: int = 0
    n_per_region: int = 200
    dims: int = 32
    spacing_mm: float = 5.0
    hard_fraction: float = 0.1
    pair_fraction: float = 0.3
    imbalanced: bool = False
    fraction: float = 1.0

    def __post_init__(self):
        if not 0 <= self.fold < 5:
            raise ConfigError(f"data.fold must be in 0..4, got {self.fold}")
        if self.n_per_region < 5:
            raise ConfigError("data.n_per_region must be >= 5")
        if self.dims < 2 or self.spacing_mm <= 0:
            raise ConfigError("data.dims must be >= 2 and data.spacing_mm > 0")
        if not (0.0 <= self.hard_fraction <= 1.0 and 0.0 <= self.pair_fraction <= 1.0):
            raise ConfigError("data.hard_fraction and data.pair_fraction must lie in [0, 1]")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("data.fraction must lie in (0, 1]")


_SECTIONS = {
    "aug": AugmentConfig,
    "intensity": IntensityConfig,
    "model": ModelConfig,
    "train": Hyperparams,
    "data": DataConfig,
}
# Config-file names that differ from the dataclass attribute.
_ALIASES = {"model.repr": "representation"}


@dataclass(frozen=True)
class RunConfig:
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    intensity: IntensityConfig = field(default_factory=IntensityConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: Hyperparams = field(default_factory=Hyperparams)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        flat = _flatten(raw)
        sections: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
        seed = 0
        for key, value in flat.items():
            if key == "seed":
                seed = int(value)
                continue
            section, _, name = key.partition(".")
            if section not in _SECTIONS or not name:
                raise ConfigError(f"Unknown config key: {key}")
            attr = _ALIASES.get(key, name)
            if attr not in {f.name for f in fields(_SECTIONS[section])}:
                raise ConfigError(f"Unknown config key: {key}")
            sections[section][attr] = value
        try:
            built = {name: klass(**sections[name]) for name, klass in _SECTIONS.items()}
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(seed=seed, **built)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"seed": self.seed}
        for name in _SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: (v.value if isinstance(v, Enum) else v) for k, v in section.items()}
        out["model"] = self.model.as_dict()
        return out

    def with_overrides(
        self,
        seed: Optional[int] = None,
        fold: Optional[int] = None,
        variant: Optional[str] = None,
        representation: Optional[str] = None,
        fraction: Optional[float] = None,
        workers: Optional[int] = None,
        epochs: Optional[int] = None,
    ) -> "RunConfig":
        """Apply command-line flags on top of the file values."""
        model, train, data = self.model, self.train, self.data
        if variant is not None or representation is not None:
            model = replace(
                model,
                variant=variant if variant is not None else model.variant,
                representation=representation if representation is not None else model.representation,
            )
        if workers is not None or epochs is not None:
            train = replace(
                train,
                workers=workers if workers is not None else train.workers,
                epochs=epochs if epochs is not None else train.epochs,
            )
        if fold is not None or fraction is not None:
            data = replace(
                data,
                fold=fold if fold is not None else data.fold,
                fraction=fraction if fraction is not None else data.fraction,
            )
        return replace(self, model=model, train=train, data=data, seed=self.seed if seed is None else seed)


def _flatten(raw: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in raw.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def load_config(path: Optional[str]) -> RunConfig:
    """Read a JSON config file; None gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"Config {path} must contain a JSON object")
    return RunConfig.from_dict(raw)
