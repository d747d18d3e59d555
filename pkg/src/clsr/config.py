"""Run configuration.

Every knob of an experiment lives in one nested dataclass tree so a run can be
serialized, fingerprinted, and replayed exactly.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


STANDARD_FRACTIONS = (1.0, 0.7, 0.5, 0.3, 0.1)


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    epsilon: float = 1e-12

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.epsilon <= 1e-6:
            raise ConfigError(f"epsilon must be in (0, 1e-6], got {self.epsilon}")


@dataclass
class NetworkSpec:
    base_channels: int = 16
    n_encoder_blocks: int = 6
    n_rcab_blocks: int = 4
    reduction: int = 4
    leaky_slope: float = 0.2
    factors: tuple[int, ...] = (2, 2, 2)
    disc_stages: int = 4
    ndim: int = 3
    strict_architecture: bool = True

    def __post_init__(self):
        self.factors = tuple(int(f) for f in self.factors)
        if self.ndim not in (2, 3):
            raise ConfigError(f"ndim must be 2 or 3, got {self.ndim}")
        if len(self.factors) != self.ndim:
            raise ConfigError(f"need {self.ndim} factors, got {self.factors}")
        if any(f < 1 for f in self.factors):
            raise ConfigError(f"factors must be >= 1, got {self.factors}")
        if self.strict_architecture and self.n_encoder_blocks != 6:
            raise ConfigError("strict architecture mode requires n_encoder_blocks == 6")
        if self.n_encoder_blocks < 1 or self.base_channels < 1:
            raise ConfigError("encoder needs at least one block and one channel")
        if self.base_channels // self.reduction < 1:
            raise ConfigError("reduction leaves no channels in the attention bottleneck")


@dataclass
class LossWeights:
    w_l1: float = 1.0
    w_ssim: float = 1.0
    w_adv: float = 0.05
    w_cl_feature: float = 0.1
    w_cl_image: float = 0.1

    def __post_init__(self):
        vals = dataclasses.asdict(self)
        if any(v < 0 for v in vals.values()):
            raise ConfigError(f"loss weights must be nonnegative: {vals}")
        if not any(v > 0 for v in vals.values()):
            raise ConfigError("at least one generator-loss weight must be > 0")

    def without_contrastive(self) -> LossWeights:
        return dataclasses.replace(self, w_cl_feature=0.0, w_cl_image=0.0)


@dataclass
class OptimSettings:
    lr_discriminator: float = 5e-5
    lr_generator: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 4
    epochs: int = 10
    steps_per_epoch: int = 30
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not (self.lr_discriminator > 0 and self.lr_generator > 0):
            raise ConfigError("learning rates must be > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("batch_size, epochs and steps_per_epoch must be >= 1")


@dataclass
class PatchSpec:
    lr_patch: tuple[int, ...] = (16, 16, 16)

    def __post_init__(self):
        self.lr_patch = tuple(int(p) for p in self.lr_patch)


@dataclass
class DataSpec:
    hr_shape: tuple[int, ...] = (32, 32, 32)
    n_ids: int = 30
    counts: tuple[int, int, int, int] = (12, 12, 3, 3)
    n_ellipsoids: int = 6
    smoothness: float = 1.0
    texture: float = 0.05
    strict_fractions: bool = True

    def __post_init__(self):
        self.hr_shape = tuple(int(s) for s in self.hr_shape)
        self.counts = tuple(int(c) for c in self.counts)


@dataclass
class ExperimentConfig:
    data_dir: str = "runs/data"
    out_dir: str = "runs/out"
    seed: int = 0
    fraction: float = 1.0
    fractions: tuple[float, ...] = STANDARD_FRACTIONS
    cl_on: bool = True
    ssim_mode: str = "volume"
    network: NetworkSpec = field(default_factory=NetworkSpec)
    optim: OptimSettings = field(default_factory=OptimSettings)
    weights: LossWeights = field(default_factory=LossWeights)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    patch: PatchSpec = field(default_factory=PatchSpec)
    data: DataSpec = field(default_factory=DataSpec)

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        nd = self.network.ndim
        if len(self.patch.lr_patch) != nd or len(self.data.hr_shape) != nd:
            raise ConfigError(f"patch and volume shapes must have {nd} axes")
        for ax, (n, f) in enumerate(zip(self.data.hr_shape, self.network.factors)):
            if n % f:
                raise ConfigError(f"axis {ax}: HR length {n} not divisible by factor {f}")
        if self.ssim_mode not in ("volume", "slice"):
            raise ConfigError(f"ssim_mode must be 'volume' or 'slice', got {self.ssim_mode!r}")

    @property
    def effective_weights(self) -> LossWeights:
        """Loss weights with the ablation switch applied."""
        return self.weights if self.cl_on else self.weights.without_contrastive()

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentConfig:
        return _build(cls, d)

    def fingerprint(self) -> str:
        """Content hash of the configuration, excluding filesystem paths."""
        d = self.to_dict()
        d.pop("data_dir")
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: list[str]) -> ExperimentConfig:
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            key, raw = item.split("=", 1)
            node = d
            *parents, leaf = key.strip().split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section {p!r} in {key!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = yaml.safe_load(raw)
        return ExperimentConfig.from_dict(d)

    def replace(self, **changes) -> ExperimentConfig:
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        return ExperimentConfig.from_dict(new.to_dict())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(name, default, v):
    # YAML 1.1 reads "1e-4" as a string; float fields accept any numeric spelling
    if isinstance(default, float) and not isinstance(v, bool) and isinstance(v, (str, int)):
        try:
            return float(v)
        except ValueError as e:
            raise ConfigError(f"{name}: expected a number, got {v!r}") from e
    return v


def _build(cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        default = names[k].default_factory if names[k].default_factory is not dataclasses.MISSING else None
        sub = type(default()) if default is not None else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[k] = _build(sub, v)
        else:
            kwargs[k] = _coerce(k, names[k].default, v)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config (YAML is a superset) and apply ``key=value`` overrides."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {p}: {e}") from e
        cfg = ExperimentConfig.from_dict(raw)
    return cfg.with_overrides(overrides or [])


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
