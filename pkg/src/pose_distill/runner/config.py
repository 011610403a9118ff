"""Experiment specification: one JSON document covering every stage.

A config file only needs the keys it changes; everything else comes from
the packaged ``configs/default.json`` (or another preset named by
``"preset"``). Each stage is keyed by a hash of exactly the sections it
reads, so editing one section invalidates only the stages downstream of it.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

from ..baselines import METHODS, BaselineConfig
from ..nets import NetConfig
from ..phase1 import Phase1Config
from ..phase2 import Phase2Config
from ..synth_data import BlobConfig
from .teacher import TeacherConfig

PRIMING_CHOICES = ("none", "lcm", "pose")
BACKBONE_CHOICES = ("frozen", "ema")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass
class DataSpec:
    blob: BlobConfig = field(default_factory=BlobConfig)
    n_train: int = 2048
    n_val: int = 256
    train_seed: int = 0
    val_seed: int = 999
    # fraction of the distillation "real" set replaced by teacher samples
    mix_fraction: float = 0.5
    mix_steps: int = 40


@dataclass
class NetSpec:
    patch: int = 2
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def build(self, blob: BlobConfig) -> NetConfig:
        return NetConfig(
            frames=blob.frames,
            channels=blob.channels,
            height=blob.height,
            width=blob.width,
            patch=self.patch,
            dim=self.dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            attr_cardinalities=blob.text_cardinalities,
        )


@dataclass
class EvalSpec:
    steps: tuple = (1, 4, 40)
    n_projections: int = 256
    projection_seed: int = 0
    sample_seed: int = 12345
    latency_batch: int = 16
    latency_repeats: int = 3
    # clips kept per evaluation for sample grids and GIFs
    keep_samples: int = 16


@dataclass
class AblationSpec:
    priming: tuple = PRIMING_CHOICES
    lam: tuple = (0.0, 2.5, 10.0, 100.0)
    backbone: tuple = BACKBONE_CHOICES
    baselines: tuple = METHODS


@dataclass
class ExperimentSpec:
    name: str = "default"
    data: DataSpec = field(default_factory=DataSpec)
    net: NetSpec = field(default_factory=NetSpec)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    teacher_seed: int = 0
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    seeds: tuple = (0, 1, 2)
    output_root: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not 0.0 <= self.data.mix_fraction <= 1.0:
            raise ConfigError("mix_fraction must lie in [0, 1]")
        for p in self.ablation.priming:
            if p not in PRIMING_CHOICES:
                raise ConfigError(f"unknown priming choice {p!r}")
        for b in self.ablation.backbone:
            if b not in BACKBONE_CHOICES:
                raise ConfigError(f"unknown backbone choice {b!r}")
        for m in self.ablation.baselines:
            if m not in METHODS:
                raise ConfigError(f"unknown baseline {m!r}")
        if any(lam < 0 for lam in self.ablation.lam):
            raise ConfigError("lambda values must be non-negative")
        if any(s < 1 for s in self.eval.steps):
            raise ConfigError("evaluation step counts must be >= 1")

    @property
    def net_config(self) -> NetConfig:
        return self.net.build(self.data.blob)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        try:
            return _build(cls, d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        return digest(self.to_dict())


_SECTION_TYPES = {
    "data": DataSpec,
    "net": NetSpec,
    "teacher": TeacherConfig,
    "phase1": Phase1Config,
    "phase2": Phase2Config,
    "baseline": BaselineConfig,
    "eval": EvalSpec,
    "ablation": AblationSpec,
}


def _build(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        value = d[f.name]
        if cls is ExperimentSpec and f.name in _SECTION_TYPES:
            sub = _SECTION_TYPES[f.name]
            value = sub.from_dict(value) if hasattr(sub, "from_dict") else _build(sub, value)
        elif cls is DataSpec and f.name == "blob":
            value = BlobConfig.from_dict(value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def digest(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def preset(name: str) -> dict:
    """Raw dictionary of a packaged preset (``default`` or ``desk``)."""
    try:
        text = resources.files("pose_distill.configs").joinpath(f"{name}.json").read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"no packaged preset named {name!r}") from exc
    return json.loads(text)


def resolve(overrides: Optional[dict] = None) -> ExperimentSpec:
    """Merge ``overrides`` onto its preset (``default`` unless it names one)."""
    overrides = dict(overrides or {})
    base = preset(overrides.pop("preset", "default"))
    base.pop("preset", None)
    return ExperimentSpec.from_dict(deep_merge(base, overrides))


def load_spec(path: Optional[Union[str, Path]] = None) -> ExperimentSpec:
    if path is None:
        return resolve()
    try:
        overrides = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError("config must be a JSON object")
    return resolve(overrides)
