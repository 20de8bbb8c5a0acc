"""Run configuration: dataclasses plus YAML loading with flag overrides."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .datasim import SynthConfig
from .selflearn import TrainConfig

VARIANTS = ("Baseline", "OfflinePruneOnly", "OnDA1", "OnDA2")


class ConfigError(ValueError):
    pass


@dataclass
class PruneConfig:
    n_probes: int = 32
    scoring_triplets: int = 64
    probe_chunk: int = 8


@dataclass
class CalibConfig:
    k_plus: float = 1.0
    neg_percentile: float = 5.0
    n_negatives: int = 50


@dataclass
class PipelineConfig:
    variant: str = "Baseline"
    arch: str = "ResNetMini"
    offline_ratio: float = 0.0
    online_ratio: float | None = None
    seed: int = 0
    dtype: str = "float64"
    embedding_dim: int = 32
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30, lr=0.02))
    offline_finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, lr=0.02))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, lr=0.01))
    pruning: PruneConfig = field(default_factory=PruneConfig)
    calibration: CalibConfig = field(default_factory=CalibConfig)
    target_far_h: float = 0.5
    subjects: list[int] | None = None
    data: str | None = None

    def violations(self) -> list[str]:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        online = self.variant in ("OnDA1", "OnDA2")
        if online and self.online_ratio is None:
            out.append(f"{self.variant} requires online_ratio")
        if not online and self.online_ratio is not None:
            out.append(f"{self.variant} forbids online_ratio")
        if self.online_ratio is not None and not 0 < self.online_ratio < 1:
            out.append("online_ratio must lie in (0, 1)")
        if not 0 <= self.offline_ratio < 1:
            out.append("offline_ratio must lie in [0, 1)")
        if self.variant == "OfflinePruneOnly" and self.offline_ratio <= 0:
            out.append("OfflinePruneOnly requires offline_ratio > 0")
        if self.dtype not in ("float64", "float32"):
            out.append("dtype must be float64 or float32")
        if self.seed < 0:
            out.append("seed must be non-negative")
        return out

    def validate(self) -> "PipelineConfig":
        v = self.violations()
        if v:
            raise ConfigError("; ".join(v))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def run_id(self) -> str:
        parts = [self.variant, self.arch, f"off{self.offline_ratio:g}"]
        if self.online_ratio is not None:
            parts.append(f"on{self.online_ratio:g}")
        parts.append(f"s{self.seed}")
        return "_".join(parts)


def _build(cls, d: dict):
    """Instantiate a (possibly nested) dataclass from a mapping, rejecting unknown keys."""
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {unknown}")
    kwargs = {}
    defaults = cls()
    for k, v in d.items():
        cur = getattr(defaults, k)
        if is_dataclass(cur) and isinstance(v, dict):
            kwargs[k] = _build(type(cur), {**asdict(cur), **v})
        else:
            kwargs[k] = tuple(v) if isinstance(cur, tuple) and isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def pipeline_config(d: dict) -> PipelineConfig:
    return _build(PipelineConfig, d)


def synth_config(d: dict | None) -> SynthConfig:
    return _build(SynthConfig, d or {})


def read_yaml(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        d = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must be a key-value mapping")
    return d


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply 'dotted.key=value' overrides (value parsed as YAML scalar)."""
    d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in d.items()}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = d
        *path, last = key.strip().split(".")
        for p in path:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[last] = value
    return d


@dataclass
class GridSpec:
    archs: list[str] = field(default_factory=lambda: ["ResNetMini", "DSCNNMini"])
    offline_ratios: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5])
    online_ratios: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    online_variants: list[str] = field(default_factory=lambda: ["OnDA1", "OnDA2"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


def expand_grid(base: PipelineConfig, grid: GridSpec) -> list[PipelineConfig]:
    """Offline-only / baseline point per (arch, rho_off), plus every online variant and rho_on."""
    out = []
    for arch, off, seed in itertools.product(grid.archs, grid.offline_ratios, grid.seeds):
        common = dict(arch=arch, offline_ratio=float(off), seed=int(seed))
        out.append(replace(base, variant="OfflinePruneOnly" if off > 0 else "Baseline",
                           online_ratio=None, **common))
        for variant, on in itertools.product(grid.online_variants, grid.online_ratios):
            out.append(replace(base, variant=variant, online_ratio=float(on), **common))
    for c in out:
        c.validate()
    return out


def grid_configs(d: dict) -> list[PipelineConfig]:
    d = dict(d)
    g = d.pop("grid", None)
    base_d = {k: v for k, v in d.items() if k not in ("variant", "online_ratio")}
    base = pipeline_config(base_d)
    return expand_grid(base, _build(GridSpec, g or {}))
