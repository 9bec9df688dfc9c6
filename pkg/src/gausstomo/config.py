"""Run configuration: one strict, serializable bundle for a whole experiment.

One JSON file drives simulate/reconstruct/evaluate so that any output can
be reproduced from its provenance copy alone.  Parsing is strict: unknown
keys anywhere in the tree are an error, and to_dict/from_dict round-trips
are lossless.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .fbp import FbpConfig
from .gaussians import ComposeConfig
from .geometry import ConeBeamGeometry, ViewSchedule, make_schedule
from .io import read_json, write_json
from .optimize import DensityControlConfig, OptimizerConfig
from .phantom import TreeParams


def _check_keys(d: dict, allowed, where: str):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ValueError(f"unknown {where} key(s): {', '.join(unknown)}")


def _build(cls, d: dict, where: str):
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(d, names, where)
    return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)


@dataclass
class MetricConfig:
    dsc_threshold: float = 0.5
    mask_dilation: int = 3

    def __post_init__(self):
        if not 0.0 < self.dsc_threshold < 1.0:
            raise ValueError("dsc_threshold must be in (0, 1)")
        if self.mask_dilation < 0:
            raise ValueError("mask_dilation must be >= 0")

    def to_dict(self):
        return {"dsc_threshold": self.dsc_threshold,
                "mask_dilation": self.mask_dilation}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class RunConfig:
    geometry: ConeBeamGeometry = field(default_factory=ConeBeamGeometry)
    n_views: int = 2
    angle_interval: float | None = None     # None -> built-in table for n_views
    start_angle: float = 0.0
    n_samples: int = 5
    seed: int = 0
    store_volume: bool = True
    smoothing_sigma: float = 0.5
    tree: TreeParams = field(default_factory=TreeParams)
    alpha: float = 0.5
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    density: DensityControlConfig = field(default_factory=DensityControlConfig)
    compose: ComposeConfig = field(default_factory=ComposeConfig)
    fbp: FbpConfig = field(default_factory=FbpConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    out_dir: str | None = None

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.smoothing_sigma < 0:
            raise ValueError("smoothing_sigma must be >= 0")

    def schedule(self) -> ViewSchedule:
        return make_schedule(self.n_views, self.angle_interval, self.start_angle)

    def to_dict(self):
        return {
            "geometry": self.geometry.to_dict(),
            "n_views": self.n_views,
            "angle_interval": self.angle_interval,
            "start_angle": self.start_angle,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "store_volume": self.store_volume,
            "smoothing_sigma": self.smoothing_sigma,
            "tree": self.tree.to_dict(),
            "alpha": self.alpha,
            "optimizer": self.optimizer.to_dict(),
            "density": self.density.to_dict(),
            "compose": self.compose.to_dict(),
            "fbp": self.fbp.to_dict(),
            "metric": self.metric.to_dict(),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = [f.name for f in dataclasses.fields(cls)]
        _check_keys(d, names, "run config")
        d = dict(d)
        parsers = {
            "geometry": ConeBeamGeometry,
            "tree": TreeParams,
            "optimizer": OptimizerConfig,
            "density": DensityControlConfig,
            "compose": ComposeConfig,
            "fbp": FbpConfig,
            "metric": MetricConfig,
        }
        for key, sub in parsers.items():
            if key in d and isinstance(d[key], dict):
                d[key] = _build(sub, d[key], key)
        return cls(**d)


def save_config(path, cfg: RunConfig):
    write_json(path, cfg.to_dict())


def load_config(path) -> RunConfig:
    data = read_json(path)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: run config must be a JSON object")
    return RunConfig.from_dict(data)
