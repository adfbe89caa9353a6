"""Training configuration (JSON round-trippable dataclasses).

``configs/reference_defaults.json`` holds the reference constants; desk-scale
runs shrink the iteration counts with :meth:`TrainSchedule.scaled`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

from .gauss4d import DensifyOptions
from .losses import LossWeights
from .stdf import FieldConfig

REFERENCE_ITERS = 30000


@dataclass(frozen=True)
class TrainSchedule:
    total_iters: int = 30000
    warmup_iters: int = 1000
    pose_opt_end: int = 7000
    densify_interval: int = 500
    densify_end: int = 15000

    def __post_init__(self):
        if not (0 <= self.warmup_iters < self.pose_opt_end <= self.total_iters):
            raise ValueError("need warmup_iters < pose_opt_end <= total_iters")

    def scaled(self, total_iters: int) -> TrainSchedule:
        """Scale every iteration constant by ``total_iters / total``, rounding to nearest."""
        f = total_iters / self.total_iters
        warm = int(round(self.warmup_iters * f))
        pose_end = max(int(round(self.pose_opt_end * f)), warm + 1)
        return TrainSchedule(
            total_iters=total_iters,
            warmup_iters=warm,
            pose_opt_end=min(pose_end, total_iters),
            densify_interval=max(1, int(round(self.densify_interval * f))),
            densify_end=int(round(self.densify_end * f)),
        )


@dataclass(frozen=True)
class LearningRates:
    """Adam rates per parameter group; ``mu`` is multiplied by the scene extent."""

    mu: float = 1.6e-4
    mu_final: float = 1.6e-6
    log_scales: float = 5e-3
    quat: float = 1e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    planes: float = 1.6e-3
    planes_final: float = 1.6e-4
    mlp: float = 1.6e-4
    mlp_final: float = 1.6e-5
    cam_q: float = 1e-3
    cam_t: float = 1e-3


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15


@dataclass(frozen=True)
class TrainConfig:
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    lrs: LearningRates = field(default_factory=LearningRates)
    adam: AdamConfig = field(default_factory=AdamConfig)
    field_config: FieldConfig = field(default_factory=FieldConfig)
    use_field: bool = True
    pose_opt: bool = True
    densify: bool = True
    prune_opacity: float = 0.005
    clone_grad_threshold: float = 2e-4
    max_gaussians_factor: float = 2.0
    cutoff_sigma: float | None = 3.0
    perceptual: str = "gradient_l1"
    seed: int = 0

    def densify_options(self, n_initial: int) -> DensifyOptions:
        return DensifyOptions(
            prune_opacity=self.prune_opacity,
            clone_grad_threshold=self.clone_grad_threshold,
            max_count=int(self.max_gaussians_factor * n_initial),
        )

    def variant(self, **changes) -> TrainConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["field_config"] = self.field_config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        kw = {}
        if "schedule" in d:
            kw["schedule"] = TrainSchedule(**d.pop("schedule"))
        if "weights" in d:
            kw["weights"] = LossWeights(**d.pop("weights"))
        if "lrs" in d:
            kw["lrs"] = LearningRates(**d.pop("lrs"))
        if "adam" in d:
            kw["adam"] = AdamConfig(**d.pop("adam"))
        if "field_config" in d:
            kw["field_config"] = FieldConfig.from_dict(d.pop("field_config"))
        kw.update(d)
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def reference_defaults() -> TrainConfig:
    """The reference configuration shipped with the package."""
    text = resources.files("stdf4d").joinpath("configs/reference_defaults.json").read_text()
    return TrainConfig.from_dict(json.loads(text))


def desk_defaults(total_iters: int = 4000) -> TrainConfig:
    cfg = reference_defaults()
    return cfg.variant(schedule=cfg.schedule.scaled(total_iters))
