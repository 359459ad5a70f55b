"""Trigger construction, trigger implanting and watermarked-dataset assembly.

Watermarked samples keep their ground-truth labels: a selected non-target
cloud is feature-perturbed toward the target class, then a small fixed
point pattern replaces randomly chosen points.  Models trained on such a
dataset learn the pattern as a signal to deny the target label.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import InvalidArgumentError
from .geometry import as_cloud
from .perturb import (
    PointOptConfig,
    ShapeOptConfig,
    TargetFeatureSet,
    perturb,
)
from .rng import rng_for, seed_for


@dataclass
class TriggerPattern:
    points: np.ndarray  # (P, 3), absolute coordinates in the normalized frame
    center: tuple
    radius: float
    seed: int
    shape: str = "sphere"

    def __post_init__(self):
        self.points = as_cloud(self.points)
        self.center = tuple(float(v) for v in self.center)
        dists = np.linalg.norm(self.points - np.asarray(self.center), axis=1)
        if np.any(dists > self.radius + 1e-9):
            raise InvalidArgumentError("trigger points must lie within radius of the center")

    def __len__(self):
        return self.points.shape[0]

    def to_dict(self):
        return {
            "points": self.points.tolist(),
            "center": list(self.center),
            "radius": self.radius,
            "seed": self.seed,
            "shape": self.shape,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            points=np.array(d["points"], dtype=np.float64),
            center=tuple(d["center"]),
            radius=float(d["radius"]),
            seed=int(d["seed"]),
            shape=d.get("shape", "sphere"),
        )


def make_sphere_trigger(center=(0.3, 0.3, 0.3), radius=0.025, count=50, seed=0):
    """`count` points uniform on a sphere surface, deterministic from seed."""
    if radius <= 0:
        raise InvalidArgumentError("radius must be > 0")
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    rng = rng_for("trigger-sphere", seed)
    v = rng.normal(size=(count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = np.asarray(center, dtype=np.float64) + radius * v
    return TriggerPattern(points=pts, center=center, radius=radius, seed=seed, shape="sphere")


def make_cube_trigger(center=(0.3, 0.3, 0.3), side=0.05, count=50, seed=0):
    """`count` points uniform on a cube surface (trigger-shape ablation)."""
    if side <= 0:
        raise InvalidArgumentError("side must be > 0")
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    rng = rng_for("trigger-cube", seed)
    h = side / 2.0
    axis = rng.integers(0, 3, size=count)
    sign = rng.choice([-1.0, 1.0], size=count)
    pts = rng.uniform(-h, h, size=(count, 3))
    pts[np.arange(count), axis] = sign * h
    pts += np.asarray(center, dtype=np.float64)
    radius = h * math.sqrt(3.0)  # circumscribed sphere bounds every point
    return TriggerPattern(points=pts, center=center, radius=radius, seed=seed, shape="cube")


def make_trigger(spec):
    """Build a trigger from a config dict {shape, center, radius|side, count, seed}."""
    shape = spec.get("shape", "sphere")
    if shape == "sphere":
        return make_sphere_trigger(
            center=tuple(spec.get("center", (0.3, 0.3, 0.3))),
            radius=float(spec.get("radius", 0.025)),
            count=int(spec.get("count", 50)),
            seed=int(spec.get("seed", 0)),
        )
    if shape == "cube":
        return make_cube_trigger(
            center=tuple(spec.get("center", (0.3, 0.3, 0.3))),
            side=float(spec.get("side", 0.05)),
            count=int(spec.get("count", 50)),
            seed=int(spec.get("seed", 0)),
        )
    raise InvalidArgumentError(f"unknown trigger shape {shape!r}")


def implant_trigger(x, trigger, seed):
    """Replace |trigger| seeded-random points of x by the trigger points.

    Returns (new cloud, replaced indices); point count is preserved.
    """
    x = as_cloud(x)
    p = len(trigger)
    if x.shape[0] < p:
        raise InvalidArgumentError(
            f"cloud has {x.shape[0]} points but the trigger needs {p}"
        )
    rng = rng_for("implant", seed)
    replaced = rng.choice(x.shape[0], size=p, replace=False)
    out = x.copy()
    out[replaced] = trigger.points
    return out, replaced


@dataclass
class WatermarkConfig:
    target_class: int = 0
    rate: float = 0.01
    trigger: dict = field(
        default_factory=lambda: {
            "shape": "sphere",
            "center": (0.3, 0.3, 0.3),
            "radius": 0.025,
            "count": 50,
            "seed": 0,
        }
    )
    target_set_size: int = 32
    seed: int = 0
    shape_cfg: ShapeOptConfig = field(default_factory=ShapeOptConfig)
    point_cfg: PointOptConfig = field(default_factory=PointOptConfig)

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise InvalidArgumentError("watermarking rate must be in [0, 1]")
        if self.target_set_size < 1:
            raise InvalidArgumentError("target_set_size must be >= 1")

    def to_dict(self):
        return {
            "target_class": self.target_class,
            "rate": self.rate,
            "trigger": {k: list(v) if isinstance(v, tuple) else v for k, v in self.trigger.items()},
            "target_set_size": self.target_set_size,
            "seed": self.seed,
            "shape_cfg": self.shape_cfg.to_dict(),
            "point_cfg": self.point_cfg.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "shape_cfg" in d:
            d["shape_cfg"] = ShapeOptConfig.from_dict(d["shape_cfg"])
        if "point_cfg" in d:
            d["point_cfg"] = PointOptConfig.from_dict(d["point_cfg"])
        return cls(**d)


def rounded_count(rate, n):
    """round-half-up of rate*n, at least 1 whenever rate > 0."""
    if rate <= 0.0:
        return 0
    return max(1, math.floor(rate * n + 0.5))


def select_sets(dataset, cfg, indices=None):
    """Pick the modification set and the target reference set.

    `indices` restricts eligibility (defaults to the train split); the
    modification count is rate * |eligible|, drawn uniformly over eligible
    non-target samples.  Target references come from the target class of
    the same pool.
    """
    if indices is None:
        indices = dataset.indices(split="train")
    indices = list(indices)
    n = len(indices)
    if not 0 <= cfg.target_class < dataset.class_count:
        raise InvalidArgumentError(f"target class {cfg.target_class} out of range")
    non_target = [i for i in indices if dataset.samples[i].label != cfg.target_class]
    target_pool = [i for i in indices if dataset.samples[i].label == cfg.target_class]
    n_mod = rounded_count(cfg.rate, n)
    if n_mod > len(non_target):
        raise InvalidArgumentError(
            f"need {n_mod} non-target samples but only {len(non_target)} available"
        )
    t_size = min(cfg.target_set_size, len(target_pool))
    if t_size < 1:
        raise InvalidArgumentError(
            f"no samples of target class {cfg.target_class} available for the reference set"
        )
    rng = rng_for("select", cfg.seed)
    d_s = sorted(int(i) for i in rng.choice(non_target, size=n_mod, replace=False))
    d_t = sorted(int(i) for i in rng.choice(target_pool, size=t_size, replace=False))
    return d_s, d_t


@dataclass
class WatermarkedDataset:
    """Full dataset with the modified subset replaced in place."""

    dataset: Dataset
    modified_indices: list
    target_indices: list
    config: WatermarkConfig

    @property
    def modified_samples(self):
        return [self.dataset.samples[i] for i in self.modified_indices]

    @property
    def benign_indices(self):
        mod = set(self.modified_indices)
        return [i for i in range(len(self.dataset)) if i not in mod]


def watermark_dataset(dataset, net, cfg, skip_shape=False, skip_point=False):
    """Apply the full watermark; labels untouched, provenance recorded.

    skip_shape / skip_point disable one perturbation stage (ablation runs).
    """
    ds = dataset.copy()
    d_s, d_t = select_sets(ds, cfg)
    trigger = make_trigger(cfg.trigger)
    targets = TargetFeatureSet.from_clouds(net, ds.clouds(d_t), d_t) if d_s else None
    point_dict = cfg.point_cfg.to_dict()
    if skip_point:
        point_dict["iterations"] = 0
    for idx in d_s:
        sample = ds.samples[idx]
        p_cfg = PointOptConfig(**{**point_dict, "seed": seed_for(cfg.point_cfg.seed, "sample", idx)})
        if skip_shape:
            perturbed, record = _perturb_identity_rotation(sample.cloud, targets, net, p_cfg)
        else:
            s_cfg = ShapeOptConfig(
                **{**cfg.shape_cfg.to_dict(), "seed": seed_for(cfg.shape_cfg.seed, "sample", idx)}
            )
            perturbed, record = perturb(sample.cloud, targets, net, s_cfg, p_cfg)
        implant_seed = seed_for(cfg.seed, "implant", idx)
        final_cloud, replaced = implant_trigger(perturbed, trigger, implant_seed)
        sample.cloud = final_cloud
        sample.watermark = {
            "source_index": idx,
            "source_label": int(sample.label),
            "trigger_seed": implant_seed,
            "replaced_indices": [int(i) for i in replaced],
            "perturbation": record.to_dict(),
        }
    ds.watermark = {
        "target_class": cfg.target_class,
        "rate": cfg.rate,
        "rate_denominator": len(ds.indices(split="train")),
        "modified_indices": [int(i) for i in d_s],
        "target_indices": [int(i) for i in d_t],
        "trigger": make_trigger(cfg.trigger).to_dict(),
        "config": cfg.to_dict(),
        "skip_shape": skip_shape,
        "skip_point": skip_point,
    }
    return WatermarkedDataset(
        dataset=ds, modified_indices=list(d_s), target_indices=list(d_t), config=cfg
    )


def _perturb_identity_rotation(cloud, targets, net, point_cfg):
    """Point-stage-only perturbation (the shape stage is skipped entirely)."""
    from .perturb import PerturbationRecord, optimize_point, point_loss
    from .geometry import chamfer_distance

    cloud = as_cloud(cloud)
    start = point_loss(cloud, np.zeros_like(cloud), targets, net, 0.0)
    res = optimize_point(cloud, targets, net, point_cfg)
    record = PerturbationRecord(
        theta=(0.0, 0.0, 0.0),
        start_loss=start,
        shape_final_loss=start,
        final_loss=res.final_loss,
        delta_norm=float(np.linalg.norm(res.delta)),
        chamfer_rotation=0.0,
        chamfer_jitter=chamfer_distance(cloud, res.cloud),
        chamfer_total=chamfer_distance(cloud, res.cloud),
    )
    return res.cloud, record


def iom_metric(wm):
    """Percentage of modified samples whose label mismatches the source label."""
    modified = wm.modified_samples
    if not modified:
        return 0.0
    bad = sum(1 for s in modified if s.label != s.watermark["source_label"])
    return 100.0 * bad / len(modified)
