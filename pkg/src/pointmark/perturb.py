"""Feature perturbation: rotate, then jitter, a source cloud so its
embedding moves toward the target class.

The shape stage searches Euler angles (multi-start, then adaptive-moment
descent through the analytic rotation derivatives); the point stage runs
normalized-gradient descent with accumulated momentum on per-point
offsets, with an L2 penalty keeping the jitter small.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError
from .geometry import (
    as_cloud,
    chamfer_distance,
    euler_rotation_derivatives,
    euler_rotation_matrix,
    rotate_cloud,
)
from .optim import AdamState
from .rng import rng_for

_ZERO_NORM_GUARD = 1e-12


@dataclass
class ShapeOptConfig:
    starts: int = 30
    iterations: int = 30
    learning_rate: float = 0.025
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.starts < 1:
            raise InvalidArgumentError("starts must be >= 1")
        if self.iterations < 0:
            raise InvalidArgumentError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning rate must be > 0")

    def to_dict(self):
        return {
            "starts": self.starts,
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "lr_decay_every": self.lr_decay_every,
            "lr_decay_factor": self.lr_decay_factor,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PointOptConfig:
    eta: float = 50.0
    iterations: int = 20
    step_size: float = 0.0025
    momentum_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise InvalidArgumentError("eta must be >= 0")
        if self.iterations < 0:
            raise InvalidArgumentError("iterations must be >= 0")
        if self.step_size <= 0:
            raise InvalidArgumentError("step size must be > 0")
        if self.momentum_decay < 0:
            raise InvalidArgumentError("momentum decay must be >= 0")

    def to_dict(self):
        return {
            "eta": self.eta,
            "iterations": self.iterations,
            "step_size": self.step_size,
            "momentum_decay": self.momentum_decay,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TargetFeatureSet:
    """Cached embeddings of the target-class reference samples."""

    features: np.ndarray  # (T, d)
    source_indices: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidArgumentError("target feature set must be a non-empty (T, d) array")

    @classmethod
    def from_clouds(cls, net, clouds, source_indices=()):
        feats = net.features_batch(np.asarray(clouds, dtype=np.float64))
        return cls(features=feats, source_indices=list(source_indices))

    @property
    def mean_feature(self):
        return self.features.mean(axis=0)


def mean_feature_distance(features, targets):
    """Mean Euclidean distance to the target features and its gradient."""
    f = np.asarray(features, dtype=np.float64)
    diff = f[None, :] - targets.features
    norms = np.linalg.norm(diff, axis=1)
    value = float(norms.mean())
    safe = np.where(norms > _ZERO_NORM_GUARD, norms, 1.0)
    grad = (diff / safe[:, None]).mean(axis=0)
    grad[~np.isfinite(grad)] = 0.0
    return value, grad


def shape_loss(x_s, theta, targets, net):
    """Mean target feature distance of the rotated source cloud."""
    rotated = rotate_cloud(x_s, theta)
    value, _ = mean_feature_distance(net.features(rotated), targets)
    return value


def _shape_loss_and_grad(x_s, theta, targets, net):
    theta = np.asarray(theta, dtype=np.float64)
    centroid = x_s.mean(axis=0)
    centered = x_s - centroid
    rotated = centered @ euler_rotation_matrix(theta) + centroid
    loss, dcloud = net.feature_loss_gradient(rotated, lambda f: mean_feature_distance(f, targets))
    grad = np.empty(3)
    for axis, ds in enumerate(euler_rotation_derivatives(theta)):
        grad[axis] = float(np.vdot(dcloud, centered @ ds))
    return loss, grad


@dataclass
class ShapeOptResult:
    theta: np.ndarray
    cloud: np.ndarray
    start_loss: float
    final_loss: float
    trace: list


def optimize_shape(x_s, targets, net, cfg):
    """Multi-start angle search followed by Adam descent on the angles.

    Returns the best iterate seen (never worse than the best start).
    """
    x_s = as_cloud(x_s)
    rng = rng_for("shape-opt", cfg.seed)
    starts = rng.uniform(0.0, 2.0 * math.pi, size=(cfg.starts, 3))
    centroid = x_s.mean(axis=0)
    centered = x_s - centroid
    rotated_starts = np.stack([centered @ euler_rotation_matrix(t) + centroid for t in starts])
    feats = net.features_batch(rotated_starts)
    start_losses = [mean_feature_distance(f, targets)[0] for f in feats]
    best_start = int(np.argmin(start_losses))
    theta = starts[best_start].copy()
    start_loss = start_losses[best_start]

    best_theta = theta.copy()
    best_loss = start_loss
    trace = [start_loss]
    adam = AdamState([theta], lr=cfg.learning_rate)
    for t in range(1, cfg.iterations + 1):
        loss, grad = _shape_loss_and_grad(x_s, theta, targets, net)
        if loss < best_loss:
            best_loss = loss
            best_theta = theta.copy()
        lr = cfg.learning_rate * cfg.lr_decay_factor ** ((t - 1) // cfg.lr_decay_every)
        adam.step([theta], [grad], lr=lr)
        trace.append(shape_loss(x_s, theta, targets, net))
    final = trace[-1]
    if final < best_loss:
        best_loss = final
        best_theta = theta.copy()
    return ShapeOptResult(
        theta=best_theta,
        cloud=rotate_cloud(x_s, best_theta),
        start_loss=start_loss,
        final_loss=best_loss,
        trace=trace,
    )


def point_loss(x_rot, delta, targets, net, eta):
    """Mean target feature distance of (x_rot + delta) plus eta * ||delta||_2."""
    x_rot = as_cloud(x_rot)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != x_rot.shape:
        raise InvalidArgumentError(f"delta shape {delta.shape} != cloud shape {x_rot.shape}")
    value, _ = mean_feature_distance(net.features(x_rot + delta), targets)
    return value + eta * float(np.linalg.norm(delta))


@dataclass
class PointOptResult:
    cloud: np.ndarray
    delta: np.ndarray
    final_loss: float
    trace: list


def optimize_point(x_rot, targets, net, cfg):
    """Momentum-normalized gradient descent on per-point offsets.

    Each step adds the unit-normalized penalized gradient to a momentum
    buffer scaled by the decay factor, then moves the offsets one step
    against the buffer; a zero-norm gradient contributes nothing.
    """
    x_rot = as_cloud(x_rot)
    delta = np.zeros_like(x_rot)
    momentum = np.zeros_like(x_rot)
    trace = [point_loss(x_rot, delta, targets, net, cfg.eta)]
    for _ in range(cfg.iterations):
        feat_loss, feat_grad = net.feature_loss_gradient(
            x_rot + delta, lambda f: mean_feature_distance(f, targets)
        )
        dnorm = float(np.linalg.norm(delta))
        if dnorm > _ZERO_NORM_GUARD:
            grad = feat_grad + cfg.eta * delta / dnorm
        else:
            grad = feat_grad.copy()
        gnorm = float(np.linalg.norm(grad))
        momentum *= cfg.momentum_decay
        if gnorm > _ZERO_NORM_GUARD:
            momentum += grad / gnorm
        delta -= cfg.step_size * momentum
        trace.append(point_loss(x_rot, delta, targets, net, cfg.eta))
    return PointOptResult(
        cloud=x_rot + delta, delta=delta, final_loss=trace[-1], trace=trace
    )


@dataclass
class PerturbationRecord:
    theta: tuple
    start_loss: float
    shape_final_loss: float
    final_loss: float
    delta_norm: float
    chamfer_rotation: float
    chamfer_jitter: float
    chamfer_total: float

    def to_dict(self):
        return {
            "theta": [float(v) for v in self.theta],
            "start_loss": self.start_loss,
            "shape_final_loss": self.shape_final_loss,
            "final_loss": self.final_loss,
            "delta_norm": self.delta_norm,
            "chamfer_rotation": self.chamfer_rotation,
            "chamfer_jitter": self.chamfer_jitter,
            "chamfer_total": self.chamfer_total,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            theta=tuple(d["theta"]),
            start_loss=d["start_loss"],
            shape_final_loss=d["shape_final_loss"],
            final_loss=d["final_loss"],
            delta_norm=d["delta_norm"],
            chamfer_rotation=d["chamfer_rotation"],
            chamfer_jitter=d["chamfer_jitter"],
            chamfer_total=d["chamfer_total"],
        )


def perturb(x_s, targets, net, shape_cfg, point_cfg):
    """Full perturbation: angle search then point jitter, with provenance."""
    x_s = as_cloud(x_s)
    shape_res = optimize_shape(x_s, targets, net, shape_cfg)
    point_res = optimize_point(shape_res.cloud, targets, net, point_cfg)
    record = PerturbationRecord(
        theta=tuple(float(v) for v in shape_res.theta),
        start_loss=shape_res.start_loss,
        shape_final_loss=shape_res.final_loss,
        final_loss=point_res.final_loss,
        delta_norm=float(np.linalg.norm(point_res.delta)),
        chamfer_rotation=chamfer_distance(x_s, shape_res.cloud),
        chamfer_jitter=chamfer_distance(shape_res.cloud, point_res.cloud),
        chamfer_total=chamfer_distance(x_s, point_res.cloud),
    )
    return point_res.cloud, record


def relative_distance(x_m, targets, net):
    """Normalized distance between mean embeddings: ||f̄(x) - f̄(t)|| / ||f̄(t)||.

    Accepts a single (M, 3) cloud or a batch of clouds (the mean of their
    embeddings is used).
    """
    arr = np.asarray(x_m, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidArgumentError(f"expected (M,3) cloud or (B,M,3) batch, got {arr.shape}")
    mean_feat = net.features_batch(arr).mean(axis=0)
    target_mean = targets.mean_feature
    denom = float(np.linalg.norm(target_mean))
    if denom <= _ZERO_NORM_GUARD:
        raise DegenerateInputError("target mean feature has zero norm")
    return float(np.linalg.norm(mean_feat - target_mean)) / denom
