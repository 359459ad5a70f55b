"""Watermark-removal attacks run by a malicious dataset user.

Augmentation (random rotation / Gaussian noise), statistical outlier
removal, fine-tuning on benign data, and an adaptive trainer that
periodically rotates every training sample to push its embedding away
from itself (feature disentangling).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .geometry import (
    as_cloud,
    euler_rotation_derivatives,
    euler_rotation_matrix,
    knn_mean_distances,
    rotate_cloud,
)
from .network import SurrogateModel, train_classifier
from .optim import AdamState
from .perturb import TargetFeatureSet, mean_feature_distance
from .rng import rng_for, seed_for

ATTACK_KINDS = ("rotation-aug", "noise-aug", "sor", "finetune", "adaptive")


@dataclass
class AttackConfig:
    kind: str
    noise_sigma: float = 0.01
    sor_k: int = 20
    sor_mult: float = 1.0
    finetune_fraction: float = 0.2
    finetune_epochs: int | None = None  # None: same as the original training
    adaptive_period: int = 10
    adaptive_starts: int = 5
    adaptive_iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidArgumentError(f"unknown attack kind {self.kind!r}")
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise sigma must be >= 0")
        if self.sor_mult <= 0:
            raise InvalidArgumentError("SOR threshold multiplier must be > 0")
        if not 0 < self.finetune_fraction <= 1:
            raise InvalidArgumentError("finetune fraction must be in (0, 1]")

    def to_dict(self):
        return {
            "kind": self.kind,
            "noise_sigma": self.noise_sigma,
            "sor_k": self.sor_k,
            "sor_mult": self.sor_mult,
            "finetune_fraction": self.finetune_fraction,
            "finetune_epochs": self.finetune_epochs,
            "adaptive_period": self.adaptive_period,
            "adaptive_starts": self.adaptive_starts,
            "adaptive_iterations": self.adaptive_iterations,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def random_euler_angles(rng, low=-math.pi, high=math.pi):
    return rng.uniform(low, high, size=3)


def augment_rotation(x, seed):
    """Random rotation with angles uniform in (-pi, pi)^3."""
    rng = rng_for("aug-rot", seed)
    return rotate_cloud(x, random_euler_angles(rng))


def augment_noise(x, sigma, seed):
    """Add i.i.d. zero-mean Gaussian offsets to every coordinate."""
    if sigma < 0:
        raise InvalidArgumentError("sigma must be >= 0")
    x = as_cloud(x)
    if sigma == 0:
        return x.copy()
    rng = rng_for("aug-noise", seed)
    return x + rng.normal(scale=sigma, size=x.shape)


def sor_filter(x, k=20, threshold_mult=1.0):
    """Statistical outlier removal.

    Drops point i iff its mean distance to the k nearest neighbors exceeds
    mean + threshold_mult * std over all such means (population std).
    Returns (kept cloud, removed indices).
    """
    x = as_cloud(x)
    means = knn_mean_distances(x, k)
    threshold = means.mean() + threshold_mult * means.std()
    removed = np.flatnonzero(means > threshold)
    kept = np.delete(x, removed, axis=0)
    return kept, removed


def resample_to_count(x, count, seed):
    """Pad a cloud back to `count` points by duplicating kept points.

    Duplicates never change max-pool features, so this is the losslessly
    batched way to train on SOR-filtered clouds of uneven size.
    """
    x = as_cloud(x)
    if x.shape[0] >= count:
        return x[:count]
    rng = rng_for("resample", seed)
    extra = rng.choice(x.shape[0], size=count - x.shape[0], replace=True)
    return np.vstack([x, x[extra]])


def finetune(params, cfg, clouds, labels, tcfg, fraction=0.2, seed=0):
    """Continue training on a seeded benign subset; fresh optimizer moments."""
    clouds = np.asarray(clouds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = clouds.shape[0]
    take = max(1, round(fraction * n)) if fraction < 1.0 else n
    rng = rng_for("finetune-select", seed)
    subset = np.sort(rng.choice(n, size=take, replace=False))
    return train_classifier(cfg, clouds[subset], labels[subset], tcfg, initial_params=params)


def adaptive_disentangle_step(x, net, starts=5, iterations=10, learning_rate=0.025, seed=0):
    """Rotate x to maximize the feature distance to its own embedding.

    Gradient ascent on the angles with multi-start, best iterate kept.
    A zero iteration budget returns the cloud unrotated (distance 0).
    Returns (rotated cloud, achieved feature distance).
    """
    x = as_cloud(x)
    if iterations == 0:
        return x.copy(), 0.0
    own = TargetFeatureSet(features=net.features(x)[None, :])
    rng = rng_for("disentangle", seed)
    thetas = rng.uniform(0.0, 2.0 * math.pi, size=(starts, 3))
    centroid = x.mean(axis=0)
    centered = x - centroid
    rotated = np.stack([centered @ euler_rotation_matrix(t) + centroid for t in thetas])
    dists = [mean_feature_distance(f, own)[0] for f in net.features_batch(rotated)]
    best = int(np.argmax(dists))
    theta = thetas[best].copy()
    best_theta = theta.copy()
    best_dist = dists[best]
    adam = AdamState([theta], lr=learning_rate)
    for _ in range(iterations):
        cloud = centered @ euler_rotation_matrix(theta) + centroid
        dist, dcloud = net.feature_loss_gradient(
            cloud, lambda f: mean_feature_distance(f, own)
        )
        if dist > best_dist:
            best_dist = dist
            best_theta = theta.copy()
        grad = np.empty(3)
        for axis, ds in enumerate(euler_rotation_derivatives(theta)):
            grad[axis] = float(np.vdot(dcloud, centered @ ds))
        adam.step([theta], [-grad])  # ascent: move with the gradient
    final_dist = mean_feature_distance(net.features(rotate_cloud(x, theta)), own)[0]
    if final_dist > best_dist:
        best_dist = final_dist
        best_theta = theta.copy()
    return rotate_cloud(x, best_theta), best_dist


def adaptive_train(cfg, clouds, labels, tcfg, acfg):
    """Training with a periodic feature-disentangling pass.

    Every `period` epochs each training cloud is replaced (cumulatively)
    by a rotation maximizing its feature distance under the in-training
    model at that moment.
    """
    clouds = np.asarray(clouds, dtype=np.float64)

    def hook(epoch, current, live_params):
        if epoch == 0 or epoch % acfg.adaptive_period != 0:
            return None
        net = SurrogateModel(cfg, live_params)
        out = np.empty_like(current)
        for i in range(current.shape[0]):
            out[i], _ = adaptive_disentangle_step(
                current[i],
                net,
                starts=acfg.adaptive_starts,
                iterations=acfg.adaptive_iterations,
                seed=seed_for(acfg.seed, "adaptive", epoch, i),
            )
        return out

    return train_classifier(cfg, clouds, labels, tcfg, epoch_hook=hook)
