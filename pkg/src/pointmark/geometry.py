"""Point-cloud containers, Euler rotations, distances and neighborhood stats.

Conventions used throughout the package:

* a point cloud is a float64 array of shape (M, 3), rows are points;
* Euler angles (psi, phi, gamma) compose as S = Rz(psi) @ Ry(phi) @ Rx(gamma);
* clouds rotate about their centroid, ``x' = (x - c) @ S + c``;
* nearest-neighbor queries are exact brute force (desk-scale clouds).
"""

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError


def as_cloud(points):
    """Validate and return a point cloud as a float64 (M, 3) array.

    Raises InvalidArgumentError on empty input, wrong shape, or
    non-finite coordinates.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise InvalidArgumentError(f"point cloud must have shape (M, 3), got {x.shape}")
    if x.shape[0] < 1:
        raise InvalidArgumentError("point cloud must contain at least one point")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("point cloud contains non-finite coordinates")
    return x


def _check_angles(theta):
    t = np.asarray(theta, dtype=np.float64).reshape(-1)
    if t.shape != (3,):
        raise InvalidArgumentError(f"expected 3 Euler angles, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise InvalidArgumentError("Euler angles must be finite")
    return t


def _axis_rotations(theta):
    psi, phi, gamma = theta
    cz, sz = np.cos(psi), np.sin(psi)
    cy, sy = np.cos(phi), np.sin(phi)
    cx, sx = np.cos(gamma), np.sin(gamma)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz, ry, rx


def euler_rotation_matrix(theta):
    """Rotation matrix S = Rz(psi) @ Ry(phi) @ Rx(gamma), orthonormal, det +1."""
    rz, ry, rx = _axis_rotations(_check_angles(theta))
    return rz @ ry @ rx


def euler_rotation_derivatives(theta):
    """Analytic partials (dS/dpsi, dS/dphi, dS/dgamma) as three 3x3 arrays."""
    t = _check_angles(theta)
    psi, phi, gamma = t
    rz, ry, rx = _axis_rotations(t)
    cz, sz = np.cos(psi), np.sin(psi)
    cy, sy = np.cos(phi), np.sin(phi)
    cx, sx = np.cos(gamma), np.sin(gamma)
    drz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    return drz @ ry @ rx, rz @ dry @ rx, rz @ ry @ drx


def rotate_cloud(x, theta):
    """Rotate a cloud about its centroid; point count and order preserved."""
    x = as_cloud(x)
    t = _check_angles(theta)
    if not t.any():
        # identity rotation is an exact no-op (avoids centroid round-trip noise)
        return x.copy()
    c = x.mean(axis=0)
    return (x - c) @ euler_rotation_matrix(t) + c


def normalize_cloud(x):
    """Map a cloud into [0,1]^3: uniform scale, longest axis spans [0,1] exactly.

    Shorter axes are centered. Raises DegenerateInputError when the cloud
    has zero spatial extent on every axis.
    """
    x = as_cloud(x)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    extent = hi - lo
    widest = extent.max()
    if widest <= 0.0:
        raise DegenerateInputError("cloud has zero extent; cannot normalize")
    scale = 1.0 / widest
    offset = (1.0 - extent * scale) / 2.0
    # clip: rounding can spill an ulp past the box bounds
    return np.clip((x - lo) * scale + offset, 0.0, 1.0)


def chamfer_distance(a, b):
    """Symmetric squared Chamfer distance between two clouds.

    Mean over a of the squared nearest distance to b, plus the same with
    the roles swapped.
    """
    a = as_cloud(a)
    b = as_cloud(b)
    d2 = _pairwise_sq_dists(a, b)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def _pairwise_sq_dists(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn_mean_distances(x, k):
    """Mean Euclidean distance from each point to its k nearest other points."""
    x = as_cloud(x)
    m = x.shape[0]
    if not 1 <= k < m:
        raise InvalidArgumentError(f"need M > k >= 1, got M={m}, k={k}")
    d2 = _pairwise_sq_dists(x, x)
    np.fill_diagonal(d2, np.inf)
    part = np.partition(d2, k - 1, axis=1)[:, :k]
    return np.sqrt(part).mean(axis=1)


def feature_distance(u, v):
    """Euclidean distance between two equal-dimension feature vectors."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise InvalidArgumentError(f"feature dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.linalg.norm(u - v))


def pairwise_distance_matrix(x):
    """Full M x M Euclidean distance matrix (used by isometry checks)."""
    x = as_cloud(x)
    return np.sqrt(np.maximum(_pairwise_sq_dists(x, x), 0.0))
