import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointmark import geometry
from pointmark.errors import DegenerateInputError, InvalidArgumentError


def brute_force_chamfer(a, b):
    fwd = 0.0
    for p in a:
        fwd += min(sum((p[i] - q[i]) ** 2 for i in range(3)) for q in b)
    bwd = 0.0
    for q in b:
        bwd += min(sum((p[i] - q[i]) ** 2 for i in range(3)) for p in a)
    return fwd / len(a) + bwd / len(b)


class TestEulerRotation:
    def test_identity(self):
        assert np.array_equal(geometry.euler_rotation_matrix((0, 0, 0)), np.eye(3))

    def test_quarter_turn_about_z(self):
        s = geometry.euler_rotation_matrix((math.pi / 2, 0, 0))
        expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        assert np.allclose(s, expected, atol=1e-15)

    def test_orthonormal_det_plus_one(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            theta = rng.uniform(-10, 10, 3)
            s = geometry.euler_rotation_matrix(theta)
            assert np.allclose(s.T @ s, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(s) - 1.0) < 1e-9

    def test_derivatives_match_finite_differences(self):
        rng = np.random.default_rng(11)
        h = 1e-5
        for _ in range(100):
            theta = rng.uniform(0, 2 * math.pi, 3)
            derivs = geometry.euler_rotation_derivatives(theta)
            for axis in range(3):
                lo = theta.copy()
                hi = theta.copy()
                lo[axis] -= h
                hi[axis] += h
                fd = (
                    geometry.euler_rotation_matrix(hi) - geometry.euler_rotation_matrix(lo)
                ) / (2 * h)
                rel = np.linalg.norm(derivs[axis] - fd) / max(np.linalg.norm(fd), 1e-12)
                assert rel < 1e-6

    def test_nonfinite_angle_rejected(self):
        with pytest.raises(InvalidArgumentError):
            geometry.euler_rotation_matrix((math.nan, 0, 0))
        with pytest.raises(InvalidArgumentError):
            geometry.euler_rotation_matrix((0, math.inf, 0))

    @given(st.lists(st.floats(-20, 20), min_size=3, max_size=3))
    @settings(max_examples=50, deadline=None)
    def test_rotation_always_orthonormal(self, angles):
        s = geometry.euler_rotation_matrix(angles)
        assert np.allclose(s.T @ s, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(s) - 1.0) < 1e-9


class TestRotateCloud:
    def test_zero_angles_exact_noop(self):
        x = np.random.default_rng(0).uniform(0, 1, (17, 3))
        assert np.array_equal(geometry.rotate_cloud(x, (0.0, 0.0, 0.0)), x)

    def test_single_point_fixed(self):
        x = np.array([[0.3, 0.7, 0.1]])
        out = geometry.rotate_cloud(x, (1.0, -2.0, 0.5))
        assert np.allclose(out, x, atol=1e-15)

    def test_isometry_and_centroid(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.normal(size=(40, 3))
            theta = rng.uniform(0, 2 * math.pi, 3)
            y = geometry.rotate_cloud(x, theta)
            assert y.shape == x.shape
            dx = geometry.pairwise_distance_matrix(x)
            dy = geometry.pairwise_distance_matrix(y)
            assert np.allclose(dx, dy, atol=1e-9)
            assert np.allclose(x.mean(axis=0), y.mean(axis=0), atol=1e-9)


class TestNormalizeCloud:
    def test_already_normalized_unchanged(self):
        x = np.array(
            [[0, 0, 0], [1, 1, 1], [0.25, 0.5, 0.75], [1, 0, 0.5], [0, 1, 0.25]],
            dtype=float,
        )
        assert np.array_equal(geometry.normalize_cloud(x), x)

    def test_short_axes_centered(self):
        x = np.array([[0, 0, 0], [2, 0, 0]], dtype=float)
        out = geometry.normalize_cloud(x)
        assert np.allclose(out, [[0, 0.5, 0.5], [1, 0.5, 0.5]], atol=1e-15)

    def test_random_cloud_bounding_box(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.normal(size=(30, 3)) * rng.uniform(0.1, 10)
            out = geometry.normalize_cloud(x)
            lo = out.min(axis=0)
            hi = out.max(axis=0)
            assert np.all(lo >= -1e-12) and np.all(hi <= 1 + 1e-12)
            assert abs((hi - lo).max() - 1.0) < 1e-12

    def test_degenerate_cloud_rejected(self):
        with pytest.raises(DegenerateInputError):
            geometry.normalize_cloud(np.ones((5, 3)))


class TestChamfer:
    def test_self_distance_zero(self):
        x = np.random.default_rng(1).normal(size=(12, 3))
        assert geometry.chamfer_distance(x, x) == 0.0

    def test_two_single_points(self):
        assert geometry.chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(2.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(32, 3))
        b = rng.normal(size=(32, 3))
        assert geometry.chamfer_distance(a, b) == pytest.approx(
            brute_force_chamfer(a, b), abs=1e-12
        )

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(rng.integers(1, 20), 3))
        b = rng.normal(size=(rng.integers(1, 20), 3))
        assert geometry.chamfer_distance(a, b) == pytest.approx(
            geometry.chamfer_distance(b, a), abs=1e-12
        )

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            geometry.chamfer_distance(np.zeros((0, 3)), np.zeros((1, 3)))


class TestKnnMeanDistances:
    def test_three_collinear(self):
        x = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
        assert np.allclose(geometry.knn_mean_distances(x, 1), [1, 1, 1])

    def test_unit_square_k2(self):
        x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        assert np.allclose(geometry.knn_mean_distances(x, 2), [1, 1, 1, 1])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(200, 3))
        got = geometry.knn_mean_distances(x, 20)
        expected = []
        for i in range(200):
            dists = sorted(
                math.dist(x[i], x[j]) for j in range(200) if j != i
            )
            expected.append(sum(dists[:20]) / 20)
        assert np.allclose(got, expected, atol=1e-12)

    def test_k_too_large_rejected(self):
        with pytest.raises(InvalidArgumentError):
            geometry.knn_mean_distances(np.zeros((5, 3)), 5)


class TestFeatureDistance:
    def test_zero_for_equal(self):
        u = np.arange(8.0)
        assert geometry.feature_distance(u, u) == 0.0

    def test_three_four_five(self):
        assert geometry.feature_distance([3, 4], [0, 0]) == pytest.approx(5.0)

    def test_matches_componentwise(self):
        rng = np.random.default_rng(13)
        u = rng.normal(size=128)
        v = rng.normal(size=128)
        expected = math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))
        assert geometry.feature_distance(u, v) == pytest.approx(expected, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            geometry.feature_distance([1, 2], [1, 2, 3])
