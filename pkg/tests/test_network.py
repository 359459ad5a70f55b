import math

import numpy as np
import pytest

from pointmark import network
from pointmark.errors import InvalidArgumentError, NumericFailureError
from pointmark.network import (
    NetConfig,
    SurrogateModel,
    TrainConfig,
    forward,
    grad_input,
    grad_params,
    init_params,
    predict_proba,
    train_classifier,
)

SMALL = NetConfig(per_point_widths=(8, 16), head_widths=(8,), class_count=4, seed=3)


def straight_line_forward(params, cfg, x):
    """Independent re-implementation: plain python loops, no shared code."""
    per_point = []
    for point in x:
        act = list(point)
        for i in range(len(cfg.per_point_widths)):
            w = params[f"point{i}.weight"]
            b = params[f"point{i}.bias"]
            act = [
                max(sum(w[o][j] * act[j] for j in range(len(act))) + b[o], 0.0)
                for o in range(w.shape[0])
            ]
        per_point.append(act)
    pooled = [max(row[c] for row in per_point) for c in range(len(per_point[0]))]
    act = pooled
    for i in range(len(cfg.head_widths)):
        w = params[f"head{i}.weight"]
        b = params[f"head{i}.bias"]
        act = [
            max(sum(w[o][j] * act[j] for j in range(len(act))) + b[o], 0.0)
            for o in range(w.shape[0])
        ]
    w = params["output.weight"]
    b = params["output.bias"]
    return [
        sum(w[o][j] * act[j] for j in range(len(act))) + b[o] for o in range(w.shape[0])
    ]


def rel_err(a, b, atol=1e-8):
    diff = abs(a - b)
    if diff <= atol:
        return 0.0
    return diff / max(abs(a), abs(b), 1e-12)


class TestInit:
    def test_deterministic(self):
        p1 = init_params(SMALL)
        p2 = init_params(SMALL)
        for k in p1:
            assert np.array_equal(p1[k], p2[k])

    def test_shapes(self):
        p = init_params(SMALL)
        assert p["point0.weight"].shape == (8, 3)
        assert p["point1.weight"].shape == (16, 8)
        assert p["head0.weight"].shape == (8, 16)
        assert p["output.weight"].shape == (4, 8)

    def test_seed_changes_weights(self):
        p1 = init_params(SMALL)
        p2 = init_params(NetConfig(per_point_widths=(8, 16), head_widths=(8,), class_count=4, seed=4))
        assert any(not np.array_equal(p1[k], p2[k]) for k in p1)


class TestForward:
    def test_permutation_invariance_exact(self):
        params = init_params(SMALL)
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (30, 3))
        perm = rng.permutation(30)
        logits_a, feats_a, _ = forward(params, SMALL, x)
        logits_b, feats_b, _ = forward(params, SMALL, x[perm])
        assert np.array_equal(logits_a, logits_b)
        assert np.array_equal(feats_a, feats_b)

    def test_zero_params_uniform_softmax(self):
        params = {k: np.zeros_like(v) for k, v in init_params(SMALL).items()}
        x = np.random.default_rng(1).uniform(0, 1, (10, 3))
        logits, _, _ = forward(params, SMALL, x)
        assert np.array_equal(logits, np.zeros(4))
        probs = predict_proba(params, SMALL, x)
        assert np.allclose(probs, 0.25)

    def test_matches_straight_line_reimplementation(self):
        params = init_params(SMALL)
        x = np.random.default_rng(2).uniform(-1, 1, (12, 3))
        logits, _, _ = forward(params, SMALL, x)
        ref = straight_line_forward(params, SMALL, x)
        assert np.allclose(logits, ref, atol=1e-10)

    def test_nan_raises_named_layer(self):
        params = init_params(SMALL)
        params["point1.weight"] = params["point1.weight"].copy()
        params["point1.weight"][0, 0] = np.nan
        with pytest.raises(NumericFailureError, match="point1"):
            forward(params, SMALL, np.ones((4, 3)))


class TestPredictProba:
    def test_simplex(self):
        params = init_params(SMALL)
        rng = np.random.default_rng(3)
        for _ in range(20):
            probs = predict_proba(params, SMALL, rng.uniform(0, 1, (15, 3)))
            assert np.all(probs >= 0)
            assert abs(probs.sum() - 1.0) < 1e-9

    def test_closed_form(self):
        # logits (ln2, 0, 0) -> (0.5, 0.25, 0.25)
        probs = network.softmax(np.array([math.log(2), 0.0, 0.0]))
        assert np.allclose(probs, [0.5, 0.25, 0.25])

    def test_exp_normalize_oracle(self):
        params = init_params(SMALL)
        x = np.random.default_rng(5).uniform(0, 1, (9, 3))
        logits, _, _ = forward(params, SMALL, x)
        expected = np.exp(logits) / np.exp(logits).sum()
        assert np.allclose(predict_proba(params, SMALL, x), expected, atol=1e-12)


class TestGradParams:
    def test_matches_finite_differences(self):
        cfg = NetConfig(per_point_widths=(8, 12), head_widths=(8,), class_count=3, seed=7)
        params = init_params(cfg)
        rng = np.random.default_rng(8)
        clouds = rng.uniform(0, 1, (4, 10, 3))
        labels = np.array([0, 2, 1, 0])
        grads = grad_params(params, cfg, clouds, labels)
        h = 1e-5
        probes = 0
        for name in network.param_names(cfg):
            arr = params[name]
            flat = arr.reshape(-1)
            for k in rng.choice(flat.size, size=min(20, flat.size), replace=False):
                orig = flat[k]
                flat[k] = orig + h
                logits_hi, _, _ = network._forward_batch(params, cfg, clouds)
                up = network.cross_entropy(logits_hi, labels)
                flat[k] = orig - h
                logits_lo, _, _ = network._forward_batch(params, cfg, clouds)
                down = network.cross_entropy(logits_lo, labels)
                flat[k] = orig
                fd = (up - down) / (2 * h)
                assert rel_err(grads[name].reshape(-1)[k], fd) < 1e-4
                probes += 1
        assert probes >= 100

    def test_saturated_softmax_near_zero_gradient(self):
        cfg = NetConfig(per_point_widths=(4,), head_widths=(4,), class_count=2, seed=1)
        params = init_params(cfg)
        # blow up the output layer so the true class saturates
        x = np.abs(np.random.default_rng(2).uniform(0.5, 1, (6, 3)))
        logits, feats, _ = forward(params, cfg, x)
        params["output.weight"] = np.zeros_like(params["output.weight"])
        params["output.bias"] = np.array([50.0, -50.0])
        grads = grad_params(params, cfg, x[None], [0])
        total = sum(np.abs(g).sum() for g in grads.values())
        assert total < 1e-6

    def test_duplicate_sample_mean_invariance(self):
        cfg = SMALL
        params = init_params(cfg)
        x = np.random.default_rng(4).uniform(0, 1, (11, 3))
        g1 = grad_params(params, cfg, x[None], [1])
        g2 = grad_params(params, cfg, np.stack([x, x]), [1, 1])
        for k in g1:
            assert np.allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)

    def test_bad_label_rejected(self):
        params = init_params(SMALL)
        with pytest.raises(InvalidArgumentError):
            grad_params(params, SMALL, np.ones((1, 5, 3)), [9])


class TestGradInput:
    def test_constant_loss_zero_gradient(self):
        params = init_params(SMALL)
        x = np.random.default_rng(6).uniform(0, 1, (14, 3))
        g = grad_input(params, SMALL, lambda f: (1.0, np.zeros_like(f)), x)
        assert np.array_equal(g, np.zeros_like(x))

    def test_matches_finite_differences(self):
        cfg = SMALL
        params = init_params(cfg)
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, (14, 3))
        target = rng.normal(size=cfg.feature_dim)

        def tail(f):
            diff = f - target
            n = np.linalg.norm(diff)
            return n, diff / n if n > 0 else np.zeros_like(diff)

        g = grad_input(params, cfg, tail, x)
        h = 1e-5
        checked = 0
        for _ in range(10):
            i = int(rng.integers(0, x.shape[0]))
            j = int(rng.integers(0, 3))
            hi = x.copy()
            lo = x.copy()
            hi[i, j] += h
            lo[i, j] -= h
            f_hi = tail(forward(params, cfg, hi)[1])[0]
            f_lo = tail(forward(params, cfg, lo)[1])[0]
            fd = (f_hi - f_lo) / (2 * h)
            assert rel_err(g[i, j], fd) < 1e-4
            checked += 1
        assert checked == 10

    def test_dominated_point_zero_rows(self):
        params = init_params(SMALL)
        rng = np.random.default_rng(9)
        x = rng.uniform(0, 1, (10, 3))
        x_dup = np.vstack([x, x[0]])  # later duplicate loses every argmax tie
        tail = lambda f: (float(f.sum()), np.ones_like(f))
        g = grad_input(params, SMALL, tail, x_dup)
        assert np.array_equal(g[-1], np.zeros(3))


class TestTraining:
    def make_toy(self, n_per_class=20, m=16, seed=0):
        rng = np.random.default_rng(seed)
        clouds = []
        labels = []
        for label, center in ((0, 0.1), (1, 0.9)):
            for _ in range(n_per_class):
                clouds.append(center + 0.05 * rng.normal(size=(m, 3)))
                labels.append(label)
        return np.array(clouds), np.array(labels)

    def test_zero_epochs_returns_initial(self):
        cfg = SMALL
        clouds, labels = self.make_toy()
        labels = labels % cfg.class_count
        result = train_classifier(cfg, clouds, labels, TrainConfig(epochs=0, seed=1))
        init = init_params(cfg)
        for k in init:
            assert np.array_equal(result.params[k], init[k])

    def test_deterministic(self):
        cfg = NetConfig(per_point_widths=(8,), head_widths=(6,), class_count=2, seed=2)
        clouds, labels = self.make_toy()
        tcfg = TrainConfig(epochs=5, batch_size=8, seed=11)
        r1 = train_classifier(cfg, clouds, labels, tcfg)
        r2 = train_classifier(cfg, clouds, labels, tcfg)
        for k in r1.params:
            assert np.array_equal(r1.params[k], r2.params[k])
        assert r1.history == r2.history

    def test_separable_toy_converges(self):
        cfg = NetConfig(per_point_widths=(8,), head_widths=(6,), class_count=2, seed=2)
        clouds, labels = self.make_toy()
        result = train_classifier(cfg, clouds, labels, TrainConfig(epochs=50, batch_size=8, seed=3))
        assert result.history[-1]["accuracy"] >= 0.99
        assert len(result.history) == 50

    def test_divergence_raises(self):
        cfg = NetConfig(per_point_widths=(4,), head_widths=(4,), class_count=2, seed=0)
        clouds, labels = self.make_toy(n_per_class=4)
        with np.errstate(all="ignore"), pytest.raises(NumericFailureError):
            train_classifier(
                cfg, clouds * 1e150, labels, TrainConfig(epochs=8, learning_rate=1e250, seed=0)
            )


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = SMALL
        params = init_params(cfg)
        path = tmp_path / "model.json"
        network.save_model(path, cfg, params)
        cfg2, params2 = network.load_model(path)
        assert cfg2 == cfg
        for k in params:
            assert np.array_equal(params[k], params2[k])

    def test_rejects_wrong_kind(self, tmp_path):
        path = tmp_path / "bogus.json"
        path.write_text('{"kind": "other"}')
        with pytest.raises(InvalidArgumentError):
            network.load_model(path)


class TestSurrogateModel:
    def test_batch_matches_single(self):
        cfg = SMALL
        model = SurrogateModel(cfg, init_params(cfg))
        rng = np.random.default_rng(12)
        xs = rng.uniform(0, 1, (5, 9, 3))
        batch = model.features_batch(xs)
        for i in range(5):
            assert np.allclose(batch[i], model.features(xs[i]), atol=1e-12)

    def test_feature_loss_gradient_matches_grad_input(self):
        cfg = SMALL
        params = init_params(cfg)
        model = SurrogateModel(cfg, params)
        x = np.random.default_rng(13).uniform(0, 1, (8, 3))
        tail = lambda f: (float((f ** 2).sum()), 2.0 * f)
        loss, g = model.feature_loss_gradient(x, tail)
        assert np.allclose(g, grad_input(params, cfg, tail, x), atol=1e-15)
        assert loss == pytest.approx(float((model.features(x) ** 2).sum()))
