import numpy as np
import pytest
import scipy.stats

from pointmark import watermark as wm
from pointmark.errors import InvalidArgumentError
from pointmark.perturb import PointOptConfig, ShapeOptConfig
from pointmark.watermark import (
    TriggerPattern,
    WatermarkConfig,
    implant_trigger,
    iom_metric,
    make_cube_trigger,
    make_sphere_trigger,
    select_sets,
    watermark_dataset,
)


def light_config(**overrides):
    base = dict(
        target_class=0,
        rate=0.05,
        trigger={"shape": "sphere", "center": (0.3, 0.3, 0.3), "radius": 0.025, "count": 8, "seed": 1},
        target_set_size=6,
        seed=3,
        shape_cfg=ShapeOptConfig(starts=3, iterations=3, seed=3),
        point_cfg=PointOptConfig(iterations=3, seed=3),
    )
    base.update(overrides)
    return WatermarkConfig(**base)


class TestSphereTrigger:
    def test_default_on_sphere_surface(self):
        trig = make_sphere_trigger()
        assert len(trig) == 50
        dists = np.linalg.norm(trig.points - np.array([0.3, 0.3, 0.3]), axis=1)
        assert np.allclose(dists, 0.025, atol=1e-9)

    def test_single_point(self):
        trig = make_sphere_trigger(count=1, seed=4)
        assert trig.points.shape == (1, 3)

    def test_distinct_seeds_distinct_points(self):
        a = make_sphere_trigger(seed=0)
        b = make_sphere_trigger(seed=1)
        assert not np.array_equal(a.points, b.points)
        assert a.center == b.center and a.radius == b.radius

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            make_sphere_trigger(radius=0.0)
        with pytest.raises(InvalidArgumentError):
            make_sphere_trigger(count=0)
        with pytest.raises(InvalidArgumentError):
            TriggerPattern(
                points=np.array([[1.0, 1.0, 1.0]]), center=(0, 0, 0), radius=0.1, seed=0
            )

    def test_round_trip(self):
        trig = make_sphere_trigger(count=5, seed=9)
        back = TriggerPattern.from_dict(trig.to_dict())
        assert np.array_equal(trig.points, back.points)
        assert back.shape == "sphere"


class TestCubeTrigger:
    def test_on_cube_surface(self):
        trig = make_cube_trigger(center=(0.3, 0.3, 0.3), side=0.05, count=50, seed=2)
        rel = np.abs(trig.points - np.array([0.3, 0.3, 0.3]))
        # every point touches a face and stays inside the half-side box
        assert np.all(rel.max(axis=1) <= 0.025 + 1e-12)
        assert np.allclose(rel.max(axis=1), 0.025, atol=1e-12)


class TestImplantTrigger:
    def test_counts_and_content(self):
        rng = np.random.default_rng(0)
        cloud = rng.uniform(0, 1, (1024, 3))
        trig = make_sphere_trigger(count=50, seed=3)
        out, replaced = implant_trigger(cloud, trig, seed=5)
        assert out.shape == cloud.shape
        assert len(replaced) == 50
        assert np.array_equal(out[replaced], trig.points)
        untouched = np.setdiff1d(np.arange(1024), replaced)
        assert np.array_equal(out[untouched], cloud[untouched])

    def test_full_replacement(self):
        trig = make_sphere_trigger(count=10, seed=1)
        cloud = np.random.default_rng(2).uniform(0, 1, (10, 3))
        out, replaced = implant_trigger(cloud, trig, seed=0)
        assert sorted(replaced) == list(range(10))
        assert np.array_equal(np.sort(out, axis=0), np.sort(trig.points, axis=0))

    def test_deterministic(self):
        cloud = np.random.default_rng(4).uniform(0, 1, (100, 3))
        trig = make_sphere_trigger(count=9, seed=0)
        _, r1 = implant_trigger(cloud, trig, seed=7)
        _, r2 = implant_trigger(cloud, trig, seed=7)
        assert np.array_equal(r1, r2)

    def test_too_small_cloud(self):
        trig = make_sphere_trigger(count=10, seed=0)
        with pytest.raises(InvalidArgumentError):
            implant_trigger(np.zeros((5, 3)), trig, seed=0)


class TestSelectSets:
    def test_arithmetic_and_constraint(self, tiny_dataset):
        cfg = light_config(rate=0.05)
        d_s, d_t = select_sets(tiny_dataset, cfg)
        n_train = len(tiny_dataset.indices(split="train"))
        assert len(d_s) == round(0.05 * n_train)
        assert all(tiny_dataset.samples[i].label != 0 for i in d_s)
        assert all(tiny_dataset.samples[i].label == 0 for i in d_t)
        assert all(tiny_dataset.samples[i].split == "train" for i in d_s)

    def test_rate_too_large(self, tiny_dataset):
        with pytest.raises(InvalidArgumentError, match="non-target"):
            select_sets(tiny_dataset, light_config(rate=0.9))

    def test_histogram_uniform_over_non_target(self, tiny_dataset):
        counts = np.zeros(4)
        for seed in range(50):
            cfg = light_config(rate=0.1, seed=seed)
            d_s, _ = select_sets(tiny_dataset, cfg)
            for i in d_s:
                counts[tiny_dataset.samples[i].label] += 1
        assert counts[0] == 0
        _, p = scipy.stats.chisquare(counts[1:])
        assert p > 0.01

    def test_rounding_minimum_one(self, tiny_dataset):
        cfg = light_config(rate=1e-6)
        d_s, _ = select_sets(tiny_dataset, cfg)
        assert len(d_s) == 1
        assert wm.rounded_count(0.0, 100) == 0
        assert wm.rounded_count(0.005, 900) == 5  # 4.5 rounds half-up
        assert wm.rounded_count(0.01, 1280) == 13


@pytest.fixture(scope="module")
def wmds(tiny_dataset, tiny_net):
    return watermark_dataset(tiny_dataset, tiny_net, light_config())


class TestWatermarkDataset:
    def test_clean_label_invariants(self, wmds, tiny_dataset):
        for idx in wmds.modified_indices:
            sample = wmds.dataset.samples[idx]
            assert sample.label == tiny_dataset.samples[idx].label
            assert sample.label != wmds.config.target_class
            assert sample.watermark["source_label"] == sample.label

    def test_trigger_presence(self, wmds):
        trig = wm.make_trigger(wmds.config.trigger)
        for sample in wmds.modified_samples:
            replaced = sample.watermark["replaced_indices"]
            assert np.array_equal(sample.cloud[replaced], trig.points)
            assert sample.cloud.shape == (64, 3)

    def test_counts(self, wmds, tiny_dataset):
        n_train = len(tiny_dataset.indices(split="train"))
        assert len(wmds.modified_indices) == round(wmds.config.rate * n_train)
        benign = wmds.benign_indices
        assert len(benign) + len(wmds.modified_indices) == len(tiny_dataset)
        assert set(benign).isdisjoint(wmds.modified_indices)

    def test_untouched_remainder(self, wmds, tiny_dataset):
        modified = set(wmds.modified_indices)
        for i, (a, b) in enumerate(zip(wmds.dataset.samples, tiny_dataset.samples)):
            if i not in modified:
                assert np.array_equal(a.cloud, b.cloud)
                assert a.watermark is None

    def test_iom_zero(self, wmds):
        assert iom_metric(wmds) == 0.0

    def test_determinism(self, tiny_dataset, tiny_net):
        a = watermark_dataset(tiny_dataset, tiny_net, light_config())
        b = watermark_dataset(tiny_dataset, tiny_net, light_config())
        assert a.modified_indices == b.modified_indices
        for i in a.modified_indices:
            assert np.array_equal(a.dataset.samples[i].cloud, b.dataset.samples[i].cloud)

    def test_zero_rate_identity(self, tiny_dataset, tiny_net):
        out = watermark_dataset(tiny_dataset, tiny_net, light_config(rate=0.0))
        assert out.modified_indices == []
        for a, b in zip(out.dataset.samples, tiny_dataset.samples):
            assert np.array_equal(a.cloud, b.cloud)

    def test_provenance_round_trip(self, wmds, tmp_path):
        from pointmark.data import load_dataset, save_dataset

        save_dataset(wmds.dataset, tmp_path / "wm")
        back = load_dataset(tmp_path / "wm")
        assert back.watermark["modified_indices"] == wmds.modified_indices
        for idx in wmds.modified_indices:
            assert back.samples[idx].watermark == wmds.dataset.samples[idx].watermark


class TestIomMetric:
    def test_poison_label_variant(self, tiny_dataset, tiny_net):
        out = watermark_dataset(tiny_dataset, tiny_net, light_config())
        # synthetic poison-label twin: overwrite every modified label
        for idx in out.modified_indices:
            out.dataset.samples[idx].label = out.config.target_class
        assert iom_metric(out) == 100.0

    def test_half_relabelled(self, tiny_dataset, tiny_net):
        out = watermark_dataset(tiny_dataset, tiny_net, light_config(rate=0.1))
        half = out.modified_indices[: len(out.modified_indices) // 2]
        for idx in half:
            out.dataset.samples[idx].label = out.config.target_class
        expected = 100.0 * len(half) / len(out.modified_indices)
        assert iom_metric(out) == pytest.approx(expected)
