"""End-to-end orchestration shared by the CLI and the acceptance suite.

Wires datasets, surrogate training, watermarking, malicious/clean
training, verification scenarios, removal attacks and parameter sweeps
into single calls, with architecture presets standing in for different
model families.
"""

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .attacks import (
    AttackConfig,
    adaptive_train,
    augment_noise,
    augment_rotation,
    finetune,
    resample_to_count,
    sor_filter,
)
from .data import Dataset, SyntheticShapeSpec, generate_synthetic_dataset
from .errors import InvalidArgumentError
from .network import NetConfig, SurrogateModel, TrainConfig, train_classifier
from .perturb import (
    PointOptConfig,
    ShapeOptConfig,
    TargetFeatureSet,
    optimize_point,
    optimize_shape,
    perturb,
    relative_distance,
)
from .geometry import chamfer_distance
from .rng import rng_for, seed_for
from .verification import (
    VerificationConfig,
    build_verification_set,
    evaluate_metrics,
    verify_ownership,
)
from .watermark import WatermarkConfig, make_trigger, select_sets, watermark_dataset

ARCH_PRESETS = {
    "mini": {"per_point_widths": (64, 128), "head_widths": (64,)},
    "wide": {"per_point_widths": (96, 192), "head_widths": (64,)},
    "deep": {"per_point_widths": (64, 128), "head_widths": (64, 32)},
}

SWEEP_COLUMNS = (
    "param",
    "value",
    "acc",
    "wsr",
    "delta_p",
    "log10_p",
    "chamfer",
    "relative_distance",
)


def net_config_for(arch, class_count, seed=0):
    if arch not in ARCH_PRESETS:
        raise InvalidArgumentError(f"unknown architecture preset {arch!r}")
    preset = ARCH_PRESETS[arch]
    return NetConfig(class_count=class_count, seed=seed, **preset)


@dataclass
class ExperimentConfig:
    """Aggregated configuration for a full experiment run."""

    seed: int = 0
    out_dir: str = "runs"
    data: SyntheticShapeSpec = field(default_factory=SyntheticShapeSpec)
    net_arch: str = "mini"
    train: TrainConfig = field(default_factory=TrainConfig)
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    attacks: list = field(default_factory=list)

    def to_dict(self):
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "data": self.data.to_dict(),
            "net_arch": self.net_arch,
            "train": self.train.to_dict(),
            "watermark": self.watermark.to_dict(),
            "verification": self.verification.to_dict(),
            "attacks": [a.to_dict() for a in self.attacks],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            seed=int(d.get("seed", 0)),
            out_dir=d.get("out_dir", "runs"),
            data=SyntheticShapeSpec.from_dict(d["data"]) if "data" in d else SyntheticShapeSpec(),
            net_arch=d.get("net_arch", "mini"),
            train=TrainConfig.from_dict(d["train"]) if "train" in d else TrainConfig(),
            watermark=WatermarkConfig.from_dict(d["watermark"])
            if "watermark" in d
            else WatermarkConfig(),
            verification=VerificationConfig.from_dict(d["verification"])
            if "verification" in d
            else VerificationConfig(),
            attacks=[AttackConfig.from_dict(a) for a in d.get("attacks", [])],
        )


def load_experiment_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def train_on_dataset(dataset, arch, tcfg, augment=None, noise_sigma=0.01, aug_seed=0):
    """Train a classifier on the train split; returns (cfg, TrainResult).

    augment: None, "rotation" (fresh random rotations of the original
    clouds every epoch) or "noise" (fresh Gaussian offsets every epoch).
    """
    idx = dataset.indices(split="train")
    clouds = dataset.clouds(idx)
    labels = dataset.labels(idx)
    cfg = net_config_for(arch, dataset.class_count, seed=tcfg.seed)
    hook = None
    if augment == "rotation":
        base = clouds.copy()

        def hook(epoch, current, params):
            return np.stack(
                [
                    augment_rotation(base[i], seed_for(aug_seed, "rot", epoch, i))
                    for i in range(base.shape[0])
                ]
            )

    elif augment == "noise":
        base = clouds.copy()

        def hook(epoch, current, params):
            return np.stack(
                [
                    augment_noise(base[i], noise_sigma, seed_for(aug_seed, "noise", epoch, i))
                    for i in range(base.shape[0])
                ]
            )

    elif augment is not None:
        raise InvalidArgumentError(f"unknown augmentation {augment!r}")
    result = train_classifier(cfg, clouds, labels, tcfg, epoch_hook=hook)
    return cfg, result


def model_accuracy(model, dataset, split="test"):
    idx = dataset.indices(split=split)
    clouds = dataset.clouds(idx)
    preds = model.predict_proba_batch(clouds).argmax(axis=1)
    return 100.0 * float((preds == dataset.labels(idx)).mean())


def run_scenario(model, dataset, vcfg, scenario):
    """Verification plus benign accuracy; returns (report, acc)."""
    report = verify_ownership(model, dataset, vcfg, scenario=scenario)
    acc = model_accuracy(model, dataset)
    return report, acc


def run_attack(kind, wm_dataset, clean_dataset, arch, tcfg, vcfg, acfg, base_model=None):
    """Train/derive an attacked model from the watermarked data and verify.

    Returns a result dict (attack kind, parameters, ACC, WSR, p-value).
    base_model: (cfg, params) of the already-trained malicious model,
    required for the fine-tuning attack.
    """
    ds = wm_dataset.dataset if hasattr(wm_dataset, "dataset") else wm_dataset
    if kind in ("rotation-aug", "noise-aug"):
        cfg, result = train_on_dataset(
            ds,
            arch,
            tcfg,
            augment="rotation" if kind == "rotation-aug" else "noise",
            noise_sigma=acfg.noise_sigma,
            aug_seed=acfg.seed,
        )
        params = result.params
    elif kind == "sor":
        filtered = ds.copy()
        for i in filtered.indices(split="train"):
            s = filtered.samples[i]
            kept, _ = sor_filter(s.cloud, k=acfg.sor_k, threshold_mult=acfg.sor_mult)
            s.cloud = resample_to_count(kept, s.cloud.shape[0], seed=seed_for(acfg.seed, "pad", i))
        cfg, result = train_on_dataset(filtered, arch, tcfg)
        params = result.params
    elif kind == "finetune":
        if base_model is None:
            raise InvalidArgumentError("finetune attack needs the trained malicious model")
        cfg, params0 = base_model
        benign_idx = [
            i
            for i in ds.indices(split="train")
            if ds.samples[i].watermark is None
        ]
        extra = acfg.finetune_epochs if acfg.finetune_epochs is not None else tcfg.epochs
        ft_cfg = TrainConfig(
            epochs=extra,
            batch_size=tcfg.batch_size,
            learning_rate=tcfg.learning_rate,
            seed=seed_for(acfg.seed, "finetune"),
        )
        result = finetune(
            params0,
            cfg,
            ds.clouds(benign_idx),
            ds.labels(benign_idx),
            ft_cfg,
            fraction=acfg.finetune_fraction,
            seed=acfg.seed,
        )
        params = result.params
    elif kind == "adaptive":
        idx = ds.indices(split="train")
        cfg = net_config_for(arch, ds.class_count, seed=tcfg.seed)
        result = adaptive_train(cfg, ds.clouds(idx), ds.labels(idx), tcfg, acfg)
        params = result.params
    else:
        raise InvalidArgumentError(f"unknown attack kind {kind!r}")
    model = SurrogateModel(cfg, params)
    report = verify_ownership(model, clean_dataset, vcfg, scenario="malicious")
    acc = model_accuracy(model, clean_dataset)
    return {
        "kind": kind,
        "params": acfg.to_dict(),
        "acc": acc,
        "wsr": report.wsr,
        "delta_p": report.delta_p,
        "p_value": report.p_value,
        "log10_p": report.log10_p,
        "model": (cfg, params),
        "report": report,
    }


@dataclass
class PipelineState:
    """Artifacts of one full watermark-and-train pipeline."""

    clean: Dataset
    surrogate: SurrogateModel
    wm: object
    malicious: SurrogateModel
    clean_model: SurrogateModel | None = None


def run_pipeline(exp, train_clean_model=False, skip_shape=False, skip_point=False):
    """gen-data -> surrogate -> watermark -> malicious (and optional clean) model."""
    clean = generate_synthetic_dataset(exp.data)
    s_cfg, s_res = train_on_dataset(clean, exp.net_arch, exp.train)
    surrogate = SurrogateModel(s_cfg, s_res.params)
    wm = watermark_dataset(clean, surrogate, exp.watermark, skip_shape=skip_shape, skip_point=skip_point)
    m_cfg, m_res = train_on_dataset(wm.dataset, exp.net_arch, exp.train)
    malicious = SurrogateModel(m_cfg, m_res.params)
    clean_model = None
    if train_clean_model:
        c_cfg, c_res = train_on_dataset(clean, exp.net_arch, exp.train)
        clean_model = SurrogateModel(c_cfg, c_res.params)
    return PipelineState(
        clean=clean, surrogate=surrogate, wm=wm, malicious=malicious, clean_model=clean_model
    )


def alternate_trigger(trigger_spec):
    """A trigger unrelated to the owner's (other position and sampling)."""
    alt = dict(trigger_spec)
    alt["center"] = tuple(0.5 + 0.5 * (0.5 - c) for c in tuple(alt.get("center", (0.3, 0.3, 0.3))))
    alt["seed"] = seed_for(int(alt.get("seed", 0)), "independent-trigger")
    return alt


def scenario_config(vcfg, scenario):
    """Verification config actually used for a scenario (in-t swaps the trigger)."""
    if scenario == "in-t":
        d = vcfg.to_dict()
        d["trigger"] = alternate_trigger(vcfg.trigger)
        return VerificationConfig.from_dict(d)
    return vcfg


# ---------------------------------------------------------------------------
# sweeps

def sweep(exp, param, values, delta_seeds=(0,)):
    """Run one parameter sweep; returns a list of SWEEP_COLUMNS dicts.

    Heavy stages are shared whenever the swept parameter does not affect
    them (m and tau reuse one malicious model; eta and n only rerun the
    perturbation stage).
    """
    rows = []
    if param == "lambda":
        for value in values:
            e = _with_watermark(exp, rate=float(value))
            state = run_pipeline(e)
            report, acc = run_scenario(state.malicious, state.clean, e.verification, "malicious")
            rows.append(_row(param, value, acc=acc, report=report))
    elif param == "m":
        state = run_pipeline(exp)
        max_m = max(int(float(v)) for v in values)
        big = VerificationConfig.from_dict({**exp.verification.to_dict(), "m": max_m})
        pairs = build_verification_set(state.clean, big)
        for value in values:
            sub = pairs[: int(float(value))]
            acc, wsr, delta_p = evaluate_metrics(
                state.malicious, state.clean, sub, exp.verification.target_class
            )
            from .stats import paired_t_test_detailed

            pb = [state.malicious.predict_proba(x)[exp.verification.target_class] for x, _ in sub]
            pv = [state.malicious.predict_proba(xt)[exp.verification.target_class] for _, xt in sub]
            res = paired_t_test_detailed(pb, pv, exp.verification.tau)
            rows.append(
                _row(
                    param,
                    value,
                    acc=acc,
                    wsr=wsr,
                    delta_p=delta_p,
                    log10_p=res.log10_p,
                )
            )
    elif param == "tau":
        state = run_pipeline(exp)
        pairs = build_verification_set(state.clean, exp.verification)
        tc = exp.verification.target_class
        pb = [state.malicious.predict_proba(x)[tc] for x, _ in pairs]
        pv = [state.malicious.predict_proba(xt)[tc] for _, xt in pairs]
        acc = model_accuracy(state.malicious, state.clean)
        _, wsr, delta_p = evaluate_metrics(state.malicious, state.clean, pairs, tc)
        from .stats import paired_t_test_detailed

        for value in values:
            res = paired_t_test_detailed(pb, pv, float(value))
            rows.append(
                _row(param, value, acc=acc, wsr=wsr, delta_p=delta_p, log10_p=res.log10_p)
            )
    elif param in ("eta", "n"):
        clean = generate_synthetic_dataset(exp.data)
        s_cfg, s_res = train_on_dataset(clean, exp.net_arch, exp.train)
        surrogate = SurrogateModel(s_cfg, s_res.params)
        wm_cfg = exp.watermark
        d_s, d_t = select_sets(clean, wm_cfg)
        sample_count = min(20, len(d_s)) if len(d_s) >= 5 else len(d_s)
        if sample_count < 1:
            raise InvalidArgumentError("sweep needs at least one modified sample")
        sources = d_s[:sample_count]
        targets = TargetFeatureSet.from_clouds(surrogate, clean.clouds(d_t), d_t)
        rotated = {}
        if param == "eta":
            # the shape stage does not depend on eta: run it once per sample
            for idx in sources:
                rotated[idx] = optimize_shape(
                    clean.samples[idx].cloud,
                    targets,
                    surrogate,
                    ShapeOptConfig(
                        **{
                            **wm_cfg.shape_cfg.to_dict(),
                            "seed": seed_for(wm_cfg.shape_cfg.seed, "sample", idx),
                        }
                    ),
                ).cloud
        for value in values:
            chs = []
            drs = []
            for idx in sources:
                if param == "eta":
                    pres = optimize_point(
                        rotated[idx],
                        targets,
                        surrogate,
                        PointOptConfig(
                            **{
                                **wm_cfg.point_cfg.to_dict(),
                                "eta": float(value),
                                "seed": seed_for(wm_cfg.point_cfg.seed, "sample", idx),
                            }
                        ),
                    )
                    chs.append(chamfer_distance(rotated[idx], pres.cloud))
                    drs.append(relative_distance(pres.cloud, targets, surrogate))
                else:  # n: number of starting points in the shape stage
                    sres = optimize_shape(
                        clean.samples[idx].cloud,
                        targets,
                        surrogate,
                        ShapeOptConfig(
                            **{
                                **wm_cfg.shape_cfg.to_dict(),
                                "starts": int(float(value)),
                                "seed": seed_for(wm_cfg.shape_cfg.seed, "sample", idx),
                            }
                        ),
                    )
                    drs.append(relative_distance(sres.cloud, targets, surrogate))
            rows.append(
                _row(
                    param,
                    value,
                    chamfer=float(np.mean(chs)) if chs else None,
                    relative_distance=float(np.mean(drs)) if drs else None,
                )
            )
    elif param == "K":
        for value in values:
            k = int(float(value))
            e = _with_classes(exp, k)
            state = run_pipeline(e)
            report, acc = run_scenario(state.malicious, state.clean, e.verification, "malicious")
            rows.append(_row(param, value, acc=acc, report=report))
    elif param == "trigger":
        for value in values:
            e = _with_trigger_variant(exp, str(value))
            state = run_pipeline(e)
            report, acc = run_scenario(state.malicious, state.clean, e.verification, "malicious")
            rows.append(_row(param, value, acc=acc, report=report))
    else:
        raise InvalidArgumentError(f"unknown sweep parameter {param!r}")
    return rows


def _row(param, value, acc=None, wsr=None, delta_p=None, log10_p=None, chamfer=None,
         relative_distance=None, report=None):
    if report is not None:
        wsr = report.wsr
        delta_p = report.delta_p
        log10_p = report.log10_p
    return {
        "param": param,
        "value": value,
        "acc": acc,
        "wsr": wsr,
        "delta_p": delta_p,
        "log10_p": log10_p,
        "chamfer": chamfer,
        "relative_distance": relative_distance,
    }


def _with_watermark(exp, **overrides):
    d = exp.to_dict()
    d["watermark"].update(overrides)
    return ExperimentConfig.from_dict(d)


def _with_classes(exp, k):
    d = exp.to_dict()
    d["data"]["class_count"] = k
    if d["watermark"]["target_class"] >= k:
        d["watermark"]["target_class"] = 0
    if d["verification"]["target_class"] >= k:
        d["verification"]["target_class"] = 0
    return ExperimentConfig.from_dict(d)


TRIGGER_VARIANTS = {
    "default": {},
    "cube": {"shape": "cube", "side": 0.05},
    "large": {"radius": 0.05},
    "moved": {"center": (0.5, 0.5, 0.5)},
    "sparse": {"count_scale": 0.4},
}


def _with_trigger_variant(exp, variant):
    if variant not in TRIGGER_VARIANTS:
        raise InvalidArgumentError(
            f"unknown trigger variant {variant!r}; pick from {sorted(TRIGGER_VARIANTS)}"
        )
    d = exp.to_dict()
    trig = dict(d["watermark"]["trigger"])
    changes = dict(TRIGGER_VARIANTS[variant])
    if "count_scale" in changes:
        trig["count"] = max(1, round(trig.get("count", 50) * changes.pop("count_scale")))
    if changes.get("shape") == "cube":
        trig.pop("radius", None)
    trig.update(changes)
    d["watermark"]["trigger"] = trig
    d["verification"]["trigger"] = dict(trig)
    return ExperimentConfig.from_dict(d)


def write_sweep_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in SWEEP_COLUMNS})


def read_sweep_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# reproducibility records

def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_record(out_dir, command, config, artifact_paths):
    """Store the resolved config and artifact hashes next to the outputs."""
    os.makedirs(out_dir, exist_ok=True)
    artifacts = {}
    for path in sorted(artifact_paths):
        rel = os.path.relpath(path, out_dir)
        artifacts[rel] = file_sha256(path)
    record = {"command": command, "config": config, "artifacts": artifacts}
    record_path = os.path.join(out_dir, "run.json")
    with open(record_path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
    return record_path
