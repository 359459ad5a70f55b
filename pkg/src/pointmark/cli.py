"""Command-line surface for the full watermarking/verification pipeline.

Every subcommand reads/writes only the paths named in its flags and drops
a reproducibility record (resolved config + artifact hashes) next to its
outputs, so re-running a command with identical inputs is byte-identical.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import pipeline
from .attacks import ATTACK_KINDS, AttackConfig
from .data import SyntheticShapeSpec, generate_synthetic_dataset, load_dataset, save_dataset
from .errors import (
    CloudParseError,
    DegenerateInputError,
    InvalidArgumentError,
    ManifestValidationError,
    NumericFailureError,
)
from .network import NetConfig, SurrogateModel, TrainConfig, load_model, save_model
from .perturb import PointOptConfig, ShapeOptConfig
from .pipeline import ExperimentConfig, net_config_for, write_run_record
from .verification import VerificationConfig, verify_ownership
from .watermark import WatermarkConfig, watermark_dataset

_ERRORS = (
    InvalidArgumentError,
    DegenerateInputError,
    NumericFailureError,
    CloudParseError,
    ManifestValidationError,
    OSError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def _out_root():
    return os.environ.get("POINTMARK_OUT", ".")


def _resolve_out(path):
    if os.path.isabs(path):
        return path
    return os.path.join(_out_root(), path)


def parse_trigger(spec, shape="sphere", seed=0):
    """'cx,cy,cz,size,count' -> trigger config dict (size: radius or cube side)."""
    parts = [p for p in spec.split(",") if p != ""]
    if len(parts) != 5:
        raise InvalidArgumentError(
            f"trigger spec needs cx,cy,cz,size,count (5 values), got {len(parts)}"
        )
    cx, cy, cz, size, count = (float(p) for p in parts)
    trig = {"shape": shape, "center": (cx, cy, cz), "count": int(count), "seed": seed}
    if shape == "cube":
        trig["side"] = size
    else:
        trig["radius"] = size
    return trig


def _load_experiment(args):
    if getattr(args, "config", None):
        exp = pipeline.load_experiment_config(args.config)
    else:
        exp = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        d = exp.to_dict()
        d["seed"] = args.seed
        for section in ("data", "watermark", "verification"):
            d[section]["seed"] = args.seed
        d["train"]["seed"] = args.seed
        exp = ExperimentConfig.from_dict(d)
    return exp


def _dataset_summary(ds):
    return {
        "samples": len(ds),
        "classes": ds.class_names,
        "splits": {sp: len(ds.indices(split=sp)) for sp in ("train", "test", "verify")},
    }


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    spec = SyntheticShapeSpec(
        class_count=args.classes,
        samples_per_class=args.per_class,
        points_per_cloud=args.points,
        jitter=args.jitter,
        seed=args.seed if args.seed is not None else 0,
        extra_verify_per_class=args.extra_verify,
    )
    ds = generate_synthetic_dataset(spec)
    out = _resolve_out(args.out)
    save_dataset(ds, out, inline=args.inline)
    artifacts = [os.path.join(out, "manifest.json")]
    if not args.inline:
        artifacts += [
            os.path.join(out, "clouds", name) for name in os.listdir(os.path.join(out, "clouds"))
        ]
    write_run_record(out, "gen-data", spec.to_dict(), artifacts)
    print(json.dumps({"out": out, **_dataset_summary(ds)}, indent=1))
    return 0


def _train_config(args, seed_default=0):
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed if args.seed is not None else seed_default,
    )


def cmd_train_surrogate(args):
    return _train_common(args, "train-surrogate")


def cmd_train(args):
    return _train_common(args, "train")


def _train_common(args, command):
    ds = load_dataset(args.data)
    tcfg = _train_config(args)
    augment = getattr(args, "augment", None)
    cfg, result = pipeline.train_on_dataset(
        ds,
        args.arch,
        tcfg,
        augment=augment,
        noise_sigma=getattr(args, "sigma", 0.01),
        aug_seed=tcfg.seed,
    )
    out = _resolve_out(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_model(out, cfg, result.params)
    model = SurrogateModel(cfg, result.params)
    acc = pipeline.model_accuracy(model, ds)
    record = {
        "data": args.data,
        "arch": args.arch,
        "train": tcfg.to_dict(),
        "augment": augment,
        "final_train_accuracy": result.history[-1]["accuracy"] if result.history else None,
        "test_accuracy": acc,
    }
    write_run_record(os.path.dirname(out) or ".", command, record, [out])
    print(json.dumps({"out": out, "test_accuracy": acc}, indent=1))
    return 0


def cmd_watermark(args):
    ds = load_dataset(args.data)
    net_cfg, params = load_model(args.surrogate)
    net = SurrogateModel(net_cfg, params)
    seed = args.seed if args.seed is not None else 0
    trigger = parse_trigger(args.trigger, shape=args.trigger_shape, seed=args.trigger_seed)
    cfg = WatermarkConfig(
        target_class=args.target_class,
        rate=args.rate,
        trigger=trigger,
        target_set_size=args.target_set_size,
        seed=seed,
        shape_cfg=ShapeOptConfig(
            starts=args.starts, iterations=args.shape_iters, learning_rate=args.shape_lr, seed=seed
        ),
        point_cfg=PointOptConfig(
            eta=args.eta, iterations=args.point_iters, step_size=args.beta, momentum_decay=args.mu,
            seed=seed,
        ),
    )
    wm = watermark_dataset(ds, net, cfg, skip_shape=args.skip_shape, skip_point=args.skip_point)
    out = _resolve_out(args.out)
    save_dataset(wm.dataset, out, inline=args.inline)
    artifacts = [os.path.join(out, "manifest.json")]
    write_run_record(out, "watermark", cfg.to_dict(), artifacts)
    print(
        json.dumps(
            {
                "out": out,
                "modified": len(wm.modified_indices),
                "rate": cfg.rate,
                "target_class": cfg.target_class,
            },
            indent=1,
        )
    )
    return 0


def cmd_verify(args):
    ds = load_dataset(args.data)
    net_cfg, params = load_model(args.model)
    model = SurrogateModel(net_cfg, params)
    seed = args.seed if args.seed is not None else 0
    trigger = parse_trigger(args.trigger, shape=args.trigger_shape, seed=args.trigger_seed)
    cfg = VerificationConfig(
        m=args.m,
        tau=args.tau,
        alpha=args.alpha,
        target_class=args.target_class,
        trigger=trigger,
        seed=seed,
    )
    cfg = pipeline.scenario_config(cfg, args.scenario)
    report = verify_ownership(model, ds, cfg, scenario=args.scenario)
    acc = pipeline.model_accuracy(model, ds)
    doc = report.to_dict()
    doc["acc"] = acc
    text = json.dumps(doc, indent=1, sort_keys=True)
    print(text)
    if args.out:
        out = _resolve_out(args.out)
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        write_run_record(os.path.dirname(out) or ".", "verify", cfg.to_dict(), [out])
    if args.expect == "malicious" and not report.rejected:
        print("verify: expected reject-H0 (malicious) but the test retained H0", file=sys.stderr)
        return 1
    if args.expect == "independent" and report.rejected:
        print("verify: expected retain-H0 (independent) but the test rejected H0", file=sys.stderr)
        return 1
    return 0


def cmd_attack(args):
    wm_ds = load_dataset(args.data)
    clean_ds = load_dataset(args.clean_data)
    seed = args.seed if args.seed is not None else 0
    acfg = AttackConfig(
        kind=args.kind,
        noise_sigma=args.sigma,
        sor_k=args.sor_k,
        sor_mult=args.sor_mult,
        finetune_fraction=args.finetune_fraction,
        finetune_epochs=args.finetune_epochs,
        adaptive_period=args.adaptive_period,
        seed=seed,
    )
    tcfg = _train_config(args)
    trigger = parse_trigger(args.trigger, shape=args.trigger_shape, seed=args.trigger_seed)
    vcfg = VerificationConfig(
        m=args.m, tau=args.tau, alpha=args.alpha, target_class=args.target_class,
        trigger=trigger, seed=seed,
    )
    base_model = None
    if args.kind == "finetune":
        if not args.model:
            raise InvalidArgumentError("finetune attack needs --model (trained malicious model)")
        base_model = load_model(args.model)
    result = pipeline.run_attack(
        args.kind, wm_ds, clean_ds, args.arch, tcfg, vcfg, acfg, base_model=base_model
    )
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    model_path = os.path.join(out, f"attacked-{args.kind}.json")
    cfg, params = result["model"]
    save_model(model_path, cfg, params)
    report_doc = {
        "kind": result["kind"],
        "params": result["params"],
        "acc": result["acc"],
        "wsr": result["wsr"],
        "delta_p": result["delta_p"],
        "p_value": result["p_value"],
        "log10_p": result["log10_p"],
    }
    report_path = os.path.join(out, f"attack-report-{args.kind}.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report_doc, fh, indent=1, sort_keys=True)
    write_run_record(out, "attack", acfg.to_dict(), [model_path, report_path])
    print(json.dumps(report_doc, indent=1, sort_keys=True))
    return 0


def cmd_sweep(args):
    exp = _load_experiment(args)
    values = [v for v in args.values.split(",") if v]
    if args.param in ("lambda", "eta", "tau"):
        typed = [float(v) for v in values]
    elif args.param in ("m", "n", "K"):
        typed = [int(float(v)) for v in values]
    else:
        typed = values
    rows = pipeline.sweep(exp, args.param, typed)
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, f"sweep_{args.param}.csv")
    pipeline.write_sweep_csv(csv_path, rows)
    write_run_record(
        out, "sweep", {"param": args.param, "values": values, "experiment": exp.to_dict()},
        [csv_path],
    )
    print(json.dumps({"out": csv_path, "rows": len(rows)}, indent=1))
    return 0


def cmd_report(args):
    root = args.indir
    sweeps = []
    attacks = []
    for dirpath, _, filenames in os.walk(root):
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            if name.startswith("sweep_") and name.endswith(".csv"):
                sweeps.extend(pipeline.read_sweep_csv(path))
            elif name.startswith("attack-report-") and name.endswith(".json"):
                with open(path, "r", encoding="utf-8") as fh:
                    attacks.append(json.load(fh))
    lines = [",".join(pipeline.SWEEP_COLUMNS)]
    for row in sweeps:
        lines.append(",".join(str(row.get(c, "")) for c in pipeline.SWEEP_COLUMNS))
    for att in attacks:
        lines.append(
            ",".join(
                str(v)
                for v in (
                    f"attack:{att['kind']}",
                    "",
                    att["acc"],
                    att["wsr"],
                    att["delta_p"],
                    att["log10_p"],
                    "",
                    "",
                )
            )
        )
    text = "\n".join(lines) + "\n"
    out = _resolve_out(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(text)
    write_run_record(os.path.dirname(out) or ".", "report", {"in": root}, [out])
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def _add_seed_flag(p):
    p.add_argument("--seed", type=int, default=None, help="master seed for this command")


def _add_train_flags(p, default_epochs=60):
    p.add_argument("--arch", choices=sorted(pipeline.ARCH_PRESETS), default="mini")
    p.add_argument("--epochs", type=int, default=default_epochs)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", "--lr", type=float, default=1e-3)


def _add_trigger_flags(p):
    p.add_argument("--trigger", default="0.3,0.3,0.3,0.025,50", help="cx,cy,cz,size,count")
    p.add_argument("--trigger-shape", choices=("sphere", "cube"), default="sphere")
    p.add_argument("--trigger-seed", type=int, default=0)


def _add_verification_flags(p):
    p.add_argument("--target-class", type=int, default=0)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--alpha", type=float, default=0.01)
    _add_trigger_flags(p)


def build_parser():
    parser = _Parser(prog="pointmark", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=160)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--jitter", type=float, default=0.02)
    p.add_argument("--extra-verify", type=int, default=0,
                   help="extra verification samples per class")
    p.add_argument("--inline", action="store_true")
    _add_seed_flag(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-surrogate", help="train the owner-side surrogate")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_seed_flag(p)
    p.set_defaults(func=cmd_train_surrogate, augment=None)

    p = sub.add_parser("watermark", help="watermark a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-class", type=int, default=0)
    p.add_argument("--rate", "--lambda", type=float, default=0.01, dest="rate")
    p.add_argument("--target-set-size", type=int, default=32)
    _add_trigger_flags(p)
    p.add_argument("--starts", type=int, default=30)
    p.add_argument("--shape-iters", type=int, default=30)
    p.add_argument("--shape-lr", type=float, default=0.025)
    p.add_argument("--eta", type=float, default=50.0)
    p.add_argument("--point-iters", type=int, default=20)
    p.add_argument("--beta", type=float, default=0.0025)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--skip-shape", action="store_true")
    p.add_argument("--skip-point", action="store_true")
    p.add_argument("--inline", action="store_true")
    _add_seed_flag(p)
    p.set_defaults(func=cmd_watermark)

    p = sub.add_parser("train", help="train a model on a (possibly watermarked) dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.add_argument("--augment", choices=("rotation", "noise"), default=None)
    p.add_argument("--sigma", type=float, default=0.01)
    _add_seed_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="black-box ownership verification")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset supplying held-out verification samples")
    p.add_argument("--scenario", choices=("malicious", "in-t", "in-m"), default="malicious")
    p.add_argument("--expect", choices=("malicious", "independent"), default=None)
    p.add_argument("--out", default=None)
    _add_verification_flags(p)
    _add_seed_flag(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack", help="run a watermark-removal attack and re-verify")
    p.add_argument("--kind", choices=ATTACK_KINDS, required=True)
    p.add_argument("--data", required=True, help="watermarked dataset directory")
    p.add_argument("--clean-data", required=True, help="clean dataset for verification/ACC")
    p.add_argument("--model", default=None, help="trained malicious model (finetune)")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--sor-k", type=int, default=20)
    p.add_argument("--sor-mult", type=float, default=1.0)
    p.add_argument("--finetune-fraction", type=float, default=0.2)
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--adaptive-period", type=int, default=10)
    _add_verification_flags(p)
    _add_seed_flag(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="sweep one parameter and emit a CSV")
    p.add_argument("--param", choices=("lambda", "m", "eta", "n", "K", "tau", "trigger"),
                   required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="experiment config JSON")
    _add_seed_flag(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate sweep CSVs and attack reports")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--out", required=True)
    _add_seed_flag(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"pointmark {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
