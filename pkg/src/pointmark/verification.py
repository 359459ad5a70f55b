"""Black-box ownership verification.

The suspicious model is queried only through posterior probabilities on
pairs (benign target-class cloud, same cloud with the trigger implanted).
A one-sided paired t-test with a certainty margin decides; the sample-size
bound relates the watermark success rate to test power and is validated
by Monte-Carlo simulation of the worst-case construction.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .rng import rng_for, seed_for
from .stats import paired_t_test_detailed, t_quantile
from .watermark import implant_trigger, make_trigger

SCENARIOS = ("malicious", "in-t", "in-m", "unspecified")


@dataclass
class VerificationConfig:
    m: int = 100
    tau: float = 0.2
    alpha: float = 0.01
    target_class: int = 0
    trigger: dict = field(
        default_factory=lambda: {
            "shape": "sphere",
            "center": (0.3, 0.3, 0.3),
            "radius": 0.025,
            "count": 50,
            "seed": 0,
        }
    )
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise InvalidArgumentError("m must be >= 2")
        if not 0.0 < self.tau < 1.0:
            raise InvalidArgumentError("tau must be in (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidArgumentError("alpha must be in (0, 1)")

    def to_dict(self):
        return {
            "m": self.m,
            "tau": self.tau,
            "alpha": self.alpha,
            "target_class": self.target_class,
            "trigger": {k: list(v) if isinstance(v, tuple) else v for k, v in self.trigger.items()},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def build_verification_set(dataset, cfg, split="verify"):
    """m held-out target-class clouds paired with trigger-implanted copies."""
    pool = dataset.indices(split=split, label=cfg.target_class)
    if len(pool) < cfg.m:
        raise InvalidArgumentError(
            f"need {cfg.m} held-out samples of class {cfg.target_class} "
            f"in split {split!r}, found {len(pool)}"
        )
    rng = rng_for("verif-select", cfg.seed)
    chosen = sorted(int(i) for i in rng.choice(pool, size=cfg.m, replace=False))
    trigger = make_trigger(cfg.trigger)
    pairs = []
    for i, idx in enumerate(chosen):
        x = dataset.samples[idx].cloud
        x_trig, _ = implant_trigger(x, trigger, seed_for(cfg.seed, "verif-implant", i))
        pairs.append((x, x_trig))
    return pairs


def evaluate_metrics(model, dataset, pairs, target_class, test_split="test"):
    """(ACC, WSR, delta_p): benign accuracy, trigger miss rate, posterior drop."""
    test_idx = dataset.indices(split=test_split)
    correct = 0
    for i in test_idx:
        s = dataset.samples[i]
        if int(np.argmax(model.predict_proba(s.cloud))) == s.label:
            correct += 1
    acc = 100.0 * correct / len(test_idx) if test_idx else float("nan")
    p_benign, p_verified, missed = _query_pairs(model, pairs, target_class)
    wsr = 100.0 * missed / len(pairs) if pairs else float("nan")
    delta_p = float(np.mean(p_benign) - np.mean(p_verified)) if pairs else float("nan")
    return acc, wsr, delta_p


def _query_pairs(model, pairs, target_class):
    p_benign = []
    p_verified = []
    missed = 0
    for x, x_trig in pairs:
        pb = model.predict_proba(x)
        pv = model.predict_proba(x_trig)
        p_benign.append(float(pb[target_class]))
        p_verified.append(float(pv[target_class]))
        if int(np.argmax(pv)) != target_class:
            missed += 1
    return p_benign, p_verified, missed


@dataclass
class TheoremParams:
    wsr: float
    zeta: float
    tau: float
    alpha: float
    m: int

    def __post_init__(self):
        if not 0.0 <= self.wsr <= 1.0:
            raise InvalidArgumentError("wsr must be in [0, 1]")
        if not 0.0 <= self.zeta <= 1.0:
            raise InvalidArgumentError("zeta must be in [0, 1]")
        if not 0.0 <= self.tau < 1.0:
            raise InvalidArgumentError("tau must be in [0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidArgumentError("alpha must be in (0, 1)")
        if self.m < 2:
            raise InvalidArgumentError("m must be >= 2")


def theorem1_margin(p):
    """sqrt(m-1)*(W + zeta - tau - 1) - t_crit * sqrt(W - W^2).

    t_crit is the upper-alpha critical value of the t-distribution with
    m-1 degrees of freedom (the one-sided rejection threshold).
    """
    t_crit = t_quantile(1.0 - p.alpha, p.m - 1)
    w = p.wsr
    return math.sqrt(p.m - 1) * (w + p.zeta - p.tau - 1.0) - t_crit * math.sqrt(max(w - w * w, 0.0))


def theorem1_bound(p):
    """(satisfied, margin): whether the sample-size inequality holds."""
    margin = theorem1_margin(p)
    return margin > 0.0, margin


def min_wsr(m, zeta, tau, alpha):
    """Smallest success rate satisfying the bound, by bisection on W.

    Returns nan when no W in [0, 1] satisfies it.
    """
    def sat(w):
        return theorem1_margin(TheoremParams(wsr=w, zeta=zeta, tau=tau, alpha=alpha, m=m)) > 0.0

    if not sat(1.0):
        return float("nan")
    lo, hi = 0.0, 1.0
    if sat(lo):
        return 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if sat(mid):
            hi = mid
        else:
            lo = mid
    return hi


def theorem1_montecarlo(p, trials, seed=0):
    """Empirical rejection rate under the proof's worst-case construction.

    Each trial draws m Bernoulli classification events at success rate W,
    sets the benign posterior to its lower bound zeta and the verified
    posterior to the event indicator, then runs the paired test.
    """
    if trials < 1000:
        raise InvalidArgumentError("trials must be >= 1000")
    rng = rng_for("theorem-mc", seed)
    rejected = 0
    for _ in range(trials):
        events = (rng.uniform(size=p.m) >= p.wsr).astype(np.float64)  # 1 = predicted target
        p_benign = np.full(p.m, p.zeta)
        result = paired_t_test_detailed(p_benign, events, p.tau)
        if result.p_value < p.alpha:
            rejected += 1
    return rejected / trials


@dataclass
class VerificationReport:
    scenario: str
    m: int
    tau: float
    alpha: float
    delta_p: float
    t_stat: float
    p_value: float
    log10_p: float
    wsr: float
    decision: str  # "reject" or "retain"
    seed: int
    pairs: list = field(default_factory=list)  # (P_b, P_v) per verification sample

    @property
    def rejected(self):
        return self.decision == "reject"

    def to_dict(self):
        return {
            "format_version": 1,
            "kind": "verification-report",
            "scenario": self.scenario,
            "m": self.m,
            "tau": self.tau,
            "alpha": self.alpha,
            "delta_p": self.delta_p,
            "t_stat": _json_float(self.t_stat),
            "p_value": self.p_value,
            "log10_p": _json_float(self.log10_p),
            "wsr": self.wsr,
            "decision": self.decision,
            "seed": self.seed,
            "pairs": [[pb, pv] for pb, pv in self.pairs],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(
            scenario=d["scenario"],
            m=d["m"],
            tau=d["tau"],
            alpha=d["alpha"],
            delta_p=d["delta_p"],
            t_stat=_parse_float(d["t_stat"]),
            p_value=d["p_value"],
            log10_p=_parse_float(d["log10_p"]),
            wsr=d["wsr"],
            decision=d["decision"],
            seed=d["seed"],
            pairs=[tuple(p) for p in d.get("pairs", [])],
        )


def _json_float(v):
    return v if math.isfinite(v) else repr(v)


def _parse_float(v):
    return float(v)


def verify_ownership(model, dataset, cfg, scenario="unspecified"):
    """Full verification: build pairs, query posteriors, run the paired test.

    The model is touched exclusively through predict_proba.
    """
    if scenario not in SCENARIOS:
        raise InvalidArgumentError(f"unknown scenario {scenario!r}")
    pairs = build_verification_set(dataset, cfg)
    p_benign, p_verified, missed = _query_pairs(model, pairs, cfg.target_class)
    result = paired_t_test_detailed(p_benign, p_verified, cfg.tau)
    return VerificationReport(
        scenario=scenario,
        m=cfg.m,
        tau=cfg.tau,
        alpha=cfg.alpha,
        delta_p=float(np.mean(p_benign) - np.mean(p_verified)),
        t_stat=result.t_stat,
        p_value=result.p_value,
        log10_p=result.log10_p,
        wsr=100.0 * missed / len(pairs),
        decision="reject" if result.p_value < cfg.alpha else "retain",
        seed=cfg.seed,
        pairs=list(zip(p_benign, p_verified)),
    )
