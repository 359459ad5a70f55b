"""Compact permutation-invariant point-cloud classifier.

Shared per-point dense layers, a coordinate-wise max pool over points,
and a dense head; all forward/backward passes are explicit numpy so
gradients are available w.r.t. both parameters and input coordinates.
The penultimate head activation doubles as the feature embedding used
by the perturbation stage.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError
from .geometry import as_cloud
from .optim import AdamState
from .rng import rng_for

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    per_point_widths: tuple = (64, 128)
    head_widths: tuple = (64,)
    class_count: int = 8
    activation: str = "relu"
    radial_input: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "per_point_widths", tuple(int(w) for w in self.per_point_widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if len(self.per_point_widths) < 1 or len(self.head_widths) < 1:
            raise InvalidArgumentError("need at least one per-point and one head layer")
        if any(w < 1 for w in self.per_point_widths + self.head_widths):
            raise InvalidArgumentError("layer widths must be >= 1")
        if self.class_count < 2:
            raise InvalidArgumentError("class_count must be >= 2")
        if self.activation != "relu":
            raise InvalidArgumentError(f"unsupported activation {self.activation!r}")

    @property
    def feature_dim(self):
        return self.head_widths[-1]

    @property
    def input_width(self):
        # xyz plus, optionally, the distance to the cloud centroid; the radial
        # channel lets the pooled maxima respond to interior structure that is
        # never extremal in any linear xyz direction
        return 4 if self.radial_input else 3

    def layer_shapes(self):
        """Ordered (name, (out, in)) weight shapes for every dense layer."""
        shapes = []
        fan_in = self.input_width
        for i, w in enumerate(self.per_point_widths):
            shapes.append((f"point{i}", (w, fan_in)))
            fan_in = w
        for i, w in enumerate(self.head_widths):
            shapes.append((f"head{i}", (w, fan_in)))
            fan_in = w
        shapes.append(("output", (self.class_count, fan_in)))
        return shapes

    def to_dict(self):
        return {
            "per_point_widths": list(self.per_point_widths),
            "head_widths": list(self.head_widths),
            "class_count": self.class_count,
            "activation": self.activation,
            "radial_input": self.radial_input,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            per_point_widths=tuple(d["per_point_widths"]),
            head_widths=tuple(d["head_widths"]),
            class_count=int(d["class_count"]),
            activation=d.get("activation", "relu"),
            radial_input=bool(d.get("radial_input", True)),
            seed=int(d.get("seed", 0)),
        )


def param_names(cfg):
    names = []
    for layer, _ in cfg.layer_shapes():
        names.append(f"{layer}.weight")
        names.append(f"{layer}.bias")
    return names


def init_params(cfg):
    """Scaled-uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), from cfg.seed."""
    rng = rng_for("net-init", cfg.seed)
    params = {}
    for layer, (out, fan_in) in cfg.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{layer}.weight"] = rng.uniform(-bound, bound, size=(out, fan_in))
        params[f"{layer}.bias"] = rng.uniform(-bound, bound, size=out)
    return params


def _check_params(params, cfg):
    for layer, (out, fan_in) in cfg.layer_shapes():
        w = params.get(f"{layer}.weight")
        b = params.get(f"{layer}.bias")
        if w is None or b is None:
            raise InvalidArgumentError(f"missing parameters for layer {layer}")
        if w.shape != (out, fan_in) or b.shape != (out,):
            raise InvalidArgumentError(
                f"layer {layer} shape mismatch: weight {w.shape}, bias {b.shape}, "
                f"expected {(out, fan_in)} / {(out,)}"
            )


def _raise_if_nonfinite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericFailureError(f"non-finite activations in layer {name}")


def _forward_batch(params, cfg, xs, check=True):
    """Forward pass over a (B, M, 3) batch; returns (logits, features, trace)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 3 or xs.shape[2] != 3:
        raise InvalidArgumentError(f"expected batch of shape (B, M, 3), got {xs.shape}")
    trace = {"input": xs, "point_pre": [], "point_act": []}
    b_sz, m_sz, _ = xs.shape
    act = xs
    n_pp = len(cfg.per_point_widths)
    for i in range(n_pp):
        w = params[f"point{i}.weight"]
        b = params[f"point{i}.bias"]
        # one flat GEMM over (B*M, in) is much faster than a batched matmul
        pre = (act.reshape(b_sz * m_sz, -1) @ w.T).reshape(b_sz, m_sz, -1) + b
        act = np.maximum(pre, 0.0)
        trace["point_pre"].append(pre)
        trace["point_act"].append(act)
    pooled = act.max(axis=1)
    trace["pool_argmax"] = act.argmax(axis=1)
    trace["pooled"] = pooled
    trace["head_pre"] = []
    trace["head_act"] = []
    hact = pooled
    for i in range(len(cfg.head_widths)):
        w = params[f"head{i}.weight"]
        b = params[f"head{i}.bias"]
        pre = hact @ w.T + b
        hact = np.maximum(pre, 0.0)
        trace["head_pre"].append(pre)
        trace["head_act"].append(hact)
    features = hact
    logits = features @ params["output.weight"].T + params["output.bias"]
    trace["features"] = features
    trace["logits"] = logits
    if check and not np.all(np.isfinite(logits)):
        _locate_nonfinite(cfg, trace)
    return logits, features, trace


def _locate_nonfinite(cfg, trace):
    for i, pre in enumerate(trace["point_pre"]):
        _raise_if_nonfinite(f"point{i}", pre)
    _raise_if_nonfinite("pool", trace["pooled"])
    for i, pre in enumerate(trace["head_pre"]):
        _raise_if_nonfinite(f"head{i}", pre)
    _raise_if_nonfinite("output", trace["logits"])


def forward(params, cfg, x):
    """Single-cloud forward; returns (logits (K,), features (d,), trace)."""
    _check_params(params, cfg)
    x = as_cloud(x)
    logits, features, trace = _forward_batch(params, cfg, x[None])
    return logits[0], features[0], trace


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(params, cfg, x):
    """Posterior probabilities (softmax over logits) for one cloud."""
    logits, _, _ = forward(params, cfg, x)
    return softmax(logits)


def _backward_batch(params, cfg, trace, dlogits, want_params=True, want_input=False):
    """Reverse pass from dL/dlogits; returns (param grads or None, input grads or None)."""
    grads = {} if want_params else None
    features = trace["features"]
    if want_params:
        grads["output.weight"] = dlogits.T @ features
        grads["output.bias"] = dlogits.sum(axis=0)
    dact = dlogits @ params["output.weight"]
    for i in reversed(range(len(cfg.head_widths))):
        dpre = dact * (trace["head_pre"][i] > 0.0)
        below = trace["head_act"][i - 1] if i > 0 else trace["pooled"]
        if want_params:
            grads[f"head{i}.weight"] = dpre.T @ below
            grads[f"head{i}.bias"] = dpre.sum(axis=0)
        dact = dpre @ params[f"head{i}.weight"]
    # max pool routes gradient to each channel's argmax point (first index on ties)
    arg = trace["pool_argmax"]
    dpoint = np.zeros_like(trace["point_act"][-1])
    np.put_along_axis(dpoint, arg[:, None, :], dact[:, None, :], axis=1)
    n_pp = len(cfg.per_point_widths)
    b_sz, m_sz, _ = trace["input"].shape
    for i in reversed(range(n_pp)):
        dpre = dpoint * (trace["point_pre"][i] > 0.0)
        below = trace["point_act"][i - 1] if i > 0 else trace["input"]
        flat_dpre = dpre.reshape(b_sz * m_sz, -1)
        if want_params:
            grads[f"point{i}.weight"] = flat_dpre.T @ below.reshape(b_sz * m_sz, -1)
            grads[f"point{i}.bias"] = flat_dpre.sum(axis=0)
        if i > 0 or want_input:
            dpoint = (flat_dpre @ params[f"point{i}.weight"]).reshape(b_sz, m_sz, -1)
    dinput = dpoint if want_input else None
    return grads, dinput


def cross_entropy(logits, labels):
    """Mean cross-entropy of a (B, K) logit batch against integer labels."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def _loss_and_grads(params, cfg, clouds, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= cfg.class_count:
        raise InvalidArgumentError("label outside [0, class_count)")
    logits, _, trace = _forward_batch(params, cfg, clouds)
    probs = softmax(logits)
    b = len(labels)
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    grads, _ = _backward_batch(params, cfg, trace, dlogits, want_params=True)
    loss = cross_entropy(logits, labels)
    correct = int((logits.argmax(axis=1) == labels).sum())
    return loss, grads, correct


def grad_params(params, cfg, clouds, labels):
    """Gradient of the mean cross-entropy over a batch, keyed like params."""
    _check_params(params, cfg)
    clouds = np.asarray(clouds, dtype=np.float64)
    _, grads, _ = _loss_and_grads(params, cfg, clouds, labels)
    return grads


def grad_input(params, cfg, loss_tail, x):
    """d(loss)/d(coordinates) for a scalar loss of the feature vector.

    loss_tail(features) must return (loss_value, dloss/dfeatures).
    """
    _check_params(params, cfg)
    x = as_cloud(x)
    _, features, trace = _forward_batch(params, cfg, x[None])
    _, dfeat = loss_tail(features[0])
    dfeat = np.asarray(dfeat, dtype=np.float64).reshape(1, -1)
    return _input_grad_from_features(params, cfg, trace, dfeat)


def _input_grad_from_features(params, cfg, trace, dfeatures):
    """Backward pass that starts at the feature layer instead of the logits."""
    dact = dfeatures
    for i in reversed(range(len(cfg.head_widths))):
        dpre = dact * (trace["head_pre"][i] > 0.0)
        dact = dpre @ params[f"head{i}.weight"]
    arg = trace["pool_argmax"]
    dpoint = np.zeros_like(trace["point_act"][-1])
    np.put_along_axis(dpoint, arg[:, None, :], dact[:, None, :], axis=1)
    for i in reversed(range(len(cfg.per_point_widths))):
        dpre = dpoint * (trace["point_pre"][i] > 0.0)
        dpoint = dpre @ params[f"point{i}.weight"]
    return dpoint[0]


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch size must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning rate must be > 0")

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)


def train_classifier(cfg, clouds, labels, tcfg, initial_params=None, epoch_hook=None):
    """Mini-batch Adam training; deterministic given (cfg, data, tcfg) seeds.

    clouds: (N, M, 3) array (every cloud must have the same point count).
    epoch_hook(epoch, clouds, params) may return replacement training
    clouds; it is how the adaptive-removal trainer swaps rotated copies in
    (params is the live parameter dict, updated in place by training).
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    if clouds.ndim != 3 or clouds.shape[2] != 3:
        raise InvalidArgumentError(f"expected training clouds of shape (N, M, 3), got {clouds.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if clouds.shape[0] != labels.shape[0] or clouds.shape[0] == 0:
        raise InvalidArgumentError("clouds/labels length mismatch or empty training set")
    if labels.min() < 0 or labels.max() >= cfg.class_count:
        raise InvalidArgumentError("label outside [0, class_count)")
    params = {k: v.copy() for k, v in (initial_params or init_params(cfg)).items()}
    _check_params(params, cfg)
    names = param_names(cfg)
    adam = AdamState(
        [params[n] for n in names],
        lr=tcfg.learning_rate,
        beta1=tcfg.beta1,
        beta2=tcfg.beta2,
        eps=tcfg.eps,
    )
    rng = rng_for("train", tcfg.seed)
    n = clouds.shape[0]
    history = []
    for epoch in range(tcfg.epochs):
        if epoch_hook is not None:
            updated = epoch_hook(epoch, clouds, params)
            if updated is not None:
                clouds = np.asarray(updated, dtype=np.float64)
        order = rng.permutation(n)
        total_loss = 0.0
        total_correct = 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            loss, grads, correct = _loss_and_grads(params, cfg, clouds[idx], labels[idx])
            if not np.isfinite(loss):
                raise NumericFailureError(f"training diverged at epoch {epoch} (loss not finite)")
            adam.step([params[n_] for n_ in names], [grads[n_] for n_ in names])
            total_loss += loss * len(idx)
            total_correct += correct
        history.append(
            {"epoch": epoch, "loss": total_loss / n, "accuracy": total_correct / n}
        )
    return TrainResult(params=params, history=history)


class SurrogateModel:
    """Bundles (config, params); query surface used by perturbation/verification."""

    def __init__(self, cfg, params):
        _check_params(params, cfg)
        self.cfg = cfg
        self.params = params

    def logits(self, x):
        return forward(self.params, self.cfg, x)[0]

    def features(self, x):
        return forward(self.params, self.cfg, x)[1]

    def features_batch(self, xs):
        _, features, _ = _forward_batch(self.params, self.cfg, np.asarray(xs, dtype=np.float64))
        return features

    def predict_proba(self, x):
        return predict_proba(self.params, self.cfg, x)

    def predict_proba_batch(self, xs):
        logits, _, _ = _forward_batch(self.params, self.cfg, np.asarray(xs, dtype=np.float64))
        return softmax(logits)

    def predict(self, x):
        return int(np.argmax(self.logits(x)))

    def feature_loss_gradient(self, x, loss_tail):
        """(loss, dloss/dx) for a scalar loss_tail on the feature vector."""
        x = as_cloud(x)
        _, features, trace = _forward_batch(self.params, self.cfg, x[None])
        loss, dfeat = loss_tail(features[0])
        dfeat = np.asarray(dfeat, dtype=np.float64).reshape(1, -1)
        grad = _input_grad_from_features(self.params, self.cfg, trace, dfeat)
        return loss, grad


def save_model(path, cfg, params):
    """Write a versioned JSON checkpoint (config + named flattened parameters)."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "pointmark-model",
        "config": cfg.to_dict(),
        "params": {name: params[name].tolist() for name in param_names(cfg)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path):
    """Read a checkpoint written by save_model; returns (cfg, params)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "pointmark-model":
        raise InvalidArgumentError(f"{path}: not a model checkpoint")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidArgumentError(
            f"{path}: unsupported checkpoint version {doc.get('format_version')}"
        )
    cfg = NetConfig.from_dict(doc["config"])
    params = {name: np.array(value, dtype=np.float64) for name, value in doc["params"].items()}
    _check_params(params, cfg)
    return cfg, params
