"""Small ReLU multilayer perceptrons trained with Adam, written against numpy.

Six networks map geometric features to element parameters: one per
(element kind, parameter) pair. Inputs and targets are z-scored with
statistics from the training rows only.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .circuit import PARAM_NAMES, ElementParameters, check_flavor
from .errors import TrainingDivergenceError, ValidationError
from .features import columns_for

# hidden layer widths per (element kind, target)
ARCHITECTURES = {
    ("vessel", "R_lin"): (10, 10),
    ("vessel", "R_quad"): (10, 10),
    ("vessel", "L"): (10, 10),
    ("junction", "R_lin"): (10, 10),
    ("junction", "R_quad"): (10, 10),
    ("junction", "L"): (20, 20, 20, 20),
}
LOSSES = ("mse", "proximity")
STD_FLOOR = 1e-12


@dataclass
class MLPModel:
    weights: list  # W_i with shape (fan_out, fan_in)
    biases: list

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def widths(self):
        return tuple(w.shape[0] for w in self.weights[:-1])

    def copy(self):
        return MLPModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.widths),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([np.array(w, dtype=float) for w in d["weights"]],
                   [np.array(b, dtype=float) for b in d["biases"]])


def init_model(input_dim, hidden, rng):
    """He-scaled uniform weights, zero biases."""
    sizes = [input_dim, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLPModel(weights, biases)


def _as_batch(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.input_dim:
        raise ValidationError(f"model expects {model.input_dim} features, got {X.shape[1]}")
    return X


def _forward_cache(model, X):
    acts = [X]
    pre = []
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return pre, acts


def forward(model, X):
    """Network output for each row of ``X`` (standardized units)."""
    X = _as_batch(model, X)
    return _forward_cache(model, X)[1][-1][:, 0]


def _weights(gammas, n, kind):
    if kind == "mse" or gammas is None:
        return np.ones(n)
    if kind != "proximity":
        raise ValidationError(f"unknown loss {kind!r}")
    return 0.5 ** np.asarray(gammas, dtype=float)


def loss(pred, target, gammas=None, kind="mse"):
    """Mean squared error, optionally weighted by 2**-gamma per sample."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValidationError("predictions and targets differ in length")
    if pred.size == 0:
        raise ValidationError("empty batch")
    if kind not in LOSSES:
        raise ValidationError(f"unknown loss {kind!r}")
    if kind == "proximity" and gammas is None:
        raise ValidationError("proximity loss needs generation numbers")
    w = _weights(gammas, pred.size, kind)
    return float(np.mean(w * (pred - target) ** 2))


def loss_and_gradients(model, X, y, gammas=None, kind="mse"):
    """Loss and its gradients with respect to every weight and bias."""
    X = _as_batch(model, X)
    y = np.asarray(y, dtype=float)
    pre, acts = _forward_cache(model, X)
    pred = acts[-1][:, 0]
    w = _weights(gammas, len(y), kind)
    diff = pred - y
    value = float(np.mean(w * diff**2))
    delta = (2.0 * w * diff / len(y))[:, None]
    gW = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gW[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (pre[i - 1] > 0)
    return value, gW, gb


def gradient_check(model, X, y, gammas=None, kind="mse", eps=1e-6):
    """Largest relative gap between analytic and central-difference gradients.

    Entries are compared relative to the larger of the two magnitudes, with a
    floor of 1e-8 so that exactly vanishing gradients do not divide by zero.
    """
    _, gW, gb = loss_and_gradients(model, X, y, gammas, kind)
    worst = 0.0
    m = model.copy()
    for params, grads in ((m.weights, gW), (m.biases, gb)):
        for P, G in zip(params, grads):
            flat = P.reshape(-1)
            gflat = G.reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + eps
                up = loss_and_gradients(m, X, y, gammas, kind)[0]
                flat[k] = old - eps
                down = loss_and_gradients(m, X, y, gammas, kind)[0]
                flat[k] = old
                num = (up - down) / (2 * eps)
                denom = max(abs(num), abs(gflat[k]), 1e-8)
                worst = max(worst, abs(num - gflat[k]) / denom)
    return worst


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 5000
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")


@dataclass(frozen=True)
class TrainingSample:
    features: np.ndarray
    target: float
    gamma: int
    geometry_id: str = ""
    element_id: str = ""

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("generation number must be non-negative")


def train(samples, hidden, cfg=TrainConfig()):
    """Fit a fresh network to (already standardized) samples with Adam.

    Returns the model and the per-epoch training loss on the full set.
    """
    if not samples:
        raise ValidationError("training needs at least one sample")
    X = np.array([s.features for s in samples], dtype=float)
    y = np.array([s.target for s in samples], dtype=float)
    g = np.array([s.gamma for s in samples], dtype=float)
    return train_arrays(X, y, g, hidden, cfg)


def train_arrays(X, y, gammas, hidden, cfg=TrainConfig()):
    rng = np.random.default_rng(cfg.seed)
    model = init_model(X.shape[1], hidden, rng)
    params = model.weights + model.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    n = len(y)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            value, gW, gb = loss_and_gradients(model, X[idx], y[idx], gammas[idx], cfg.loss)
            if not np.isfinite(value):
                raise TrainingDivergenceError(epoch, value)
            step += 1
            c1 = 1.0 - cfg.beta1**step
            c2 = 1.0 - cfg.beta2**step
            for p, gr, a, b in zip(params, gW + gb, m1, m2):
                a *= cfg.beta1
                a += (1 - cfg.beta1) * gr
                b *= cfg.beta2
                b += (1 - cfg.beta2) * gr * gr
                p -= cfg.learning_rate * (a / c1) / (np.sqrt(b / c2) + cfg.eps)
        # full-set loss after this epoch's updates
        value = loss(forward(model, X), y, gammas, cfg.loss)
        if not np.isfinite(value):
            raise TrainingDivergenceError(epoch, value)
        history.append(value)
    return model, history


# Columns spanning orders of magnitude; compressed before z-scoring.
WIDE_RANGE_FEATURES = frozenset({
    "r_in", "r_out", "r_min", "r_max", "length", "length_ratio",
    "R_poiseuille_absorbed", "R_stenosis_absorbed", "L_absorbed",
    "R_poiseuille_calculated", "R_stenosis_calculated", "L_calculated",
})


def _compression_scale(col):
    nz = np.abs(col[col != 0])
    if not nz.size:
        return 1.0
    # the floor keeps x / scale finite when tiny values dominate the median
    return max(1e-2 * float(np.median(nz)), 1e-12 * float(nz.max()))


@dataclass(frozen=True)
class Standardizer:
    """Per-column z-score, optionally after a signed-log compression
    ``asinh(x / scale)`` on columns with a positive ``scale``."""

    mean: np.ndarray
    std: np.ndarray
    scale: np.ndarray | None = None

    @classmethod
    def fit(cls, X, compress=None):
        X = np.asarray(X, dtype=float)
        scale = None
        if compress is not None:
            compress = np.broadcast_to(np.asarray(compress, dtype=bool), X.shape[1:])
            scale = np.array([_compression_scale(X[:, j]) if c else 0.0
                              for j, c in enumerate(np.atleast_1d(compress))])
            X = cls(np.zeros(X.shape[1:]), np.ones(X.shape[1:]), scale)._compress(X)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR), scale)

    def _compress(self, X):
        if self.scale is None:
            return X
        on = self.scale > 0
        out = np.array(X, dtype=float, copy=True)
        out[..., on] = np.arcsinh(out[..., on] / self.scale[on])
        return out

    def transform(self, X):
        return (self._compress(np.asarray(X, dtype=float)) - self.mean) / self.std

    def inverse(self, Z):
        X = np.asarray(Z, dtype=float) * self.std + self.mean
        if self.scale is None:
            return X
        on = self.scale > 0
        X = np.array(X, copy=True)
        X[..., on] = np.sinh(X[..., on]) * self.scale[on]
        return X

    def to_dict(self):
        d = {"mean": np.atleast_1d(self.mean).tolist(), "std": np.atleast_1d(self.std).tolist()}
        if self.scale is not None:
            d["scale"] = np.atleast_1d(self.scale).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        scale = np.array(d["scale"], dtype=float) if "scale" in d else None
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float), scale)


@dataclass
class ParameterModel:
    """A trained network with its standardizers, for one (kind, target)."""

    kind: str
    target: str
    model: MLPModel
    feature_scaler: Standardizer
    target_scaler: Standardizer
    config: TrainConfig = field(default_factory=TrainConfig)
    history: list = field(default_factory=list)
    training_rows: tuple = ()  # (geometry id, element id)

    # predictions are clipped to the standardized training target range
    # widened by this many standard deviations before inversion
    clip_margin = 1.0
    z_range: tuple = (-np.inf, np.inf)

    def predict(self, X):
        z = forward(self.model, self.feature_scaler.transform(np.atleast_2d(X)))
        lo, hi = self.z_range
        z = np.clip(z, lo, hi)
        return self.target_scaler.inverse(z[:, None])[:, 0]

    def to_dict(self):
        return {
            "kind": self.kind,
            "target": self.target,
            "architecture": self.model.to_dict()["hidden"],
            "model": self.model.to_dict(),
            "feature_scaler": self.feature_scaler.to_dict(),
            "target_scaler": self.target_scaler.to_dict(),
            "config": asdict(self.config),
            "training_rows": [list(r) for r in self.training_rows],
            "z_range": [float(v) for v in self.z_range],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["kind"], d["target"], MLPModel.from_dict(d["model"]),
            Standardizer.from_dict(d["feature_scaler"]),
            Standardizer.from_dict(d["target_scaler"]),
            TrainConfig(**d["config"]),
            [],
            tuple(tuple(r) for r in d.get("training_rows", ())),
            tuple(d.get("z_range", (-np.inf, np.inf))),
        )


def fit_parameter_model(kind, target, rows, cfg=TrainConfig(), hidden=None):
    """Standardize and train one network.

    ``rows`` are (geometry id, element id, raw feature array, raw target,
    gamma) tuples from the training split only.
    """
    if not rows:
        raise ValidationError(f"no training rows for {kind} {target}")
    X = np.array([r[2] for r in rows], dtype=float)
    y = np.array([r[3] for r in rows], dtype=float)[:, None]
    gam = np.array([r[4] for r in rows], dtype=float)
    wide = [c in WIDE_RANGE_FEATURES for c in columns_for(kind)]
    fs = Standardizer.fit(X, compress=wide)
    ts = Standardizer.fit(y, compress=[True])
    z = ts.transform(y)[:, 0]
    hidden = hidden or ARCHITECTURES[(kind, target)]
    model, history = train_arrays(fs.transform(X), z, gam, hidden, cfg)
    margin = ParameterModel.clip_margin
    z_range = (float(z.min()) - margin, float(z.max()) + margin)
    return ParameterModel(kind, target, model, fs, ts, cfg, history, tuple((r[0], r[1]) for r in rows), z_range)


def predict_parameters(models, disc, features, flavor="rri"):
    """Element parameters for every non-connector element of ``disc``.

    Connectors are left to the network assembly (frozen zeros). Junction
    outlets that lead into a splitting connector get R_quad = L = 0, frozen.
    The RI flavor forces every R_quad to 0.
    """
    flavor = check_flavor(flavor)
    out = {}
    by_kind = {"vessel": [], "junction": []}
    for spec in disc.element_specs():
        if spec.kind in by_kind:
            by_kind[spec.kind].append(spec)
    for kind, specs in by_kind.items():
        if not specs:
            continue
        for target in PARAM_NAMES:
            if (kind, target) not in models:
                raise ValidationError(f"missing model for {kind} {target}")
        X = np.array([features[s.id].as_array(kind) for s in specs])
        pred = {t: models[(kind, t)].predict(X) for t in PARAM_NAMES}
        for i, s in enumerate(specs):
            vals = {t: float(pred[t][i]) for t in PARAM_NAMES}
            frozen = ()
            if kind == "junction" and disc.junction_outlet(s.id)[1].to_connector:
                vals["R_quad"] = vals["L"] = 0.0
                frozen = ("R_quad", "L")
            if flavor == "ri":
                vals["R_quad"] = 0.0
            out[s.id] = ElementParameters(vals["R_lin"], vals["R_quad"], vals["L"], frozen=frozenset(frozen))
    return out


def save_models(models, path):
    data = {f"{k}/{t}": m.to_dict() for (k, t), m in sorted(models.items())}
    Path(path).write_text(json.dumps(data, sort_keys=True))


def load_models(path):
    data = json.loads(Path(path).read_text())
    out = {}
    for key, d in data.items():
        m = ParameterModel.from_dict(d)
        out[(m.kind, m.target)] = m
    return out


def write_training_report(models, path):
    """CSV with one row per (model, epoch)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "target", "epoch", "loss"])
    for (kind, target), m in sorted(models.items()):
        for epoch, value in enumerate(m.history):
            w.writerow([kind, target, epoch, repr(float(value))])
    Path(path).write_text(buf.getvalue())
