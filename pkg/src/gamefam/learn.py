"""Feed-forward deviation-payoff regressors (numpy, hand-written backprop).

Ex ante models map ``[sigma, r]`` to one payoff per strategy; interim models
also take the deviator's ``[q, theta]``. Marginalizing an interim model over
sampled types gives ex ante estimates.

Interim models can append derived type features to their inputs: the
deviator's maximum effective bid ``q * theta`` and its margin over the
reserve, ``q * theta - r``. Callers always pass the raw inputs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset, SchemaError
from .rng import as_rng

log = logging.getLogger(__name__)

MODEL_SCHEMA = 1
FEATURES = ("raw", "effective-bid")


class NumericError(RuntimeError):
    """Training diverged or produced non-finite values."""


def _relu(z):
    return np.maximum(z, 0.0)


def _drelu(z, a):
    return (z > 0.0).astype(z.dtype)


def _tanh(z):
    return np.tanh(z)


def _dtanh(z, a):
    return 1.0 - a * a


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _dsigmoid(z, a):
    return a * (1.0 - a)


def _identity(z):
    return z


def _didentity(z, a):
    return np.ones_like(z)


ACTIVATIONS = {
    "relu": (_relu, _drelu),
    "tanh": (_tanh, _dtanh),
    "sigmoid": (_sigmoid, _dsigmoid),
    "linear": (_identity, _didentity),
}


@dataclass
class RegressorSpec:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    weight_decay: float = 0.0
    dropout: float = 0.0
    patience: int = 10
    seed: int = 0
    averaging: float = 0.0   # per-step decay of an exponential moving average of weights; 0 disables
    features: str = "raw"    # "effective-bid" appends q*theta and q*theta - r (interim only)
    gate: bool = False       # interim: predict exactly 0 when q*theta < r, fit the net on the other rows

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if any(h < 1 for h in self.hidden) or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("layer sizes, batch size and epochs must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.averaging < 1.0:
            raise ValueError("averaging decay must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.features not in FEATURES:
            raise ValueError(f"unknown feature set {self.features!r}")

    @classmethod
    def load(cls, path) -> "RegressorSpec":
        return cls(**json.loads(Path(path).read_text()))


# small tuning grid; "desk" is the setting used for the desk-scale experiments
TUNING_GRID = {
    "relu64x2": RegressorSpec(),
    "relu64x3": RegressorSpec(hidden=(64, 64, 64), batch_size=512, patience=20),
    "tanh64x2": RegressorSpec(activation="tanh", batch_size=512, patience=20),
    "tanh64x3": RegressorSpec(hidden=(64, 64, 64), activation="tanh", batch_size=512, patience=20),
    "desk-raw": RegressorSpec(hidden=(64, 64, 64), activation="tanh", batch_size=512, patience=20,
                              averaging=0.998),
    "desk": RegressorSpec(hidden=(64, 64, 64), activation="tanh", batch_size=512, patience=20,
                          averaging=0.998, features="effective-bid"),
}
DESK_SPEC = TUNING_GRID["desk"]


def spec_parse(descriptor) -> RegressorSpec:
    """Named entry of :data:`TUNING_GRID`, a JSON file path, or a dict."""
    if isinstance(descriptor, RegressorSpec):
        return descriptor
    if isinstance(descriptor, dict):
        return RegressorSpec(**descriptor)
    if descriptor in TUNING_GRID:
        return TUNING_GRID[descriptor]
    return RegressorSpec.load(descriptor)


def reserve_gate(x: np.ndarray, n_strategies: int) -> np.ndarray:
    """Rows of raw interim inputs whose deviator can meet the reserve at all (``q * theta >= r``)."""
    return x[:, n_strategies + 1] * x[:, n_strategies + 2] >= x[:, n_strategies]


def expand_inputs(x: np.ndarray, n_strategies: int, features: str = "raw") -> np.ndarray:
    """Append derived type features to raw interim inputs ``[sigma, r, q, theta]``."""
    if features == "raw" or x.shape[1] == n_strategies + 1:
        return x
    r, q, theta = x[:, n_strategies], x[:, n_strategies + 1], x[:, n_strategies + 2]
    cap = q * theta
    return np.concatenate([x, cap[:, None], (cap - r)[:, None]], axis=1)


class MLP:
    """Dense network with a linear output layer."""

    def __init__(self, sizes: Sequence[int], activation: str = "relu", rng=None):
        rng = as_rng(rng)
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        gain = 2.0 if activation == "relu" else 1.0
        for a, b in zip(self.sizes, self.sizes[1:]):
            self.weights.append(rng.normal(0.0, np.sqrt(gain / a), size=(a, b)))
            self.biases.append(np.zeros(b))

    @property
    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def forward(self, x, dropout: float = 0.0, rng=None, keep_cache: bool = False):
        """Output and, if requested, per-layer ``(input, pre-activation, activation, mask)``."""
        act, _ = ACTIVATIONS[self.activation]
        cache = []
        h = x
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if li == last:
                if keep_cache:
                    cache.append((h, z, None, None))
                return z, cache
            a = act(z)
            mask = None
            if dropout > 0.0:
                mask = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
            if keep_cache:
                cache.append((h, z, a, mask))
            h = a if mask is None else a * mask
        return h, cache

    def backward(self, cache, dout) -> list[np.ndarray]:
        """Gradients in :attr:`params` order given d loss / d output."""
        _, dact = ACTIVATIONS[self.activation]
        gw: list[np.ndarray] = [None] * len(self.weights)
        gb: list[np.ndarray] = [None] * len(self.weights)
        delta = dout
        for li in range(len(self.weights) - 1, -1, -1):
            h, z, a, mask = cache[li]
            if li != len(self.weights) - 1:
                if mask is not None:
                    delta = delta * mask
                delta = delta * dact(z, a)
            gw[li] = h.T @ delta
            gb[li] = delta.sum(axis=0)
            delta = delta @ self.weights[li].T
        return [g for pair in zip(gw, gb) for g in pair]

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "activation": self.activation,
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        net = cls.__new__(cls)
        net.sizes = tuple(d["sizes"])
        net.activation = d["activation"]
        net.weights = [np.asarray(w, dtype=np.float64).reshape(a, b)
                       for w, a, b in zip(d["weights"], net.sizes, net.sizes[1:])]
        net.biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        return net


def _mse_grad(net: MLP, x, y):
    out, cache = net.forward(x, keep_cache=True)
    diff = out - y
    loss = float(np.mean(diff**2))
    grads = net.backward(cache, 2.0 * diff / diff.size)
    return loss, grads


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and p.ndim == 2:
                p -= self.lr * self.wd * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class PayoffModel:
    """Trained regressor plus the normalization and game description it was fit on."""

    mode: str
    n_strategies: int
    net: MLP
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: float
    spec: RegressorSpec
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.n_strategies + (3 if self.mode == "interim" else 1)

    def predict_raw(self, x) -> np.ndarray:
        """Predictions for raw input rows ``[sigma, r]`` or ``[sigma, r, q, theta]``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        xe = expand_inputs(x, self.n_strategies, self.spec.features)
        out, _ = self.net.forward((xe - self.x_mean) / self.x_std)
        out = out * self.y_std + self.y_mean
        if self._gated:
            out *= reserve_gate(x, self.n_strategies)[:, None]
        return out

    @property
    def _gated(self) -> bool:
        return self.spec.gate and self.mode == "interim"

    def predict(self, sigma, r: float, t=None) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.shape != (self.n_strategies,):
            raise ValueError(f"mixture must have length {self.n_strategies}")
        if (t is None) != (self.mode == "ex_ante"):
            raise ValueError(f"{self.mode} model {'needs' if t is None else 'takes no'} deviator type")
        x = [*sigma, float(r)]
        if t is not None:
            x += [t.quality, t.valuation] if hasattr(t, "quality") else [float(t[0]), float(t[1])]
        return self.predict_raw(np.asarray(x))[0]

    def predict_types(self, sigma, r: float, types) -> np.ndarray:
        """Interim predictions ``(n, S)`` for one ``(sigma, r)`` at each row of ``types``."""
        if self.mode != "interim":
            raise ValueError("per-type predictions need an interim model")
        types = np.asarray(types, dtype=np.float64).reshape(-1, 2)
        head = np.broadcast_to(np.append(np.asarray(sigma, dtype=np.float64), float(r)),
                               (types.shape[0], self.n_strategies + 1))
        return self.predict_raw(np.concatenate([head, types], axis=1))

    def marginal_fn(self, r: float, types: Optional[np.ndarray] = None) -> Callable:
        """Batched ``sigmas (M, S) -> (M, S)`` deviation payoffs at reserve ``r``.

        Interim models average over the fixed ``types`` ``(n, 2)``; the input
        layer's type and reserve contributions are computed once.
        """
        S = self.n_strategies
        w0, b0 = self.net.weights[0], self.net.biases[0]
        xs = self.x_std
        if self.mode == "ex_ante":
            def fn(sig):
                sig = np.atleast_2d(sig)
                return self.predict_raw(np.concatenate([sig, np.full((sig.shape[0], 1), r)], axis=1))
            return fn
        if types is None:
            raise ValueError("interim marginalization needs type samples")
        types = np.asarray(types, dtype=np.float64)
        n_all = types.shape[0]
        if self._gated:
            types = types[types[:, 0] * types[:, 1] >= r]
            if types.shape[0] == 0:
                return lambda sig: np.zeros((np.atleast_2d(sig).shape[0], S))
        share = types.shape[0] / n_all
        raw = np.concatenate([np.zeros((types.shape[0], S)), np.full((types.shape[0], 1), r), types], axis=1)
        fixed = (expand_inputs(raw, S, self.spec.features)[:, S:] - self.x_mean[S:]) / xs[S:]
        base = fixed @ w0[S:] + b0 - (self.x_mean[:S] / xs[:S]) @ w0[:S]   # (n, H)
        w_sig = w0[:S] / xs[:S, None]
        act = ACTIVATIONS[self.net.activation][0]
        rest_w, rest_b = self.net.weights[1:], self.net.biases[1:]

        def fn(sig):
            sig = np.atleast_2d(sig)
            h = act((sig @ w_sig)[:, None, :] + base[None, :, :])
            h = h.reshape(-1, h.shape[-1])
            for li, (w, b) in enumerate(zip(rest_w, rest_b)):
                h = h @ w + b
                if li < len(rest_w) - 1:
                    h = act(h)
            out = h.reshape(sig.shape[0], types.shape[0], S).mean(axis=1)
            return share * (out * self.y_std + self.y_mean)

        return fn

    def to_dict(self) -> dict:
        return {
            "schema": MODEL_SCHEMA, "mode": self.mode, "n_strategies": self.n_strategies,
            "net": self.net.to_dict(), "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean.tolist(), "y_std": self.y_std,
            "spec": {**asdict(self.spec), "hidden": list(self.spec.hidden)}, "meta": self.meta,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "PayoffModel":
        if d.get("schema") != MODEL_SCHEMA:
            raise SchemaError(f"model schema {d.get('schema')} != {MODEL_SCHEMA}")
        return cls(d["mode"], d["n_strategies"], MLP.from_dict(d["net"]),
                   np.asarray(d["x_mean"]), np.asarray(d["x_std"]), np.asarray(d["y_mean"]),
                   float(d["y_std"]), RegressorSpec(**d["spec"]), d.get("meta", {}))

    @classmethod
    def load(cls, path) -> "PayoffModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Ensemble:
    """Equal-weight average of member models fit to the same dataset with different seeds."""

    def __init__(self, members: Sequence[PayoffModel]):
        if not members:
            raise ValueError("an ensemble needs at least one member")
        if len({(m.mode, m.n_strategies) for m in members}) != 1:
            raise ValueError("ensemble members disagree on mode or strategy count")
        self.members = list(members)
        first = self.members[0]
        self.mode, self.n_strategies, self.spec = first.mode, first.n_strategies, first.spec
        self.meta = {**first.meta, "members": len(self.members),
                     "val_mse": float(np.mean([m.meta.get("val_mse", np.nan) for m in self.members])),
                     "train_mse": float(np.mean([m.meta.get("train_mse", np.nan) for m in self.members]))}

    input_dim = PayoffModel.input_dim
    predict = PayoffModel.predict
    predict_types = PayoffModel.predict_types

    def predict_raw(self, x) -> np.ndarray:
        return np.mean([m.predict_raw(x) for m in self.members], axis=0)

    def marginal_fn(self, r: float, types: Optional[np.ndarray] = None) -> Callable:
        fns = [m.marginal_fn(r, types) for m in self.members]
        return lambda sig: np.mean([f(sig) for f in fns], axis=0)

    def to_dict(self) -> dict:
        return {"schema": MODEL_SCHEMA, "kind": "ensemble", "members": [m.to_dict() for m in self.members]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")


def load_model(path):
    """Single model or ensemble, whichever the file holds."""
    d = json.loads(Path(path).read_text())
    if d.get("kind") == "ensemble":
        if d.get("schema") != MODEL_SCHEMA:
            raise SchemaError(f"model schema {d.get('schema')} != {MODEL_SCHEMA}")
        return Ensemble([PayoffModel.from_dict(m) for m in d["members"]])
    return PayoffModel.from_dict(d)


def _assign(net: MLP, values) -> None:
    for p, v in zip(net.params, values):
        p[...] = v


def _normalizers(x, y):
    x_mean, x_std = x.mean(axis=0), x.std(axis=0)
    x_std = np.where(x_std > 1e-12, x_std, 1.0)
    y_mean = y.mean(axis=0)
    y_std = float((y - y_mean).std())
    return x_mean, x_std, y_mean, (y_std if y_std > 1e-12 else 1.0)


def train(d: Dataset, spec: RegressorSpec = RegressorSpec(), val: Optional[Dataset] = None,
          val_frac: float = 0.1) -> PayoffModel:
    """Minibatch Adam on mean squared error, early stopping on validation loss.

    Without ``val``, the dataset is split by pair. The model meta records final
    train and validation MSE in payoff units.
    """
    if len(d) == 0:
        raise ValueError("empty dataset")
    if val is None and d.m > 1:
        d, val = d.split(val_frac, spec.seed)
    if val is not None and val.form != d.form:
        raise ValueError("train and validation forms differ")
    gated = spec.gate and d.form == "interim"
    x_raw, y_all = d.arrays()
    keep = reserve_gate(x_raw, d.n_strategies) if gated else np.ones(len(x_raw), dtype=bool)
    if not keep.any():
        raise ValueError("no training row can meet its reserve")
    x, y = expand_inputs(x_raw[keep], d.n_strategies, spec.features), y_all[keep]
    x_mean, x_std, y_mean, y_std = _normalizers(x, y)
    xn, yn = (x - x_mean) / x_std, (y - y_mean) / y_std
    val_share = 1.0
    if val is not None and len(val):
        xv, yv = val.arrays()
        if gated:
            kv = reserve_gate(xv, d.n_strategies)
            if not kv.any():
                raise ValueError("no validation row can meet its reserve")
            val_share = float(kv.mean())
            xv, yv = xv[kv], yv[kv]
        xv = expand_inputs(xv, d.n_strategies, spec.features)
        xvn, yvn = (xv - x_mean) / x_std, (yv - y_mean) / y_std
    else:
        xvn, yvn = xn, yn
        val_share = float(keep.mean())
    rng = np.random.default_rng(spec.seed)
    net = MLP([x.shape[1], *spec.hidden, y.shape[1]], spec.activation, rng)
    opt = Adam(net.params, spec.learning_rate, weight_decay=spec.weight_decay)
    shadow = [p.copy() for p in net.params] if spec.averaging else None

    def mse(a, b):
        if shadow is None:
            return float(np.mean((net.forward(a)[0] - b) ** 2))
        live = [p.copy() for p in net.params]
        _assign(net, shadow)
        out = float(np.mean((net.forward(a)[0] - b) ** 2))
        _assign(net, live)
        return out

    snapshot = lambda: [p.copy() for p in (shadow if shadow is not None else net.params)]
    best = (mse(xvn, yvn), snapshot(), 0)
    history = [{"epoch": 0, "train": mse(xn, yn), "val": best[0]}]
    stale = 0
    n = xn.shape[0]
    for epoch in range(1, spec.epochs + 1):
        perm = rng.permutation(n)
        for s in range(0, n, spec.batch_size):
            idx = perm[s:s + spec.batch_size]
            out, cache = net.forward(xn[idx], spec.dropout, rng, keep_cache=True)
            diff = out - yn[idx]
            grads = net.backward(cache, 2.0 * diff / diff.size)
            opt.step(net.params, grads)
            if shadow is not None:
                for sp, p in zip(shadow, net.params):
                    sp *= spec.averaging
                    sp += (1.0 - spec.averaging) * p
        v = mse(xvn, yvn)
        if not np.isfinite(v):
            raise NumericError(f"validation loss became {v} at epoch {epoch}")
        history.append({"epoch": epoch, "val": v})
        if v < best[0] - 1e-12:
            best, stale = (v, snapshot(), epoch), 0
        else:
            stale += 1
            if stale >= spec.patience:
                break
    _assign(net, best[1])
    model = PayoffModel(d.form, d.n_strategies, net, x_mean, x_std, y_mean, y_std, spec)
    model.meta = {
        "strategies": d.meta.get("strategies"), "config": d.meta.get("config"),
        "r_range": d.meta.get("r_range"), "best_epoch": best[2], "epochs_run": epoch,
        "train_mse": float(np.mean((model.predict_raw(x_raw) - y_all) ** 2)),
        "val_mse": float(best[0] * y_std**2 * val_share),
        "initial_train_mse": float(history[0]["train"] * y_std**2 * keep.mean()),
    }
    log.info("trained %s model: best epoch %d, val mse %.4g", d.form, best[2], model.meta["val_mse"])
    return model


def train_ensemble(d: Dataset, spec: RegressorSpec = RegressorSpec(), n: int = 3, val: Optional[Dataset] = None):
    """``n`` members seeded ``spec.seed, spec.seed + 1, ...``; a plain model when ``n == 1``."""
    if n < 1:
        raise ValueError("ensemble size must be positive")
    members = [train(d, dataclasses.replace(spec, seed=spec.seed + i), val) for i in range(n)]
    return members[0] if n == 1 else Ensemble(members)


def predict(model: PayoffModel, sigma, r: float, t=None) -> np.ndarray:
    return model.predict(sigma, r, t)


def sample_types(rng, n: int, theta_max: float = 25.0) -> np.ndarray:
    rng = as_rng(rng)
    return np.stack([rng.random(n), rng.random(n) * theta_max], axis=1)


def marginalize(model: PayoffModel, sigma, r: float, n: int = 1000, rng=None,
                theta_max: float = 25.0) -> np.ndarray:
    """Mean interim prediction over ``n`` fresh deviator types."""
    if n < 1:
        raise ValueError("n must be positive")
    if model.mode != "interim":
        raise ValueError("marginalization needs an interim model")
    types = sample_types(rng, n, theta_max)
    return model.marginal_fn(r, types)(np.asarray(sigma, dtype=np.float64))[0]


def gradient_check(spec: Optional[RegressorSpec] = None, n_in: int = 4, n_out: int = 3,
                   n_examples: int = 8, seed: int = 0, h: float = 1e-6,
                   zero: bool = False) -> dict:
    """Compare backprop gradients of the MSE loss to central finite differences.

    Returns ``{"max_rel_error", "worst": (param, flat index), "passed", "grads",
    "min_abs_z"}``; ``min_abs_z`` is the hidden pre-activation closest to zero,
    where finite differences straddle a ReLU kink when it is below ``h``.
    """
    spec = spec or RegressorSpec(hidden=(5,), activation="tanh")
    rng = np.random.default_rng(seed)
    net = MLP([n_in, *spec.hidden, n_out], spec.activation, rng)
    for b in net.biases:
        b[...] = rng.normal(scale=0.5, size=b.shape)   # zero biases put deep ReLU nets on kinks
    x = rng.normal(size=(n_examples, n_in))
    y = rng.normal(size=(n_examples, n_out))
    if zero:
        for p in net.params:
            p[...] = 0.0
        x[...] = 0.0
        y[...] = 0.0
    _, grads = _mse_grad(net, x, y)
    worst, worst_at = 0.0, None
    for pi, p in enumerate(net.params):
        flat = p.reshape(-1)
        g = grads[pi].reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            lp = _mse_grad(net, x, y)[0]
            flat[k] = old - h
            lm = _mse_grad(net, x, y)[0]
            flat[k] = old
            num = (lp - lm) / (2 * h)
            err = abs(num - g[k]) / max(abs(num) + abs(g[k]), 1e-7)
            if err > worst:
                worst, worst_at = err, (pi, k)
    zs = [c[1] for c in net.forward(x, keep_cache=True)[1][:-1]]
    min_abs_z = min((float(np.abs(z).min()) for z in zs), default=np.inf)
    return {"max_rel_error": worst, "worst": worst_at, "passed": worst < 1e-4,
            "grads": grads, "min_abs_z": min_abs_z}
