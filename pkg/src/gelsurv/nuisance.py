"""Nuisance learners, residual bundle and the censoring augmentation.

Two learners are available: ordinary least squares and a fully connected
ReLU network trained with Adam and early stopping. Both produce
predictors with a ``predict(features)`` method.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from .censoring import CensoringModel
from .data import Dataset
from .errors import AllCensoredError, DivergenceError, GelSurvError, InputError

__all__ = [
    "LearnerSpec",
    "Predictor",
    "ConstantPredictor",
    "LinearPredictor",
    "FeedforwardPredictor",
    "NuisanceBundle",
    "XiComponents",
    "fit_linear",
    "fit_feedforward",
    "fit_learner",
    "fit_nuisance_bundle",
    "xi_components",
    "save_bundle",
    "load_bundle",
]

logger = logging.getLogger(__name__)

LEARNER_KINDS = ("linear", "feedforward")


@dataclass(frozen=True)
class LearnerSpec:
    """Learner choice and network hyperparameters.

    The network fields are ignored by the linear learner.
    """

    kind: str = "feedforward"
    depth: int = 2
    width: int = 50
    learning_rate: float = 5e-4
    batch_size: int = 256
    max_epochs: int = 1000
    validation_fraction: float = 0.05
    patience: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"learner kind must be one of {LEARNER_KINDS}, got {self.kind!r}")
        for name in ("depth", "width", "batch_size", "max_epochs", "patience"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5)")


class Predictor(Protocol):
    def predict(self, features: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ConstantPredictor:
    value: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(features).shape[0], self.value)


@dataclass(frozen=True)
class LinearPredictor:
    coef: np.ndarray
    intercept: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.coef + self.intercept


def fit_linear(features: np.ndarray, targets: np.ndarray) -> Predictor:
    """Least squares with intercept.

    A rank-deficient design falls back to a ridge solve with penalty
    ``1e-8`` on the centered problem and logs a warning.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] == 0:
        return ConstantPredictor(float(y.mean()))
    n, p = X.shape
    if n <= p:
        raise InputError(f"linear learner needs n > p, got n={n}, p={p}")
    x_bar, y_bar = X.mean(axis=0), y.mean()
    Xc = X - x_bar
    yc = y - y_bar
    gram = Xc.T @ Xc
    if np.linalg.matrix_rank(Xc) < p:
        logger.warning("rank-deficient design (%d columns); using ridge penalty 1e-8", p)
        coef = np.linalg.solve(gram + 1e-8 * np.eye(p), Xc.T @ yc)
    else:
        coef = np.linalg.lstsq(Xc, yc, rcond=None)[0]
    return LinearPredictor(coef, float(y_bar - x_bar @ coef))


# ---------------------------------------------------------------------------
# feedforward network


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(sizes: list[int], rng: np.random.Generator) -> list[np.ndarray]:
    """Glorot-uniform weights and zero biases, as ``[W1, b1, W2, b2, ...]``."""
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        params.append(_glorot(rng, fan_in, fan_out))
        params.append(np.zeros(fan_out))
    return params


def forward(params: list[np.ndarray], X: np.ndarray) -> np.ndarray:
    h = X
    n_layers = len(params) // 2
    for k in range(n_layers):
        h = h @ params[2 * k] + params[2 * k + 1]
        if k < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h[:, 0]


def loss_and_grad(
    params: list[np.ndarray], X: np.ndarray, y: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Mean squared error and its gradient by backpropagation."""
    n_layers = len(params) // 2
    acts = [X]
    pre = []
    h = X
    for k in range(n_layers):
        z = h @ params[2 * k] + params[2 * k + 1]
        pre.append(z)
        h = np.maximum(z, 0.0) if k < n_layers - 1 else z
        acts.append(h)
    resid = h[:, 0] - y
    loss = float(np.mean(resid**2))

    grads: list[np.ndarray] = [np.empty(0)] * len(params)
    d = (2.0 / y.shape[0]) * resid[:, None]
    for k in range(n_layers - 1, -1, -1):
        grads[2 * k] = acts[k].T @ d
        grads[2 * k + 1] = d.sum(axis=0)
        if k > 0:
            d = (d @ params[2 * k].T) * (pre[k - 1] > 0.0)
    return loss, grads


class _Adam:
    def __init__(self, params: list[np.ndarray], lr: float,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class FeedforwardPredictor:
    """Trained network with its input and output scaling."""

    params: tuple[np.ndarray, ...]
    x_center: np.ndarray
    x_scale: np.ndarray
    y_center: float
    y_scale: float
    epochs: int = 0

    def predict(self, features: np.ndarray) -> np.ndarray:
        X = (np.asarray(features, dtype=float) - self.x_center) / self.x_scale
        return forward(list(self.params), X) * self.y_scale + self.y_center


def _scale(v: np.ndarray) -> np.ndarray:
    s = np.std(v, axis=0)
    return np.where(s > 1e-12, s, 1.0)


def fit_feedforward(features: np.ndarray, targets: np.ndarray, spec: LearnerSpec) -> Predictor:
    """Train a ReLU network on squared error with early stopping.

    Inputs and targets are standardized internally using the training
    split. The returned parameters are those with the lowest validation
    loss.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] == 0:
        return ConstantPredictor(float(y.mean()))
    n = X.shape[0]
    if n < 20:
        raise InputError(f"feedforward learner needs n >= 20, got {n}")

    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(spec.validation_fraction * n)))
    val, train = perm[:n_val], perm[n_val:]

    x_c, x_s = X[train].mean(axis=0), _scale(X[train])
    y_c, y_s = float(y[train].mean()), float(_scale(y[train]))
    Xs = (X - x_c) / x_s
    ys = (y - y_c) / y_s
    Xt, yt, Xv, yv = Xs[train], ys[train], Xs[val], ys[val]

    params = init_params([X.shape[1]] + [spec.width] * spec.depth + [1], rng)
    opt = _Adam(params, spec.learning_rate)
    best = [p.copy() for p in params]
    best_loss = float(np.mean((forward(params, Xv) - yv) ** 2))
    stale = 0
    epoch = 0
    for epoch in range(1, spec.max_epochs + 1):
        order = rng.permutation(train.size)
        for start in range(0, train.size, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            loss, grads = loss_and_grad(params, Xt[idx], yt[idx])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}; "
                    f"try a learning rate below {spec.learning_rate:g}"
                )
            opt.step(params, grads)
        val_loss = float(np.mean((forward(params, Xv) - yv) ** 2))
        if not np.isfinite(val_loss):
            raise DivergenceError(
                f"non-finite validation loss at epoch {epoch}; "
                f"try a learning rate below {spec.learning_rate:g}"
            )
        if val_loss < best_loss:
            best_loss = val_loss
            best = [p.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= spec.patience:
                break
    return FeedforwardPredictor(tuple(best), x_c, x_s, y_c, y_s, epochs=epoch)


def fit_learner(features: np.ndarray, targets: np.ndarray, spec: LearnerSpec) -> Predictor:
    if spec.kind == "linear":
        return fit_linear(features, targets)
    return fit_feedforward(features, targets, spec)


# ---------------------------------------------------------------------------
# bundle


@dataclass(frozen=True)
class NuisanceBundle:
    """Fitted nuisances and in-sample residuals.

    Attributes
    ----------
    predictors : dict
        ``f1..fm`` (instruments on X), ``h1`` and ``h2`` (A and Y on Z, X),
        ``h3`` and ``h4`` (residual products on X).
    r_z : ndarray of shape (n, m)
    r_a, r_y : ndarray of shape (n,)
    h3, h4 : ndarray of shape (n,)
        In-sample predictions of ``E(R_A R_Y | X)`` and ``E(R_A^2 | X)``.
    """

    predictors: dict = field(repr=False)
    r_z: np.ndarray
    r_a: np.ndarray
    r_y: np.ndarray
    h3: np.ndarray
    h4: np.ndarray
    spec: LearnerSpec | None = None


def fit_nuisance_bundle(ds: Dataset, spec: LearnerSpec) -> NuisanceBundle:
    """Fit every nuisance in sample.

    Each learner gets its own seed spawned from ``spec.seed``. With no
    covariates the X-regressions reduce to unconditional means.
    """
    m = ds.m
    seeds = np.random.SeedSequence(spec.seed).spawn(m + 4)

    def sub(k: int) -> LearnerSpec:
        s = int(seeds[k].generate_state(1)[0])
        return replace(spec, seed=s)

    def fit(name: str, k: int, features: np.ndarray, target: np.ndarray) -> Predictor:
        try:
            return fit_learner(features, target, sub(k))
        except GelSurvError as exc:
            raise type(exc)(f"nuisance {name}: {exc}") from exc

    preds: dict[str, Predictor] = {}
    r_z = np.empty((ds.n, m))
    for j in range(m):
        name = f"f{j + 1}"
        preds[name] = fit(name, j, ds.x, ds.z[:, j])
        r_z[:, j] = ds.z[:, j] - preds[name].predict(ds.x)
    zx = ds.zx
    preds["h1"] = fit("h1", m, zx, ds.a)
    preds["h2"] = fit("h2", m + 1, zx, ds.y)
    r_a = ds.a - preds["h1"].predict(zx)
    r_y = ds.y - preds["h2"].predict(zx)
    preds["h3"] = fit("h3", m + 2, ds.x, r_a * r_y)
    preds["h4"] = fit("h4", m + 3, ds.x, r_a**2)
    return NuisanceBundle(
        predictors=preds, r_z=r_z, r_a=r_a, r_y=r_y,
        h3=preds["h3"].predict(ds.x), h4=preds["h4"].predict(ds.x), spec=spec,
    )


@dataclass(frozen=True)
class XiComponents:
    """Augmentation ``xi(beta; O_A,i) = Xi0[i] - beta * Xi1[i]``."""

    xi0: np.ndarray
    xi1: np.ndarray

    def at(self, beta: float) -> np.ndarray:
        return self.xi0 - beta * self.xi1


def xi_components(ds: Dataset, bundle: NuisanceBundle, cens: CensoringModel) -> XiComponents:
    """Kernel-smoothed inverse-probability-weighted average of ``g``.

    Row ``k`` averages ``delta_i / G_i * g_i`` over the neighborhood of
    observation ``k``.
    """
    from .moments import build_g

    if not np.any(ds.delta == 1.0):
        raise AllCensoredError("every observation is censored; the moments are degenerate")
    g0, g1 = build_g(ds, bundle)
    if cens.weights is None:
        if cens.censored:
            raise ValueError("censoring model without weights on censored data")
        zero = np.zeros_like(g0)
        return XiComponents(zero, zero.copy())
    w = ds.delta / cens.g_hat
    return XiComponents(cens.weights @ (w[:, None] * g0), cens.weights @ (w[:, None] * g1))


# ---------------------------------------------------------------------------
# persistence

_MAGIC = b"GELSURVB"
_VERSION = 1


def _predictor_record(name: str, p: Predictor, tensors: list[np.ndarray]) -> dict:
    def put(a) -> int:
        tensors.append(np.asarray(a, dtype="<f8"))
        return len(tensors) - 1

    if isinstance(p, ConstantPredictor):
        return {"name": name, "kind": "constant", "value": put([p.value])}
    if isinstance(p, LinearPredictor):
        return {"name": name, "kind": "linear", "coef": put(p.coef),
                "intercept": put([p.intercept])}
    if isinstance(p, FeedforwardPredictor):
        return {"name": name, "kind": "feedforward",
                "params": [put(t) for t in p.params],
                "x_center": put(p.x_center), "x_scale": put(p.x_scale),
                "y": put([p.y_center, p.y_scale]), "epochs": p.epochs}
    raise TypeError(f"cannot persist predictor of type {type(p).__name__}")


def _predictor_from(rec: dict, tensors: list[np.ndarray]) -> Predictor:
    if rec["kind"] == "constant":
        return ConstantPredictor(float(tensors[rec["value"]][0]))
    if rec["kind"] == "linear":
        return LinearPredictor(tensors[rec["coef"]], float(tensors[rec["intercept"]][0]))
    y = tensors[rec["y"]]
    return FeedforwardPredictor(
        tuple(tensors[k] for k in rec["params"]), tensors[rec["x_center"]],
        tensors[rec["x_scale"]], float(y[0]), float(y[1]), rec.get("epochs", 0),
    )


def save_bundle(path: str | Path, bundle: NuisanceBundle) -> None:
    """Write a bundle as magic bytes, a JSON header and little-endian float64 tensors."""
    tensors: list[np.ndarray] = []
    records = [_predictor_record(k, p, tensors) for k, p in bundle.predictors.items()]
    arrays = {}
    for name in ("r_z", "r_a", "r_y", "h3", "h4"):
        tensors.append(np.asarray(getattr(bundle, name), dtype="<f8"))
        arrays[name] = len(tensors) - 1
    header = {
        "version": _VERSION,
        "spec": asdict(bundle.spec) if bundle.spec is not None else None,
        "predictors": records,
        "arrays": arrays,
        "shapes": [list(t.shape) for t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_bundle(path: str | Path) -> NuisanceBundle:
    raw = Path(path).read_bytes()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise InputError(f"{path} is not a nuisance bundle file")
    off = len(_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != _VERSION:
        raise InputError(f"unsupported bundle version {version}")
    off += 8
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    tensors = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        tensors.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off)
                       .reshape(shape).astype(float))
        off += 8 * count
    preds = {rec["name"]: _predictor_from(rec, tensors) for rec in header["predictors"]}
    arr = {k: tensors[v] for k, v in header["arrays"].items()}
    spec = LearnerSpec(**header["spec"]) if header["spec"] else None
    return NuisanceBundle(predictors=preds, spec=spec, **arr)
