"""Local Kaplan–Meier estimation of the censoring survival function.

For an observation ``i`` with kernel weights ``w = W[i]`` over the sample,

    G(y | i) = prod_{k: Y_k <= y, delta_k = 0} (1 - w_k / S(Y_k | i)),
    S(t | i) = sum_l w_l * 1{Y_l >= t}.

``W`` rows sum to one; the paper-scale weights ``B = n * W`` appear only
in the influence kernel, which is stored as ``Phi[j, i]`` so that
``G_hat_i - G_i`` is approximately ``mean_j Phi[j, i]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import DegenerateNeighborhoodError
from .kernels import (
    DEFAULT_BANDWIDTH_CONSTANT,
    DEFAULT_ORDER,
    KernelSpec,
    nw_weight_matrix,
    nw_weights,
)

__all__ = [
    "DEFAULT_CONDITIONING",
    "CensoringModel",
    "PhiKernel",
    "product_limit",
    "fit_local_km",
    "uncensored_model",
    "g_eval",
    "phi_kernel",
]

DEFAULT_CONDITIONING = ("a", "x")
_BLOCK = 256


@dataclass(frozen=True)
class _SortedSample:
    """Sample sorted by ``y``, with censored positions pre-extracted."""

    order: np.ndarray
    ys: np.ndarray
    first: np.ndarray
    cens_pos: np.ndarray
    ys_cens: np.ndarray

    @classmethod
    def build(cls, y: np.ndarray, delta: np.ndarray) -> "_SortedSample":
        order = np.argsort(y, kind="stable")
        ys = y[order]
        cens_pos = np.flatnonzero(delta[order] == 0.0)
        return cls(order, ys, np.searchsorted(ys, ys, side="left"), cens_pos, ys[cens_pos])

    def at_risk(self, ws: np.ndarray) -> np.ndarray:
        """Weighted at-risk mass ``S(Y_k)`` at censored positions.

        ``ws`` holds weight rows already permuted into sorted order.
        """
        tail = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1]
        return tail[:, self.first[self.cens_pos]]

    def log_factors(self, ws: np.ndarray) -> np.ndarray:
        """Cumulative log product-limit factors over censored positions.

        Tied censoring times share one factor ``1 - sum(w) / S``, stored on
        the last member of the tie; lookups through :meth:`n_cens_upto`
        always land on a complete tie.
        """
        wc = ws[:, self.cens_pos]
        s = self.at_risk(ws)
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(wc > 0.0, wc / s, 0.0)
        starts = np.flatnonzero(np.r_[True, np.diff(self.ys_cens) != 0])
        if starts.size < frac.shape[1]:
            grouped = np.add.reduceat(frac, starts, axis=1)
            frac = np.zeros_like(frac)
            frac[:, np.r_[starts[1:], frac.shape[1]] - 1] = grouped
        with np.errstate(divide="ignore"):
            logf = np.log(np.clip(1.0 - frac, 0.0, 1.0))
        return np.cumsum(logf, axis=1)

    def n_cens_upto(self, t: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.ys_cens, t, side="right")


def _evaluate(cum: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``exp(cum[r, k[r] - 1])`` with an empty product giving 1."""
    rows = np.arange(cum.shape[0])
    padded = np.concatenate([np.zeros((cum.shape[0], 1)), cum], axis=1)
    return np.exp(padded[rows, k])


def product_limit(y, delta, weights, times) -> np.ndarray:
    """Weighted product-limit curve of the censoring distribution.

    Parameters
    ----------
    y, delta : array_like of shape (n,)
    weights : array_like of shape (n,)
        Non-negative weights summing to one.
    times : array_like
        Evaluation points.

    Returns
    -------
    ndarray
        Unfloored values of ``G(t)``, same shape as ``times``.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    delta = np.asarray(delta, dtype=float).reshape(-1)
    times = np.asarray(times, dtype=float)
    ss = _SortedSample.build(y, delta)
    ws = np.asarray(weights, dtype=float).reshape(1, -1)[:, ss.order]
    cum = ss.log_factors(ws)
    k = ss.n_cens_upto(times.reshape(-1))
    out = _evaluate(np.repeat(cum, k.size, axis=0), k)
    return out.reshape(times.shape)


@dataclass(frozen=True)
class CensoringModel:
    """Fitted local Kaplan–Meier model.

    Attributes
    ----------
    y, delta : ndarray of shape (n,)
    conditioning : tuple of str
        Columns of ``(A, Z, X)`` defining the kernel distance.
    points : ndarray of shape (n, q)
        Conditioning coordinates of the sample.
    spec : KernelSpec or None
        ``None`` for the censoring-free model.
    weights : ndarray of shape (n, n) or None
        Row ``i`` holds the weights of the neighborhood of observation ``i``.
    g_hat : ndarray of shape (n,)
        ``G(Y_i | O_A,i)`` floored at ``eps_g``.
    eps_g : float
    """

    y: np.ndarray
    delta: np.ndarray
    conditioning: tuple[str, ...]
    points: np.ndarray
    spec: KernelSpec | None
    weights: np.ndarray | None
    g_hat: np.ndarray
    eps_g: float

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def censored(self) -> bool:
        return bool(np.any(self.delta == 0.0))

    def b_matrix(self) -> np.ndarray:
        """Paper-scale weights ``B = n * W`` (rows average to one)."""
        if self.weights is None:
            return np.ones((self.n, self.n))
        return self.n * self.weights

    def curve(self, i: int, times) -> np.ndarray:
        """``G(t | O_A,i)`` on the neighborhood of observation ``i`` (floored)."""
        times = np.asarray(times, dtype=float)
        if not self.censored:
            return np.ones_like(times)
        vals = product_limit(self.y, self.delta, self.weights[i], times)
        return np.maximum(vals, self.eps_g)


def fit_local_km(
    ds: Dataset,
    conditioning: Sequence[str] = DEFAULT_CONDITIONING,
    spec: KernelSpec | None = None,
    eps_g: float = 0.05,
    bandwidth_constant: float = DEFAULT_BANDWIDTH_CONSTANT,
    kernel_order: int | None = DEFAULT_ORDER,
) -> CensoringModel:
    """Fit the local Kaplan–Meier model on a standardized dataset.

    Parameters
    ----------
    ds : Dataset
        Standardized on the conditioning columns.
    conditioning : sequence of str
        Group tokens (``"a"``, ``"z"``, ``"x"``) or column names.
    spec : KernelSpec, optional
        Defaults to :meth:`KernelSpec.default` for the conditioning dimension.
    eps_g : float
        Floor applied to fitted survival values.
    bandwidth_constant : float
        Constant of the default bandwidth; ignored when ``spec`` is given.
    kernel_order : int or None
        Order of the default kernel; ``None`` matches it to the
        conditioning dimension. Ignored when ``spec`` is given.
    """
    conditioning = tuple(conditioning)
    if not conditioning:
        raise ValueError("conditioning set must be nonempty")
    points = ds.columns(conditioning)
    if points.shape[1] == 0:
        raise ValueError(f"conditioning set {conditioning} selects no columns")
    if spec is None:
        spec = KernelSpec.default(ds.n, points.shape[1], bandwidth_constant, kernel_order)
    elif spec.conditioning_dim != points.shape[1]:
        raise ValueError(
            f"kernel spec expects {spec.conditioning_dim} conditioning columns, "
            f"got {points.shape[1]}"
        )

    weights = nw_weight_matrix(points, spec)
    weights.flags.writeable = False
    ss = _SortedSample.build(ds.y, ds.delta)
    g_hat = np.ones(ds.n)
    if ss.cens_pos.size:
        for start in range(0, ds.n, _BLOCK):
            stop = min(start + _BLOCK, ds.n)
            cum = ss.log_factors(weights[start:stop][:, ss.order])
            g_hat[start:stop] = _evaluate(cum, ss.n_cens_upto(ds.y[start:stop]))
    g_hat = np.maximum(g_hat, eps_g)
    g_hat.flags.writeable = False
    return CensoringModel(
        y=ds.y, delta=ds.delta, conditioning=conditioning, points=points,
        spec=spec, weights=weights, g_hat=g_hat, eps_g=eps_g,
    )


def uncensored_model(ds: Dataset) -> CensoringModel:
    """Trivial model ``G = 1`` for data without censoring."""
    if ds.censored:
        raise ValueError("dataset contains censored observations")
    g_hat = np.ones(ds.n)
    g_hat.flags.writeable = False
    return CensoringModel(
        y=ds.y, delta=ds.delta, conditioning=(), points=np.empty((ds.n, 0)),
        spec=None, weights=None, g_hat=g_hat, eps_g=0.0,
    )


def g_eval(model: CensoringModel, y: float, query) -> float:
    """``G(y | query)`` floored at the model's ``eps_g``.

    ``query`` is a point in the model's (standardized) conditioning space.
    """
    if not model.censored:
        return 1.0
    try:
        w = nw_weights(model.points, np.asarray(query, dtype=float), model.spec)
    except DegenerateNeighborhoodError as exc:
        raise DegenerateNeighborhoodError(
            f"all kernel weights vanish at query {np.asarray(query).tolist()}"
        ) from exc
    val = float(product_limit(model.y, model.delta, w, np.array([y]))[0])
    return max(val, model.eps_g)


@dataclass(frozen=True)
class PhiKernel:
    """Influence kernel of the censoring estimator.

    Stored transposed: ``phi_t[i, j] = Phi[j, i]``. Use :attr:`matrix` for
    the ``Phi[j, i]`` orientation; matrix-vector products with
    :meth:`apply` contract over ``i``.
    """

    phi_t: np.ndarray | None
    n: int

    @property
    def zero(self) -> bool:
        return self.phi_t is None

    @property
    def matrix(self) -> np.ndarray:
        if self.phi_t is None:
            return np.zeros((self.n, self.n))
        return self.phi_t.T

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``sum_i Phi[j, i] * v[i, ...]`` for every ``j``."""
        v = np.asarray(v, dtype=float)
        if self.phi_t is None:
            return np.zeros((self.n,) + v.shape[1:])
        return self.phi_t.T @ v


def phi_kernel(model: CensoringModel) -> PhiKernel:
    """Build ``Phi[j, i]`` for all pairs.

    ``Phi[j, i] = -B[i, j] G_i (1{Y_j <= Y_i, delta_j = 0} / S(Y_j | i)
    - sum_{k: delta_k = 0, Y_k <= min(Y_j, Y_i)} W[i, k] / S(Y_k | i)**2)``
    with ``S`` floored at ``eps_g``.
    """
    n = model.n
    if not model.censored:
        return PhiKernel(None, n)
    ss = _SortedSample.build(model.y, model.delta)
    inv = np.empty(n, dtype=np.intp)
    inv[ss.order] = np.arange(n)
    # number of censored points with time <= Y_j, for every j in sorted order
    k_sorted = ss.n_cens_upto(ss.ys)

    phi_t = np.empty((n, n))
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        rows = np.arange(start, stop)
        ws = model.weights[start:stop][:, ss.order]
        s = np.maximum(ss.at_risk(ws), model.eps_g)
        jump = np.concatenate(
            [np.zeros((rows.size, 1)), np.cumsum(ws[:, ss.cens_pos] / s**2, axis=1)], axis=1
        )
        cap = ss.n_cens_upto(model.y[rows])
        kk = np.minimum(k_sorted[None, :], cap[:, None])
        term = -np.take_along_axis(jump, kk, axis=1)
        # indicator part: censored j with Y_j <= Y_i
        ind = (ss.ys[None, ss.cens_pos] <= model.y[rows][:, None])
        term[:, ss.cens_pos] += np.where(ind, 1.0 / s, 0.0)
        block = -n * ws * model.g_hat[rows][:, None] * term
        phi_t[start:stop] = block[:, inv]
    return PhiKernel(phi_t, n)
