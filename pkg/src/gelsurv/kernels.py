"""Higher-order Cauchy-family kernels and Nadaraya–Watson weights.

Each kernel of order ``r`` integrates to one and has vanishing even
moments of order ``2 <= i < r``. Orders above 2 take negative values,
so weights are truncated at zero and renormalized before use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateNeighborhoodError

__all__ = [
    "SUPPORTED_ORDERS",
    "DEFAULT_ORDER",
    "DEFAULT_BANDWIDTH_CONSTANT",
    "KernelSpec",
    "kernel_eval",
    "kernel_order_for",
    "default_bandwidth",
    "nw_weights",
    "nw_weight_matrix",
]

SUPPORTED_ORDERS = (2, 4, 6, 8)

# Higher orders lose most of their mass to the truncation of negative weights
# in several dimensions, leaving a handful of effective neighbors; the
# second-order kernel with a wide constant keeps neighborhoods populated.
DEFAULT_ORDER = 2
DEFAULT_BANDWIDTH_CONSTANT = 4.0


def _k2(s: np.ndarray) -> np.ndarray:
    return 2.0 / (np.pi * s**2)


def _k4(u2: np.ndarray, s: np.ndarray) -> np.ndarray:
    return 4.0 * (1.0 - u2) / (np.pi * s**4)


def _k6(u2: np.ndarray, s: np.ndarray) -> np.ndarray:
    return 2.0 * (3.0 * u2**2 - 10.0 * u2 + 3.0) / (np.pi * s**6)


def _k8(u2: np.ndarray, s: np.ndarray) -> np.ndarray:
    return 8.0 * (1.0 - 7.0 * u2 + 7.0 * u2**2 - u2**3) / (np.pi * s**8)


def kernel_eval(order: int, u):
    """Evaluate the kernel of the given order.

    Parameters
    ----------
    order : {2, 4, 6, 8}
    u : float or array_like

    Returns
    -------
    float or ndarray
        Same shape as ``u``. The kernel depends on ``u`` only through
        ``u**2`` so it is exactly even.
    """
    if order not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported kernel order {order}; supported: {SUPPORTED_ORDERS}")
    u2 = np.square(np.asarray(u, dtype=float))
    s = 1.0 + u2
    if order == 2:
        out = _k2(s)
    elif order == 4:
        out = _k4(u2, s)
    elif order == 6:
        out = _k6(u2, s)
    else:
        out = _k8(u2, s)
    return float(out) if out.ndim == 0 else out


def kernel_order_for(q: int) -> int:
    """Smallest available even order at least ``floor(3q/2) + 1``, capped at 8."""
    if q < 1:
        raise ValueError("q must be >= 1")
    target = min(3 * q // 2 + 1, 8)
    return next(r for r in SUPPORTED_ORDERS if r >= target)


def default_bandwidth(n: int, q: int, constant: float = 1.0) -> float:
    """Bandwidth ``c * n**(-1 / (3q + 2))``."""
    return float(constant) * float(n) ** (-1.0 / (3.0 * q + 2.0))


@dataclass(frozen=True)
class KernelSpec:
    """Product kernel over ``conditioning_dim`` standardized coordinates."""

    order: int
    bandwidth: float
    conditioning_dim: int

    def __post_init__(self) -> None:
        if self.order not in SUPPORTED_ORDERS:
            raise ValueError(
                f"unsupported kernel order {self.order}; supported: {SUPPORTED_ORDERS}"
            )
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError("bandwidth must be positive and finite")
        if self.conditioning_dim < 1:
            raise ValueError("conditioning_dim must be >= 1")

    @classmethod
    def default(
        cls,
        n: int,
        q: int,
        constant: float = DEFAULT_BANDWIDTH_CONSTANT,
        order: int | None = DEFAULT_ORDER,
    ) -> "KernelSpec":
        """Rate-matched bandwidth; ``order=None`` picks :func:`kernel_order_for`."""
        return cls(
            order=kernel_order_for(q) if order is None else order,
            bandwidth=default_bandwidth(n, q, constant),
            conditioning_dim=q,
        )


def _raw_product(points: np.ndarray, queries: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Raw product-kernel values, shape (len(queries), len(points))."""
    out = np.ones((queries.shape[0], points.shape[0]))
    for k in range(points.shape[1]):
        u = (queries[:, k][:, None] - points[:, k][None, :]) / spec.bandwidth
        out *= kernel_eval(spec.order, u)
    return out


def _normalize(raw: np.ndarray, offset: int = 0) -> np.ndarray:
    np.maximum(raw, 0.0, out=raw)
    total = raw.sum(axis=1)
    bad = np.flatnonzero(~(total > 0.0))
    if bad.size:
        idx = int(bad[0]) + offset
        raise DegenerateNeighborhoodError(
            f"all kernel weights vanish for query {idx}; try a larger bandwidth",
            query_index=idx,
        )
    raw /= total[:, None]
    return raw


def nw_weights(points: np.ndarray, query: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Truncated and renormalized Nadaraya–Watson weights for one query.

    Parameters
    ----------
    points : ndarray of shape (n, q)
    query : ndarray of shape (q,)
    spec : KernelSpec

    Returns
    -------
    ndarray of shape (n,)
        Non-negative weights summing to one.
    """
    points = np.asarray(points, dtype=float).reshape(len(points), -1)
    query = np.asarray(query, dtype=float).reshape(1, -1)
    return _normalize(_raw_product(points, query, spec))[0]


def nw_weight_matrix(
    points: np.ndarray,
    spec: KernelSpec,
    queries: np.ndarray | None = None,
    chunk: int = 512,
) -> np.ndarray:
    """Row-stacked weights; row ``i`` holds the weights for ``queries[i]``.

    ``queries`` defaults to ``points`` itself, giving the n×n matrix used by
    the local Kaplan–Meier fit.
    """
    points = np.asarray(points, dtype=float).reshape(len(points), -1)
    queries = points if queries is None else np.asarray(queries, dtype=float).reshape(
        -1, points.shape[1])
    out = np.empty((queries.shape[0], points.shape[0]))
    for start in range(0, queries.shape[0], chunk):
        stop = min(start + chunk, queries.shape[0])
        out[start:stop] = _normalize(_raw_product(points, queries[start:stop], spec), start)
    return out
