"""Generalized empirical likelihood saddle point for a scalar ``beta``.

For a family ``rho`` and affine moments ``psi(beta) = psi0 - beta * psi1``
the profile objective is

    Q(beta) = max_lambda mean_i rho(lambda' psi_i(beta)),

and the estimator minimizes ``Q`` over a compact interval.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DomainError, WeakIdentificationError

__all__ = [
    "RhoFamily",
    "FAMILIES",
    "get_family",
    "rho_eval",
    "LambdaSolution",
    "solve_lambda",
    "profile_derivatives",
    "GelFit",
    "estimate_beta",
    "closed_form_beta",
]

logger = logging.getLogger(__name__)

_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0
_EL_MARGIN = 1e-6


class RhoFamily:
    """Concave ``rho`` with ``rho(0) = 0`` and ``rho'(0) = rho''(0) = -1``."""

    tag = ""

    def in_domain(self, v: np.ndarray) -> bool:
        return True

    def value(self, v):
        raise NotImplementedError

    def d1(self, v):
        raise NotImplementedError

    def d2(self, v):
        raise NotImplementedError

    def d3(self, v):
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"RhoFamily({self.tag})"


class _EL(RhoFamily):
    tag = "EL"

    def in_domain(self, v) -> bool:
        return bool(np.all(np.asarray(v) < 1.0))

    def value(self, v):
        return np.log1p(-np.asarray(v, dtype=float))

    def d1(self, v):
        return -1.0 / (1.0 - np.asarray(v, dtype=float))

    def d2(self, v):
        return -1.0 / (1.0 - np.asarray(v, dtype=float)) ** 2

    def d3(self, v):
        return -2.0 / (1.0 - np.asarray(v, dtype=float)) ** 3


class _ET(RhoFamily):
    tag = "ET"

    def value(self, v):
        return 1.0 - np.exp(v)

    def d1(self, v):
        return -np.exp(v)

    def d2(self, v):
        return -np.exp(v)

    def d3(self, v):
        return -np.exp(v)


class _CUE(RhoFamily):
    tag = "CUE"

    def value(self, v):
        v = np.asarray(v, dtype=float)
        return -v - 0.5 * v * v

    def d1(self, v):
        return -1.0 - np.asarray(v, dtype=float)

    def d2(self, v):
        return -np.ones_like(np.asarray(v, dtype=float))

    def d3(self, v):
        return np.zeros_like(np.asarray(v, dtype=float))


FAMILIES: dict[str, RhoFamily] = {f.tag: f for f in (_EL(), _ET(), _CUE())}


def get_family(family: str | RhoFamily) -> RhoFamily:
    if isinstance(family, RhoFamily):
        return family
    try:
        return FAMILIES[str(family).upper()]
    except KeyError:
        raise ValueError(f"unknown rho family {family!r}; choose from {sorted(FAMILIES)}") from None


def rho_eval(family: str | RhoFamily, v: float) -> tuple[float, float, float]:
    """Value, first and second derivative of ``rho`` at ``v``."""
    fam = get_family(family)
    if not fam.in_domain(v):
        raise DomainError(f"{fam.tag} is undefined at v={v!r} (requires v < 1)")
    return float(fam.value(v)), float(fam.d1(v)), float(fam.d2(v))


# ---------------------------------------------------------------------------
# inner problem


@dataclass(frozen=True)
class LambdaSolution:
    lam: np.ndarray
    q: float
    iterations: int
    grad_norm: float


def _feasible(fam: RhoFamily, v: np.ndarray) -> bool:
    if fam.tag == "EL":
        return bool(np.max(v, initial=-np.inf) <= 1.0 - _EL_MARGIN)
    return bool(np.all(np.isfinite(v)))


def solve_lambda(
    beta: float,
    family: str | RhoFamily,
    psi0: np.ndarray,
    psi1: np.ndarray,
    max_iter: int = 200,
    tol: float = 1e-9,
) -> LambdaSolution:
    """Maximize ``mean rho(lambda' psi_i(beta))`` over ``lambda``.

    Damped Newton from ``lambda = 0`` with step halving that keeps every
    iterate inside the domain of ``rho``.
    """
    fam = get_family(family)
    psi = psi0 - beta * psi1
    n, m = psi.shape
    lam = np.zeros(m)
    v = np.zeros(n)
    q = 0.0
    gnorm = np.inf
    for it in range(max_iter + 1):
        d1 = fam.d1(v)
        grad = psi.T @ d1 / n
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol * (1.0 + abs(q)):
            return LambdaSolution(lam, q, it, gnorm)
        if it == max_iter:
            break
        hess = (psi * fam.d2(v)[:, None]).T @ psi / n
        try:
            step = np.linalg.solve(hess, -grad)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess - 1e-10 * np.eye(m), -grad, rcond=None)[0]
        slope = float(grad @ step)
        if slope <= 0.0:
            step, slope = grad, gnorm**2
        t = 1.0
        for _ in range(60):
            lam_new = lam + t * step
            v_new = psi @ lam_new
            if _feasible(fam, v_new):
                q_new = float(np.mean(fam.value(v_new)))
                if np.isfinite(q_new) and q_new >= q + 1e-4 * t * slope:
                    break
            t *= 0.5
        else:
            # no ascent available within numerical precision
            return LambdaSolution(lam, q, it, gnorm)
        lam, v, q = lam_new, v_new, q_new
    raise ConvergenceError(
        f"inner {fam.tag} solve did not converge at beta={beta:.6g} "
        f"(gradient norm {gnorm:.3e})",
        grad_norm=gnorm, beta=beta,
    )


def profile_derivatives(
    beta: float, family: str | RhoFamily, psi0: np.ndarray, psi1: np.ndarray, lam: np.ndarray
) -> tuple[float, float]:
    """First and second derivative of ``Q`` at ``beta``.

    Uses the envelope theorem for the first derivative and implicit
    differentiation of the inner first-order condition for the second.
    """
    fam = get_family(family)
    psi = psi0 - beta * psi1
    dpsi = -psi1
    n = psi.shape[0]
    v = psi @ lam
    d1, d2 = fam.d1(v), fam.d2(v)
    a = dpsi @ lam
    q1 = float(np.mean(d1 * a))
    omega = (psi * d2[:, None]).T @ psi / n
    c = (psi.T @ (d2 * a) + dpsi.T @ d1) / n
    q2 = float(np.mean(d2 * a * a) - c @ np.linalg.solve(omega, c))
    return q1, q2


# ---------------------------------------------------------------------------
# outer problem


@dataclass
class GelFit:
    """Result of :func:`estimate_beta`."""

    beta_hat: float
    lambda_hat: np.ndarray
    q_hat: float
    family: str
    iterations: int
    grad_norm: float
    moments: object = field(repr=False, default=None)
    bundle: object = field(repr=False, default=None)
    censoring: object = field(repr=False, default=None)
    at_boundary: bool = False
    warnings: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.moments.n

    @property
    def m(self) -> int:
        return self.moments.m


def _objective(fam: RhoFamily, psi0: np.ndarray, psi1: np.ndarray):
    cache: dict[float, float] = {}

    def q(beta: float) -> float:
        if beta not in cache:
            try:
                cache[beta] = solve_lambda(beta, fam, psi0, psi1).q
            except ConvergenceError:
                cache[beta] = np.inf
        return cache[beta]

    return q


def estimate_beta(
    moments,
    family: str | RhoFamily = "ET",
    bounds: tuple[float, float] = (-10.0, 10.0),
    grid_size: int = 201,
    xtol: float = 1e-6,
    bundle=None,
    censoring=None,
) -> GelFit:
    """Minimize the profile objective over ``bounds``.

    A coarse grid locates the basin of the global minimum, golden-section
    search narrows it to ``xtol`` and three Newton steps on the analytic
    profile derivatives polish the result.

    Parameters
    ----------
    moments : MomentMatrices
        Anything exposing ``psi0`` and ``psi1`` arrays.
    family : {"EL", "ET", "CUE"}
    bounds : (float, float)
    grid_size : int
        Number of points of the coarse scan.
    """
    fam = get_family(family)
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError(f"invalid beta bounds {bounds}")
    psi0, psi1 = moments.psi0, moments.psi1
    q = _objective(fam, psi0, psi1)

    grid = np.linspace(lo, hi, grid_size)
    vals = np.array([q(float(b)) for b in grid])
    if not np.any(np.isfinite(vals)):
        raise ConvergenceError(f"inner {fam.tag} solve failed on the whole beta grid")
    k = int(np.argmin(vals))  # first index wins ties, i.e. the lower beta
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, grid_size - 1)]

    # golden-section on [a, b]
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = q(c), q(d)
    while b - a > xtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = q(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = q(d)
    beta = c if fc <= fd else d
    bracket = (grid[max(k - 1, 0)], grid[min(k + 1, grid_size - 1)])

    sol = solve_lambda(beta, fam, psi0, psi1)
    for _ in range(3):
        q1, q2 = profile_derivatives(beta, fam, psi0, psi1, sol.lam)
        if not q2 > 0.0:
            break
        cand = beta - q1 / q2
        if not bracket[0] <= cand <= bracket[1]:
            break
        try:
            cand_sol = solve_lambda(cand, fam, psi0, psi1)
        except ConvergenceError:
            break
        if cand_sol.q > sol.q:
            break
        beta, sol = cand, cand_sol

    warn = []
    at_boundary = bool(min(beta - lo, hi - beta) <= 10 * xtol)
    if at_boundary:
        msg = f"minimum attained at the boundary of [{lo:g}, {hi:g}]"
        logger.warning(msg)
        warn.append(msg)
    return GelFit(
        beta_hat=float(beta), lambda_hat=sol.lam, q_hat=float(sol.q), family=fam.tag,
        iterations=sol.iterations, grad_norm=sol.grad_norm, moments=moments,
        bundle=bundle, censoring=censoring, at_boundary=at_boundary, warnings=warn,
    )


def closed_form_beta(moments, mode: str = "pooled"):
    """Ratio estimator from the mean moment intercepts and slopes.

    ``"per-instrument"`` returns one ratio per column; ``"pooled"`` divides
    the summed numerators by the summed denominators.
    """
    num = np.mean(moments.psi0, axis=0)
    den = np.mean(moments.psi1, axis=0)
    if mode in ("per-instrument", "per_instrument"):
        small = np.flatnonzero(np.abs(den) < 1e-10)
        if small.size:
            raise WeakIdentificationError(
                f"vanishing heteroscedasticity slope for instrument(s) {small.tolist()}"
            )
        return num / den
    if mode != "pooled":
        raise ValueError(f"mode must be 'per-instrument' or 'pooled', got {mode!r}")
    total = float(den.sum())
    if abs(total) < 1e-10:
        raise WeakIdentificationError("vanishing pooled heteroscedasticity slope")
    return float(num.sum()) / total
