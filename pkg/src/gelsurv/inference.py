"""Standard errors, over-identification test and weak-identification F.

The variance of the estimator is assembled as

    se**2 = (1/H + V1 + V2) / n,

where ``H`` is the curvature of the profile objective, ``V1`` the
many-moment correction and ``V2`` the contribution of estimating the
censoring survival. Every ``V2`` and ``V3`` term is a matrix-vector
product with the influence kernel ``Phi``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg, stats

from .censoring import PhiKernel
from .errors import ExactIdentificationError, NumericalError, RankDeficiencyError, \
    WeakIdentificationError
from .gel import GelFit, get_family, profile_derivatives
from .moments import dg_parts

__all__ = [
    "VarianceComponents",
    "OverIdResult",
    "WeakIdResult",
    "InferenceReport",
    "variance_components",
    "standard_error",
    "overid_test",
    "weak_id_f",
    "infer",
]

WEAK_F_THRESHOLD = 2.0


@dataclass(frozen=True)
class VarianceComponents:
    H: float
    V1: float
    V2: float


@dataclass
class _Pieces:
    """Per-observation quantities at the fitted saddle point."""

    psi: np.ndarray
    dpsi: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    sigma: np.ndarray
    sigma_inv: np.ndarray
    dpsi_bar: np.ndarray


def _pieces(fit: GelFit) -> _Pieces:
    fam = get_family(fit.family)
    mom = fit.moments
    psi = mom.psi(fit.beta_hat)
    dpsi = -mom.psi1
    v = psi @ fit.lambda_hat
    n = psi.shape[0]
    sigma = psi.T @ psi / n
    cond = np.linalg.cond(sigma)
    if not cond < 1e12:
        raise NumericalError(f"moment covariance is ill-conditioned (condition number {cond:.3e})")
    return _Pieces(psi, dpsi, fam.d1(v), fam.d2(v), sigma, np.linalg.inv(sigma),
                   dpsi.mean(axis=0))


def _h_and_v1(fit: GelFit, p: _Pieces) -> tuple[float, float]:
    mom = fit.moments
    _, H = profile_derivatives(fit.beta_hat, fit.family, mom.psi0, mom.psi1, fit.lambda_hat)
    if not H > 0.0:
        raise WeakIdentificationError(
            f"profile curvature is not positive at beta={fit.beta_hat:.6g} (H={H:.3e})"
        )
    n = p.psi.shape[0]
    cross = p.dpsi.T @ p.psi / n
    u = (p.dpsi - p.dpsi_bar) - p.psi @ (p.sigma_inv @ cross.T)
    quad = np.einsum("ij,jk,ik->i", u, p.sigma_inv, u)
    return H, float(np.mean(quad)) / (n * H * H)


def _v2(fit: GelFit, phik: PhiKernel, p: _Pieces, H: float) -> float:
    if phik.zero:
        return 0.0
    mom = fit.moments
    lam = fit.lambda_hat
    n = p.psi.shape[0]
    c, r, dr = dg_parts(mom, fit.beta_hat)
    r_lam = r @ lam
    a = p.dpsi @ lam
    omega = (p.psi * p.d2[:, None]).T @ p.psi / n
    cvec = (p.psi.T @ (p.d2 * a) + p.dpsi.T @ p.d1) / n
    kappa = np.linalg.solve(omega, cvec)
    w = c * (p.d2 * r_lam * a + p.d1 * (dr @ lam)
             - p.d2 * r_lam * (p.psi @ kappa) - p.d1 * (r @ kappa))
    t = phik.apply(w) / n
    u = p.psi @ (p.sigma_inv @ p.dpsi_bar)
    return float(np.mean(t * t) + 2.0 * np.mean(t * u)) / (H * H)


def variance_components(fit: GelFit, phik: PhiKernel) -> VarianceComponents:
    """Curvature ``H`` and the corrections ``V1`` and ``V2``.

    ``V2`` propagates the influence of each observation on the censoring
    survival through the profiled score, including the response of the
    inner multiplier, and adds its covariance with the score itself.
    """
    p = _pieces(fit)
    H, V1 = _h_and_v1(fit, p)
    return VarianceComponents(H, V1, _v2(fit, phik, p, H))


def standard_error(
    comps: VarianceComponents, n: int, beta_hat: float = 0.0, alpha: float = 0.05
) -> tuple[float, tuple[float, float]]:
    """Standard error and the two-sided ``1 - alpha`` Wald interval."""
    if not comps.H > 0.0:
        raise WeakIdentificationError("H must be positive")
    var = (1.0 / comps.H + comps.V1 + comps.V2) / n
    if not var > 0.0:
        raise NumericalError(f"estimated variance is not positive ({var:.3e})")
    se = math.sqrt(var)
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))
    return se, (beta_hat - z * se, beta_hat + z * se)


@dataclass(frozen=True)
class OverIdResult:
    t_stat: float
    p_value: float
    V3: float


def overid_test(fit: GelFit, phik: PhiKernel) -> OverIdResult:
    """Censoring-adjusted test of the over-identifying restrictions."""
    n, m = fit.moments.psi0.shape
    if m < 2:
        raise ExactIdentificationError("exactly identified: the over-identification test needs m >= 2")
    dof = m - 1
    if phik.zero:
        V3 = 0.0
    else:
        fam = get_family(fit.family)
        c, r, _ = dg_parts(fit.moments, fit.beta_hat)
        v = fit.moments.psi(fit.beta_hat) @ fit.lambda_hat
        w = fam.d1(v) * c * (r @ fit.lambda_hat)
        s = 2.0 * math.sqrt(n) / math.sqrt(2.0 * dof)
        e = s * phik.apply(w) / n
        V3 = float(np.mean(e * e))
    t = abs(2.0 * n * fit.q_hat - dof) / math.sqrt(2.0 * dof * (1.0 + V3))
    p = float(2.0 * stats.norm.sf(t))
    return OverIdResult(float(t), min(max(p, 0.0), 1.0), V3)


@dataclass(frozen=True)
class WeakIdResult:
    f_stat: float
    weak: bool
    gamma: np.ndarray
    fitted: np.ndarray
    target: np.ndarray


def weak_id_f(ds, bundle) -> WeakIdResult:
    """Heteroscedasticity-robust Wald F for ``R_A^2 - h4`` on ``R_Z``.

    No intercept; HC0 sandwich; the identification is flagged weak when
    ``F <= 2``.
    """
    Z = np.asarray(bundle.r_z, dtype=float)
    y = bundle.r_a**2 - bundle.h4
    n, m = Z.shape
    if m >= n:
        raise RankDeficiencyError(f"need more observations than instruments (n={n}, m={m})")
    _, R, piv = linalg.qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > diag[0] * max(n, m) * np.finfo(float).eps))
    if rank < m:
        dependent = sorted(int(c) for c in piv[rank:])
        raise RankDeficiencyError(
            f"instrument residuals are linearly dependent; columns {dependent}", columns=dependent
        )
    gamma = np.linalg.lstsq(Z, y, rcond=None)[0]
    fitted = Z @ gamma
    e = y - fitted
    bread = np.linalg.inv(Z.T @ Z)
    meat = (Z * (e * e)[:, None]).T @ Z
    cov = bread @ meat @ bread
    f = float(gamma @ np.linalg.solve(cov, gamma)) / m
    return WeakIdResult(f, f <= WEAK_F_THRESHOLD, gamma, fitted, y)


@dataclass
class InferenceReport:
    """Estimate, uncertainty and diagnostics for one fit.

    Over-identification fields are ``None`` when ``m = 1``, with the
    reason recorded in ``overid_note``.
    """

    beta_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    H: float
    V1: float
    V2: float
    V3: float | None
    overid_stat: float | None
    overid_p: float | None
    f_mawii: float
    weak_flag: bool
    family: str
    n: int
    m: int
    alpha: float = 0.05
    overid_note: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["overid_note"] is None:
            del d["overid_note"]
        else:
            for key in ("V3", "overid_stat", "overid_p"):
                del d[key]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def covers(self, beta: float) -> bool:
        return self.ci_lo <= beta <= self.ci_hi


def infer(
    fit: GelFit,
    phik: PhiKernel,
    ds,
    bundle,
    alpha: float = 0.05,
    exposure_scale: float = 1.0,
) -> InferenceReport:
    """Assemble the full report.

    ``exposure_scale`` is the spread used to standardize the exposure;
    the estimate and all variance terms are reported on the original
    exposure scale.
    """
    comps = variance_components(fit, phik)
    n, m = fit.moments.psi0.shape
    s = float(exposure_scale)
    comps = VarianceComponents(comps.H * s * s, comps.V1 / (s * s), comps.V2 / (s * s))
    beta = fit.beta_hat / s
    se, (lo, hi) = standard_error(comps, n, beta, alpha)
    weak = weak_id_f(ds, bundle)
    if m >= 2:
        oi = overid_test(fit, phik)
        V3, t, p, note = oi.V3, oi.t_stat, oi.p_value, None
    else:
        V3 = t = p = None
        note = "exactly identified"
    return InferenceReport(
        beta_hat=beta, se=se, ci_lo=lo, ci_hi=hi, H=comps.H, V1=comps.V1, V2=comps.V2,
        V3=V3, overid_stat=t, overid_p=p, f_mawii=weak.f_stat, weak_flag=weak.weak,
        family=fit.family, n=n, m=m, alpha=alpha, overid_note=note,
    )
