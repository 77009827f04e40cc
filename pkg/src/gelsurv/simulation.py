"""Simulation designs and the Monte Carlo harness.

Every random object is drawn from its own stream derived from the
replicate seed and a fixed label, so two designs that differ in one
ingredient share all other draws. The stream layout is::

    X=1, Z-noise=2, xi_A=3, xi_Y=4, upsilon=5, U=6, eps_A=7, eps_T=8, C=9

The misspecification loadings ``mu`` come from ``design_seed`` (label 10)
and stay fixed across replicates. The censoring calibration pre-sample
uses the same labels shifted by 100.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import Dataset
from .errors import GelSurvError, NumericalError
from .pipeline import EstimatorConfig, run_pipeline

__all__ = [
    "CASES",
    "DgpSpec",
    "MetricsRow",
    "ReplicateRecord",
    "MonteCarloResult",
    "gen_dataset",
    "calibrate_tau",
    "run_replicate",
    "monte_carlo",
]

logger = logging.getLogger(__name__)

CASES = {
    1: (1.0, 0.0, 0.0),
    2: (0.6, 0.2, 0.2),
    3: (0.1, 0.9, 0.0),
    4: (0.1, 0.0, 0.9),
}

_X, _ZNOISE, _XI_A, _XI_Y, _UPS, _U, _EPS_A, _EPS_T, _C, _MU = range(1, 11)
_PRESAMPLE = 100
_CALIBRATION_N = 50_000
_D_X = 5


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design.

    ``censoring_rate=None`` switches censoring off. ``theta`` scales the
    instrument-dependent loading of the confounder. ``heteroscedastic=False``
    removes the instrument-dependent exposure noise.
    """

    n: int = 4000
    m: int = 10
    nuisance_shape: str = "nonlinear"
    case: int = 1
    censoring_rate: float | None = 0.4
    beta0: float = 0.4
    h2: float = 0.2
    theta: float = 0.0
    seed: int = 0
    design_seed: int = 0
    heteroscedastic: bool = True

    def __post_init__(self) -> None:
        if self.nuisance_shape not in ("linear", "nonlinear"):
            raise ValueError("nuisance_shape must be 'linear' or 'nonlinear'")
        if self.case not in CASES:
            raise ValueError(f"case must be one of {sorted(CASES)}")
        if not 0.0 < self.h2 < 1.0:
            raise ValueError("h2 must lie in (0, 1)")
        if self.censoring_rate is not None and not 0.0 < self.censoring_rate < 1.0:
            raise ValueError("censoring_rate must lie in (0, 1)")
        if not 0.0 <= self.theta <= 0.4:
            raise ValueError("theta must lie in [0, 0.4]")
        if self.n < 2 or self.m < 1:
            raise ValueError("need n >= 2 and m >= 1")


def _rng(seed: int, label: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), label]))


@dataclass(frozen=True)
class _Structure:
    xi_a: np.ndarray
    xi_y: np.ndarray
    upsilon: np.ndarray
    mu_a: np.ndarray
    mu_t: np.ndarray


def _structure(spec: DgpSpec) -> _Structure:
    m, h2 = spec.m, spec.h2
    sd_xi = math.sqrt(0.4 * (1.0 - h2))
    xi_a = _rng(spec.seed, _XI_A).normal(0.0, sd_xi, size=m)

    g = _rng(spec.seed, _XI_Y)
    u = g.random(m)
    inside = g.normal(0.0, sd_xi, size=m)
    p1, p2, _ = CASES[spec.case]
    xi_y = np.where(u < p1, 0.0, np.where(u < p1 + p2, inside, xi_a / 2.0))

    sd_small = math.sqrt(h2 / (1.5 * m))
    upsilon = _rng(spec.seed, _UPS).normal(0.0, sd_small, size=m)
    if not spec.heteroscedastic:
        upsilon = np.zeros(m)
    mu = _rng(spec.design_seed, _MU).normal(0.0, sd_small, size=(2, m))
    return _Structure(xi_a, xi_y, upsilon, mu[0], mu[1])


def _draw(spec: DgpSpec, st: _Structure, n: int, offset: int):
    """Latent sample ``(T, A, Z, X)`` plus the censoring uniforms."""
    m, h2 = spec.m, spec.h2
    x = _rng(spec.seed, offset + _X).uniform(-2.0, 2.0, size=(n, _D_X))
    zg = _rng(spec.seed, offset + _ZNOISE)
    z = zg.uniform(-2.0, 2.0, size=(n, m))
    if spec.nuisance_shape == "nonlinear":
        noise = zg.normal(0.0, math.sqrt(0.4), size=(n, 5))
        x1, x2 = x[:, 0], x[:, 1]
        base = np.column_stack([
            np.cos(np.pi * x1),
            (x1 + 1.0) * (x2 - 1.0),
            x1 + x2,
            (x2 - 0.5) ** 2,
            np.sin(x1 + x2),
        ])
        k = min(5, m)
        z[:, :k] = (base + noise)[:, :k]
        cz = np.cos(np.pi * z[:, :k])
        alpha1 = cz @ st.xi_a[:k]
        gamma1 = cz @ st.xi_y[:k]
        s = x.sum(axis=1)
        alpha2 = 2.0 * np.sin(
            np.sin(np.sin(x1 + x2 + 1.0) + np.sin(x[:, 2:].sum(axis=1) + 1.0))
            + np.sin(s + 1.0)
        )
        gamma2 = (np.cos(x1) + x1 * x2 + np.sin(x[:, 2:].sum(axis=1) - 1.0)) / 2.0
    else:
        alpha1 = z @ st.xi_a
        gamma1 = z @ st.xi_y
        alpha2 = np.zeros(n)
        gamma2 = x.sum(axis=1)

    U = _rng(spec.seed, offset + _U).normal(0.0, math.sqrt(0.6 * (1.0 - h2)), size=n)
    eps_a = _rng(spec.seed, offset + _EPS_A).normal(0.0, math.sqrt(0.4 * (1.0 - h2)), size=n)
    eps_t = _rng(spec.seed, offset + _EPS_T).normal(0.0, math.sqrt(0.4 * (1.0 - h2)), size=n)
    load_a = 1.0 + spec.theta * (z @ st.mu_a)
    load_t = 1.0 + spec.theta * (z @ st.mu_t)
    a = alpha1 + alpha2 + load_a * U + (1.0 + z @ st.upsilon) * eps_a
    t = spec.beta0 * a + gamma1 + gamma2 - load_t * U + eps_t
    v = _rng(spec.seed, offset + _C).random(n)
    return t, a, z, x, v


def _censor_times(v: np.ndarray, tau: float) -> np.ndarray:
    return -3.0 + tau + 6.0 * v


def calibrate_tau(spec: DgpSpec, tol: float = 0.005) -> float:
    """Shift of the censoring window giving the target censoring rate.

    Bisection over ``[-10, 10]`` on a pre-sample of 50000 draws with the
    replicate's structural parameters and common censoring uniforms.
    """
    if spec.censoring_rate is None:
        raise ValueError("design has no censoring")
    target = spec.censoring_rate
    t, _, _, _, v = _draw(spec, _structure(spec), _CALIBRATION_N, _PRESAMPLE)

    def rate(tau: float) -> float:
        return float(np.mean(_censor_times(v, tau) < t))

    lo, hi = -10.0, 10.0
    r_lo, r_hi = rate(lo), rate(hi)
    if not r_hi <= target <= r_lo:
        raise NumericalError(
            f"censoring rate {target} not reachable; achievable range [{r_hi:.4f}, {r_lo:.4f}]"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if abs(r - target) <= tol:
            return mid
        if r > target:
            lo = mid
        else:
            hi = mid
    # the empirical rate moves in steps of 1 / _CALIBRATION_N
    raise NumericalError(
        f"censoring rate {target} not achievable within {tol} on the calibration sample"
    )


def gen_dataset(spec: DgpSpec) -> tuple[Dataset, float]:
    """Draw one sample from the design; returns the data and the true effect."""
    st = _structure(spec)
    t, a, z, x, v = _draw(spec, st, spec.n, 0)
    if spec.censoring_rate is None:
        y, delta = t, np.ones(spec.n)
    else:
        c = _censor_times(v, calibrate_tau(spec))
        y = np.minimum(t, c)
        delta = (t <= c).astype(float)
    ds = Dataset(
        y=y, delta=delta, a=a, z=z, x=x,
        z_names=tuple(f"z{j + 1}" for j in range(spec.m)),
        x_names=tuple(f"x{j + 1}" for j in range(_D_X)),
    )
    return ds, spec.beta0


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class ReplicateRecord:
    index: int
    seed: int
    label: str
    beta_hat: float = float("nan")
    se: float = float("nan")
    covered: bool | None = None
    overid_p: float | None = None
    f_mawii: float | None = None
    censor_rate: float = float("nan")
    error: str | None = None


@dataclass(frozen=True)
class MetricsRow:
    """Aggregate metrics for one estimator label; BIAS is in percent."""

    label: str
    bias: float
    sd: float
    se: float
    cp: float
    reject_rate: float | None
    n_ok: int
    n_failed: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MonteCarloResult:
    spec: DgpSpec
    rows: list[MetricsRow]
    replicates: list[ReplicateRecord]


def _label(config: EstimatorConfig, family: str) -> str:
    if family == "closed_form":
        return "closed_form"
    prefix = "LR" if config.learner.kind == "linear" else "DNN"
    return f"{prefix}_{family}"


def run_replicate(
    spec: DgpSpec, config: EstimatorConfig, index: int, seed_stride: int = 1
) -> list[ReplicateRecord]:
    seed = spec.seed + seed_stride * index
    rspec = replace(spec, seed=seed)
    rconf = replace(config, learner=replace(config.learner, seed=seed))
    keys = ["closed_form"] if config.estimator == "closed_form" else list(config.families)
    try:
        ds, beta0 = gen_dataset(rspec)
        out = run_pipeline(ds, rconf)
    except GelSurvError as exc:
        msg = f"{type(exc).__name__}: {exc}"
        return [ReplicateRecord(index, seed, _label(config, k), error=msg) for k in keys]
    rate = float(1.0 - ds.delta.mean())
    records = []
    for k in keys:
        rep = out[k]
        if k == "closed_form":
            records.append(ReplicateRecord(index, seed, _label(config, k), beta_hat=float(rep),
                                           censor_rate=rate))
        else:
            records.append(ReplicateRecord(
                index, seed, _label(config, k), beta_hat=rep.beta_hat, se=rep.se,
                covered=rep.covers(beta0), overid_p=rep.overid_p, f_mawii=rep.f_mawii,
                censor_rate=rate,
            ))
    return records


def _aggregate(label: str, recs: list[ReplicateRecord], beta0: float, level: float) -> MetricsRow:
    ok = [r for r in recs if r.error is None]
    est = np.array([r.beta_hat for r in ok])
    se = np.array([r.se for r in ok])
    bias = float(np.mean(est - beta0) / beta0 * 100.0) if ok else float("nan")
    sd = float(np.std(est, ddof=1)) if len(ok) > 1 else float("nan")
    cov = [r.covered for r in ok if r.covered is not None]
    pv = [r.overid_p for r in ok if r.overid_p is not None]
    return MetricsRow(
        label=label, bias=bias, sd=sd,
        se=float(np.mean(se)) if ok else float("nan"),
        cp=float(np.mean(cov)) if cov else float("nan"),
        reject_rate=float(np.mean(np.array(pv) < level)) if pv else None,
        n_ok=len(ok), n_failed=len(recs) - len(ok),
    )


def monte_carlo(
    spec: DgpSpec,
    reps: int,
    config: EstimatorConfig,
    workers: int = 1,
    max_failure_rate: float = 0.10,
    seed_stride: int = 1,
) -> MonteCarloResult:
    """Run ``reps`` replicates with seeds ``spec.seed + seed_stride * r`` and aggregate.

    ``seed_stride=0`` repeats one replicate, which is only useful as a
    reproducibility check.

    Failed replicates are kept in the record list and excluded from the
    metrics; more than ``max_failure_rate`` failures abort the run.
    """
    if reps < 2:
        raise ValueError("reps must be >= 2")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_replicate, [spec] * reps, [config] * reps, range(reps),
                                   [seed_stride] * reps))
    else:
        chunks = [run_replicate(spec, config, r, seed_stride) for r in range(reps)]
    records = [rec for chunk in chunks for rec in chunk]
    labels = list(dict.fromkeys(rec.label for rec in records))
    rows = []
    for label in labels:
        recs = [r for r in records if r.label == label]
        failed = sum(r.error is not None for r in recs)
        if failed > max_failure_rate * len(recs):
            first = next(r.error for r in recs if r.error is not None)
            raise NumericalError(
                f"{failed}/{len(recs)} replicates failed for {label}; first error: {first}"
            )
        for r in recs:
            if r.error is not None:
                logger.warning("replicate %d (%s) failed: %s", r.index, label, r.error)
        rows.append(_aggregate(label, recs, spec.beta0, config.alpha))
    return MonteCarloResult(spec, rows, records)
