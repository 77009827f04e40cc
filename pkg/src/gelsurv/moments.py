"""Stacked moment functions and their derivatives in the censoring survival.

With ``h(Z) = Z_j`` for every instrument ``j`` the moment is

    g(beta; O_i) = R_Z[i] * (R_A[i] R_Y[i] - h3_i - beta * (R_A[i]**2 - h4_i)),

and the censoring-robust version replaces it by

    psi_i = (delta_i / G_i) g_i + (1 - delta_i / G_i) xi_i.

Both are affine in ``beta``; we store intercepts and slopes only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .censoring import CensoringModel, PhiKernel
from .data import Dataset

__all__ = [
    "MomentMatrices",
    "DGDirectional",
    "build_g",
    "build_psi",
    "dg_parts",
    "dg_directional",
]


def build_g(ds: Dataset, bundle) -> tuple[np.ndarray, np.ndarray]:
    """Intercept and slope of ``g`` in ``beta``.

    Returns
    -------
    g0, g1 : ndarray of shape (n, m)
        ``g(beta) = g0 - beta * g1``.
    """
    r_z = np.asarray(bundle.r_z, dtype=float)
    c0 = bundle.r_a * bundle.r_y - bundle.h3
    c1 = bundle.r_a**2 - bundle.h4
    return r_z * c0[:, None], r_z * c1[:, None]


@dataclass(frozen=True)
class MomentMatrices:
    """Affine moment matrices for one dataset.

    ``g(beta) = g0 - beta * g1``, ``xi(beta) = xi0 - beta * xi1`` and
    ``psi(beta) = psi0 - beta * psi1``, all of shape (n, m). ``ipcw`` holds
    ``delta_i / G_i``.
    """

    g0: np.ndarray
    g1: np.ndarray
    xi0: np.ndarray
    xi1: np.ndarray
    psi0: np.ndarray
    psi1: np.ndarray
    ipcw: np.ndarray
    delta: np.ndarray
    g_hat: np.ndarray

    @property
    def n(self) -> int:
        return self.psi0.shape[0]

    @property
    def m(self) -> int:
        return self.psi0.shape[1]

    @property
    def censored(self) -> bool:
        return bool(np.any(self.delta == 0.0))

    def psi(self, beta: float) -> np.ndarray:
        return self.psi0 - beta * self.psi1

    def g(self, beta: float) -> np.ndarray:
        return self.g0 - beta * self.g1


def build_psi(ds: Dataset, bundle, cens: CensoringModel, xi) -> MomentMatrices:
    """Assemble the censoring-augmented moments.

    Uncensored rows with ``G_i = 1`` reproduce ``g`` exactly; censored rows
    take the augmentation ``xi`` unchanged.
    """
    g0, g1 = build_g(ds, bundle)
    ipcw = ds.delta / cens.g_hat
    w = ipcw[:, None]
    psi0 = w * g0 + (1.0 - w) * xi.xi0
    psi1 = w * g1 + (1.0 - w) * xi.xi1
    return MomentMatrices(
        g0=g0, g1=g1, xi0=xi.xi0, xi1=xi.xi1, psi0=psi0, psi1=psi1,
        ipcw=ipcw, delta=np.asarray(ds.delta), g_hat=np.asarray(cens.g_hat),
    )


def dg_parts(mom: MomentMatrices, beta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row factors of the derivative of ``psi`` in ``G``.

    Perturbing ``G_i`` in the direction ``Phi[j, i]`` moves ``psi_i`` by
    ``Phi[j, i] * c_i * r_i`` and its beta-slope ``psi'_i = -psi1_i`` by
    ``Phi[j, i] * c_i * dr_i``.

    Returns
    -------
    c : ndarray of shape (n,)
        ``-delta_i / G_i**2``.
    r : ndarray of shape (n, m)
        ``g_i(beta) - xi_i(beta)``.
    dr : ndarray of shape (n, m)
        ``-g1_i + xi1_i``, the beta-derivative of ``r``.
    """
    c = -mom.delta / mom.g_hat**2
    r = (mom.g0 - beta * mom.g1) - (mom.xi0 - beta * mom.xi1)
    dr = -mom.g1 + mom.xi1
    return c, r, dr


@dataclass(frozen=True)
class DGDirectional:
    """``lambda``-contractions of the derivatives of ``psi_i`` and ``psi'_i``
    in direction ``Phi[j, .]``, one entry per ``i``."""

    d_psi: np.ndarray
    d_dpsi: np.ndarray


def dg_directional(
    j: int, lam: np.ndarray, beta: float, mom: MomentMatrices, phik: PhiKernel
) -> DGDirectional:
    """Directional derivatives of the moments in ``G`` for direction ``j``."""
    lam = np.asarray(lam, dtype=float)
    if phik.zero:
        return DGDirectional(np.zeros(mom.n), np.zeros(mom.n))
    c, r, dr = dg_parts(mom, beta)
    scale = phik.phi_t[:, j] * c
    return DGDirectional(scale * (r @ lam), scale * (dr @ lam))
