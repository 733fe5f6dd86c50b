"""Matérn covariance and its SPDE (α = 2) precision on a finite-element mesh."""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Union

import numpy as np
from scipy import sparse
from scipy.special import gammaln, kve

from mesh import FemMatrices
from sparse_linalg import factorize


logger = logging.getLogger(__name__)

# smoothness implied by α = 2 in two dimensions
SPDE_NU = 1.0


@dataclass(frozen=True)
class MaternParams:
    sigma2: float
    kappa: float
    nu: float = SPDE_NU

    def __post_init__(self) -> None:
        if not (self.sigma2 > 0 and self.kappa > 0 and self.nu > 0):
            raise ValueError(f"Matérn parameters must be positive: {self}")

    @property
    def range(self) -> float:
        return math.sqrt(8.0 * self.nu) / self.kappa


@dataclass(frozen=True)
class SpdeParams:
    """SPDE parameters; (range, variance) is the user-facing pair."""

    kappa: float
    tau: float

    def __post_init__(self) -> None:
        if not (self.kappa > 0 and self.tau > 0):
            raise ValueError(f"SPDE parameters must be positive: {self}")

    @classmethod
    def from_range_variance(cls, rho: float, sigma2: float) -> "SpdeParams":
        kappa = math.sqrt(8.0) / rho
        tau = 1.0 / (math.sqrt(4.0 * math.pi * sigma2) * kappa)
        return cls(kappa, tau)

    @property
    def variance(self) -> float:
        return 1.0 / (4.0 * math.pi * self.kappa ** 2 * self.tau ** 2)

    @property
    def range(self) -> float:
        return math.sqrt(8.0) / self.kappa

    def matern(self) -> MaternParams:
        return MaternParams(self.variance, self.kappa, SPDE_NU)


def matern_correlation(d: Union[float, np.ndarray], kappa: float, nu: float = SPDE_NU) -> np.ndarray:
    shape = np.shape(d)
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    z = kappa * d
    out = np.ones_like(z)
    pos = z > 0
    zp = z[pos]
    # K_ν(z) = kve(ν, z)·e^{-z}; assembled in logs to avoid overflow of z^ν
    log_corr = (1.0 - nu) * math.log(2.0) - gammaln(nu) + nu * np.log(zp) + np.log(kve(nu, zp)) - zp
    out[pos] = np.exp(log_corr)
    return out.reshape(shape)


def matern_cov(d: Union[float, np.ndarray], params: MaternParams) -> Union[float, np.ndarray]:
    cov = params.sigma2 * matern_correlation(d, params.kappa, params.nu)
    return float(cov) if np.ndim(cov) == 0 else cov


def spde_precision(fem: FemMatrices, params: SpdeParams) -> sparse.csc_matrix:
    """Q = τ² (κ⁴ C̃ + 2κ² G + G C̃⁻¹ G)."""
    C, G = fem.mass_lumped, fem.stiffness
    Cinv = sparse.diags(1.0 / fem.mass_diagonal)
    k2 = params.kappa ** 2
    Q = params.tau ** 2 * (k2 * k2 * C + 2.0 * k2 * G + G @ Cinv @ G)
    return sparse.csc_matrix(Q)


def sample_field(Q: sparse.spmatrix, seed: int) -> np.ndarray:
    """One draw with precision Q: standard normals back-substituted through the factor."""
    factor = factorize(Q)
    w = np.random.default_rng(seed).standard_normal(factor.m)
    return factor.solve_lt(w)


def marginal_variances(Q: sparse.spmatrix, chunk: int = 256) -> np.ndarray:
    """diag(Q⁻¹) by solving against unit vectors, ``chunk`` columns at a time."""
    factor = factorize(Q)
    m = factor.m
    out = np.empty(m)
    for start in range(0, m, chunk):
        stop = min(start + chunk, m)
        E = np.zeros((m, stop - start))
        E[np.arange(start, stop), np.arange(stop - start)] = 1.0
        out[start:stop] = factor.solve(E)[np.arange(start, stop), np.arange(stop - start)]
    return out
