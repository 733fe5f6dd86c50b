"""Synthetic station panels with known truth, and a dense brute-force likelihood.

The GMRF-truth generator samples the analytic Matérn covariance at the stations with
a dense Cholesky factor; it never touches the mesh or SPDE code, so fits on its
output measure the whole approximation chain.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.spatial.distance import cdist, pdist, squareform

from domain import Dataset, RegionGrid, Station
from errors import NotPositiveDefinite, TooLarge
from matern import MaternParams, SpdeParams, matern_cov, spde_precision
from mesh import Mesh, assemble_fem, project
from models import design_matrix


logger = logging.getLogger(__name__)

MAX_DENSE_STATIONS = 3000
MAX_DENSE_ROWS = 1000
# relative diagonal jitter for the dense Matérn factor
JITTER = 1e-10

LAYOUTS = ("uniform", "clustered")
TRUTHS = ("gmrf", "lmm")


@dataclass(frozen=True)
class TrueParams:
    alpha: float = 10.0
    beta: Tuple[float, ...] = ()
    beta_aod: float = 2.0
    sigma2_u: float = 1.0
    sigma2_v: float = 0.25
    sigma2_eps: float = 0.5
    # gmrf truth
    range_gamma: float = 30.0
    sigma2_gamma: float = 2.0
    range_psi: float = 30.0
    sigma2_psi: float = 0.5
    # lmm truth
    sigma2_g: float = 2.0
    sigma2_h: float = 0.5


@dataclass(frozen=True)
class SimConfig:
    layout: str = "uniform"
    n_stations: int = 60
    n_days: int = 30
    domain_km: float = 100.0
    truth: str = "gmrf"
    params: TrueParams = field(default_factory=TrueParams)
    n_covariates: int = 0
    region_cell_km: float = 25.0
    seed: int = 1

    def __post_init__(self) -> None:
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.truth not in TRUTHS:
            raise ValueError(f"truth must be one of {TRUTHS}, got {self.truth!r}")
        if self.n_stations < 1 or self.n_days < 1 or self.n_covariates < 0:
            raise ValueError("station and day counts must be positive, covariate count non-negative")
        if not (self.domain_km > 0 and self.region_cell_km > 0):
            raise ValueError("domain_km and region_cell_km must be positive")
        p = self.params
        variances = [p.sigma2_u, p.sigma2_v, p.sigma2_eps, p.sigma2_gamma, p.sigma2_psi, p.sigma2_g, p.sigma2_h]
        if any(v < 0 for v in variances):
            raise ValueError("variances must be >= 0")
        if p.range_gamma <= 0 or p.range_psi <= 0:
            raise ValueError("Matérn ranges must be positive")
        if p.beta and len(p.beta) != self.n_covariates:
            raise ValueError(f"{len(p.beta)} covariate slopes for {self.n_covariates} covariates")

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.params.beta or (1.0,) * self.n_covariates, dtype=float)


@dataclass(frozen=True, eq=False)
class Truth:
    config: SimConfig
    u: np.ndarray
    v: np.ndarray
    # per day × station: spatial intercept and slope effects actually added
    spatial_intercept: np.ndarray
    spatial_slope: np.ndarray
    # lmm truth only: (day, region) → (g, h)
    groups: Dict[Tuple[int, int], Tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": asdict(self.config),
            "u": self.u.tolist(),
            "v": self.v.tolist(),
            "spatial_intercept": self.spatial_intercept.tolist(),
            "spatial_slope": self.spatial_slope.tolist(),
            "groups": [[d, r, g, h] for (d, r), (g, h) in sorted(self.groups.items())],
        }


# -----------------------
# Layout and fields
# -----------------------

def station_layout(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform points, or half in Gaussian clusters and half uniform."""
    L, n = config.domain_km, config.n_stations
    if config.layout == "uniform":
        return rng.uniform(0.0, L, size=(n, 2))
    n_clustered = n // 2
    n_clusters = max(1, n_clustered // 10)
    centers = rng.uniform(0.15 * L, 0.85 * L, size=(n_clusters, 2))
    members = centers[rng.integers(0, n_clusters, size=n_clustered)]
    clustered = np.clip(members + rng.normal(0.0, L / 20.0, size=(n_clustered, 2)), 0.0, L)
    return np.vstack([clustered, rng.uniform(0.0, L, size=(n - n_clustered, 2))])


def matern_factor(xy: np.ndarray, sigma2: float, rho: float) -> Optional[np.ndarray]:
    """Lower Cholesky factor of the dense Matérn (ν = 1) covariance; None for a zero field."""
    if sigma2 == 0:
        return None
    params = MaternParams(sigma2, math.sqrt(8.0) / rho)
    C = matern_cov(squareform(pdist(xy)), params)
    C[np.diag_indices_from(C)] += JITTER * sigma2
    try:
        return linalg.cholesky(C, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(message=f"dense Matérn covariance: {exc}") from exc


def matern_draws(xy: np.ndarray, sigma2: float, rho: float, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """``n_draws`` × stations samples of the analytic Matérn field."""
    factor = matern_factor(np.asarray(xy, dtype=float), sigma2, rho)
    if factor is None:
        return np.zeros((n_draws, len(xy)))
    return rng.standard_normal((n_draws, len(xy))) @ factor.T


# -----------------------
# Simulation
# -----------------------

def simulate(config: SimConfig) -> Tuple[Dataset, Truth]:
    """Complete station × day panel per the chosen truth; identical configs give identical output."""
    if config.n_stations > MAX_DENSE_STATIONS:
        raise TooLarge(f"{config.n_stations} stations exceed the dense limit of {MAX_DENSE_STATIONS}")
    rng = np.random.default_rng(config.seed)
    p, n, T = config.params, config.n_stations, config.n_days

    xy = station_layout(config, rng)
    grid = RegionGrid(config.region_cell_km)
    stations = [
        Station(f"S{k:04d}", float(x), float(y), grid.region_of(x, y)) for k, (x, y) in enumerate(xy)
    ]
    regions = np.array([s.region for s in stations], dtype=np.int64)

    aod = rng.standard_normal((T, n))
    covs = rng.standard_normal((T, n, config.n_covariates))
    u = rng.normal(0.0, math.sqrt(p.sigma2_u), size=T)
    v = rng.normal(0.0, math.sqrt(p.sigma2_v), size=T)

    groups: Dict[Tuple[int, int], Tuple[float, float]] = {}
    if config.truth == "gmrf":
        Lg = matern_factor(xy, p.sigma2_gamma, p.range_gamma)
        Lp = matern_factor(xy, p.sigma2_psi, p.range_psi)
        intercept = np.zeros((T, n)) if Lg is None else rng.standard_normal((T, n)) @ Lg.T
        slope = np.zeros((T, n)) if Lp is None else rng.standard_normal((T, n)) @ Lp.T
    else:
        intercept, slope = np.zeros((T, n)), np.zeros((T, n))
        unique_regions = np.unique(regions)
        for t in range(T):
            g = rng.normal(0.0, math.sqrt(p.sigma2_g), size=unique_regions.size)
            h = rng.normal(0.0, math.sqrt(p.sigma2_h), size=unique_regions.size)
            pos = np.searchsorted(unique_regions, regions)
            intercept[t], slope[t] = g[pos], h[pos]
            groups.update({(t + 1, int(r)): (float(g[k]), float(h[k])) for k, r in enumerate(unique_regions)})

    noise = rng.normal(0.0, math.sqrt(p.sigma2_eps), size=(T, n))
    fixed = p.alpha + covs @ config.beta + p.beta_aod * aod
    pm = fixed + u[:, None] + v[:, None] * aod + intercept + slope * aod + noise

    names = [f"x{k + 1}" for k in range(config.n_covariates)]
    frame = pd.DataFrame({
        "station_id": np.tile([s.id for s in stations], T),
        "day": np.repeat(np.arange(1, T + 1), n),
        "pm25": pm.ravel(),
        "aod": aod.ravel(),
        **{name: covs[:, :, k].ravel() for k, name in enumerate(names)},
    })
    data = Dataset.build(stations, frame, names)
    logger.info("Simulated %s-truth panel: %d stations × %d days (%s layout)", config.truth, n, T, config.layout)
    return data, Truth(config, u, v, intercept, slope, groups)


def replicate_seeds(seed: int, count: int) -> List[int]:
    """Replicate k uses seed + k."""
    return [seed + k for k in range(count)]


# -----------------------
# Dense oracle
# -----------------------

def dense_covariance(
    data: Dataset, kind: str, theta: Sequence[float], mesh: Optional[Mesh] = None
) -> np.ndarray:
    """Var[η] of the observations, assembled entry by entry from the model definition.

    ``kind`` is ``"iid"`` (θ = (σ²_ε,)), ``"lmm"`` or ``"gmrf"`` with the parameter
    order of the fitted models. For the GMRF the field covariance is the analytic
    Matérn unless ``mesh`` is given, in which case it is A Q⁻¹ Aᵀ on that mesh.
    """
    n = len(data)
    if n > MAX_DENSE_ROWS:
        raise TooLarge(f"{n} observations exceed the dense oracle limit of {MAX_DENSE_ROWS}")
    theta = np.asarray(theta, dtype=float)
    day, aod = data.day, data.aod
    same_day = (day[:, None] == day[None, :]).astype(float)
    aa = np.outer(aod, aod)

    if kind == "iid":
        return theta[0] * np.eye(n)
    if kind == "lmm":
        s2u, s2v, s2g, s2h, s2e = theta
        region = data.region
        same_group = same_day * (region[:, None] == region[None, :])
        return same_day * (s2u + s2v * aa) + same_group * (s2g + s2h * aa) + s2e * np.eye(n)
    if kind == "gmrf":
        kg, tg, kp, tp, s2u, s2v, s2e = theta
        if mesh is None:
            D = cdist(data.xy, data.xy)
            Cg = matern_cov(D, SpdeParams(kg, tg).matern())
            Cp = matern_cov(D, SpdeParams(kp, tp).matern())
        else:
            fem = assemble_fem(mesh)
            A = project(mesh, data.xy).A.toarray()
            Cg = A @ np.linalg.solve(spde_precision(fem, SpdeParams(kg, tg)).toarray(), A.T)
            Cp = A @ np.linalg.solve(spde_precision(fem, SpdeParams(kp, tp)).toarray(), A.T)
        return same_day * (Cg + s2u + aa * (Cp + s2v)) + s2e * np.eye(n)
    raise ValueError(f"unknown kind {kind!r}")


def dense_loglik_oracle(
    data: Dataset,
    kind: str,
    theta: Sequence[float],
    beta: Sequence[float],
    mesh: Optional[Mesh] = None,
) -> float:
    """Gaussian log-density of the observations under the dense covariance."""
    V = dense_covariance(data, kind, theta, mesh)
    r = data.pm - design_matrix(data.covariates, data.aod) @ np.asarray(beta, dtype=float)
    try:
        c, lower = linalg.cho_factor(V, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(message=f"dense covariance: {exc}") from exc
    quad = float(r @ linalg.cho_solve((c, lower), r))
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    return -0.5 * (len(r) * math.log(2.0 * math.pi) + logdet + quad)
