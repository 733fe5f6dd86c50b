"""The two spatio-temporal models as LinearGaussianModel instances, and their predictions.

Both models share the fixed part α + Σ β_k x_k + β_AOD·AOD and the day effects
(u_t, v_t); they differ in the spatial part:

  lmm:  g_rt + h_rt·AOD     one intercept/slope pair per observed (day, region)
  gmrf: γ_t(s) + ψ_t(s)·AOD  two SPDE Matérn fields per day on a shared mesh
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.spatial import cKDTree

from domain import Dataset, RegionGrid, Station, assign_regions
from engine import FitResult, LatentBlock, LinearGaussianModel, fit
from errors import UnseenDay
from matern import SpdeParams, spde_precision
from mesh import FemMatrices, Mesh, assemble_fem, build_mesh, project


logger = logging.getLogger(__name__)

LMM_THETA = ("sigma2_u", "sigma2_v", "sigma2_g", "sigma2_h", "sigma2_eps")
GMRF_THETA = ("kappa_gamma", "tau_gamma", "kappa_psi", "tau_psi", "sigma2_u", "sigma2_v", "sigma2_eps")

# latent column kinds in the LMM layout
_U, _V, _G, _H = range(4)


@dataclass(frozen=True)
class Target:
    x: float
    y: float
    day: int
    aod: float
    covariates: Tuple[float, ...] = ()
    station_id: Optional[str] = None
    region: Optional[int] = None


@dataclass(frozen=True)
class RasterSpec:
    x0: float
    x1: float
    y0: float
    y1: float
    nx: int
    ny: int

    def points(self) -> np.ndarray:
        gx, gy = np.meshgrid(np.linspace(self.x0, self.x1, self.nx), np.linspace(self.y0, self.y1, self.ny))
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True, eq=False)
class Prediction:
    frame: pd.DataFrame

    @property
    def yhat(self) -> np.ndarray:
        return self.frame["yhat"].to_numpy()

    def to_csv(self, path: str) -> None:
        self.frame.to_csv(path, index=False)


@dataclass(frozen=True, eq=False)
class _SpecBase:
    day_offset: Dict[int, int]
    covariate_names: Tuple[str, ...]
    stations: Tuple[Station, ...]

    @property
    def days(self) -> List[int]:
        return sorted(self.day_offset)

    def _offset(self, day: int) -> int:
        try:
            return self.day_offset[int(day)]
        except KeyError:
            raise UnseenDay(day) from None

    def _stations_dict(self) -> List[Dict[str, Any]]:
        return [{"id": s.id, "x": s.x, "y": s.y, "region": s.region} for s in self.stations]


@dataclass(frozen=True, eq=False)
class LmmSpec(_SpecBase):
    group_offset: Dict[Tuple[int, int], int] = field(default_factory=dict)
    region_grid: Optional[RegionGrid] = None

    kind = "lmm"
    theta_names = LMM_THETA

    def region_of(self, xy: np.ndarray) -> np.ndarray:
        """Region of arbitrary points: the grid cell if a grid is known, else the nearest station's region."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if self.region_grid is not None:
            return np.array([self.region_grid.region_of(x, y) for x, y in xy], dtype=np.int64)
        coords = np.array([(s.x, s.y) for s in self.stations])
        regions = np.array([s.region for s in self.stations], dtype=np.int64)
        _, nearest = cKDTree(coords).query(xy)
        return regions[nearest]

    def to_dict(self) -> Dict[str, Any]:
        grid = self.region_grid
        return {
            "kind": self.kind,
            "covariate_names": list(self.covariate_names),
            "day_offset": [[d, o] for d, o in sorted(self.day_offset.items())],
            "group_offset": [[d, r, o] for (d, r), o in sorted(self.group_offset.items())],
            "region_grid": None if grid is None else {"cell_size": grid.cell_size, "origin": list(grid.origin)},
            "stations": self._stations_dict(),
        }


@dataclass(frozen=True, eq=False)
class GmrfSpec(_SpecBase):
    mesh: Optional[Mesh] = None

    kind = "gmrf"
    theta_names = GMRF_THETA

    @cached_property
    def fem(self) -> FemMatrices:
        return assemble_fem(self.mesh)

    @property
    def block_size(self) -> int:
        return 2 * self.mesh.m + 2

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "covariate_names": list(self.covariate_names),
            "day_offset": [[d, o] for d, o in sorted(self.day_offset.items())],
            "mesh": {"nodes": self.mesh.nodes.tolist(), "triangles": self.mesh.triangles.tolist()},
            "stations": self._stations_dict(),
        }


ModelSpec = Union[LmmSpec, GmrfSpec]


def spec_from_dict(raw: Dict[str, Any]) -> ModelSpec:
    stations = tuple(Station(str(s["id"]), float(s["x"]), float(s["y"]), s.get("region")) for s in raw["stations"])
    day_offset = {int(d): int(o) for d, o in raw["day_offset"]}
    covs = tuple(raw.get("covariate_names", ()))
    if raw["kind"] == "lmm":
        grid = raw.get("region_grid")
        return LmmSpec(
            day_offset, covs, stations,
            group_offset={(int(d), int(r)): int(o) for d, r, o in raw["group_offset"]},
            region_grid=None if grid is None else RegionGrid(float(grid["cell_size"]), tuple(grid["origin"])),
        )
    if raw["kind"] == "gmrf":
        from mesh import _boundary_nodes

        nodes = np.asarray(raw["mesh"]["nodes"], dtype=float)
        triangles = np.asarray(raw["mesh"]["triangles"], dtype=np.int64)
        mesh = Mesh(nodes, triangles, frozenset(_boundary_nodes(triangles)))
        return GmrfSpec(day_offset, covs, stations, mesh=mesh)
    raise ValueError(f"unknown model kind {raw['kind']!r}")


# -----------------------
# Shared pieces
# -----------------------

def design_matrix(covariates: np.ndarray, aod: np.ndarray) -> np.ndarray:
    """Columns: intercept α, covariates β_k, AOD main effect β_AOD."""
    n = len(aod)
    return np.column_stack([np.ones(n), np.asarray(covariates, dtype=float).reshape(n, -1), aod])


def _day_blocks(day: np.ndarray, day_offset: Dict[int, int], width: Dict[int, int]) -> Tuple[LatentBlock, ...]:
    blocks = []
    for d in sorted(day_offset):
        rows = np.flatnonzero(day == d)
        start = day_offset[d]
        blocks.append(LatentBlock(rows, np.arange(start, start + width[d])))
    return tuple(blocks)


def _ensure_regions(data: Dataset, region_grid: Optional[RegionGrid]) -> Tuple[Dataset, Optional[RegionGrid]]:
    """Fill missing regions from the grid; keep the grid only if it reproduces every station's region."""
    if any(s.region is None for s in data.stations):
        if region_grid is None:
            raise ValueError("stations lack region ids and no region grid was given")
        data = data.with_stations(assign_regions(data.stations, region_grid))
    if region_grid is not None and any(region_grid.region_of(s.x, s.y) != s.region for s in data.stations):
        logger.info("Region ids do not follow the grid; off-station regions come from the nearest station")
        region_grid = None
    return data, region_grid


# -----------------------
# LMM
# -----------------------

def build_lmm(data: Dataset, region_grid: Optional[RegionGrid] = None) -> LinearGaussianModel:
    data, region_grid = _ensure_regions(data, region_grid)
    day, region, aod = data.day, data.region, data.aod
    n = len(data)

    day_offset: Dict[int, int] = {}
    group_offset: Dict[Tuple[int, int], int] = {}
    width: Dict[int, int] = {}
    kinds: List[int] = []
    for d in np.unique(day):
        d = int(d)
        day_offset[d] = len(kinds)
        kinds += [_U, _V]
        for r in np.unique(region[day == d]):
            group_offset[(d, int(r))] = len(kinds)
            kinds += [_G, _H]
        width[d] = len(kinds) - day_offset[d]
    kinds_arr = np.asarray(kinds, dtype=np.int64)
    q = len(kinds)

    u_col = np.array([day_offset[int(d)] for d in day], dtype=np.int64)
    g_col = np.array([group_offset[(int(d), int(r))] for d, r in zip(day, region)], dtype=np.int64)
    rows = np.tile(np.arange(n), 4)
    cols = np.concatenate([u_col, u_col + 1, g_col, g_col + 1])
    vals = np.concatenate([np.ones(n), aod, np.ones(n), aod])
    B = sparse.csr_matrix((vals, (rows, cols)), shape=(n, q))

    blocks = _day_blocks(day, day_offset, width)

    def prior_blocks(theta: np.ndarray) -> List[sparse.spmatrix]:
        precision = 1.0 / np.asarray(theta[:4], dtype=float)[kinds_arr]
        return [sparse.diags(precision[b.cols], format="csc") for b in blocks]

    spec = LmmSpec(day_offset, data.covariate_names, data.stations, group_offset=group_offset, region_grid=region_grid)
    logger.info("LMM: n=%d, %d days, %d (day, region) groups, q=%d", n, len(day_offset), len(group_offset), q)
    return LinearGaussianModel(
        y=data.pm,
        X=design_matrix(data.covariates, aod),
        B=B,
        prior_blocks=prior_blocks,
        noise_variance=lambda theta: float(theta[4]),
        theta_names=LMM_THETA,
        blocks=blocks,
        layout=spec,
    )


# -----------------------
# GMRF
# -----------------------

def build_gmrf(data: Dataset, mesh: Mesh) -> LinearGaussianModel:
    day, aod = data.day, data.aod
    n, m = len(data), mesh.m
    A = project(mesh, data.station_xy).A[data.station_index].tocoo()

    width = 2 * m + 2
    days = [int(d) for d in np.unique(day)]
    day_offset = {d: k * width for k, d in enumerate(days)}
    offset = np.array([day_offset[int(d)] for d in day], dtype=np.int64)

    rows = np.concatenate([A.row, A.row, np.arange(n), np.arange(n)])
    cols = np.concatenate([
        offset[A.row] + A.col,
        offset[A.row] + m + A.col,
        offset + 2 * m,
        offset + 2 * m + 1,
    ])
    vals = np.concatenate([A.data, A.data * aod[A.row], np.ones(n), aod])
    B = sparse.csr_matrix((vals, (rows, cols)), shape=(n, width * len(days)))

    spec = GmrfSpec(day_offset, data.covariate_names, data.stations, mesh=mesh)
    blocks = _day_blocks(day, day_offset, {d: width for d in days})
    fem = spec.fem

    def prior_blocks(theta: np.ndarray) -> List[sparse.spmatrix]:
        Qg = spde_precision(fem, SpdeParams(theta[0], theta[1]))
        Qp = spde_precision(fem, SpdeParams(theta[2], theta[3]))
        day_effects = sparse.diags([1.0 / theta[4], 1.0 / theta[5]])
        Qday = sparse.block_diag([Qg, Qp, day_effects], format="csc")
        # one shared object per day; the engine factors it once per evaluation
        return [Qday] * len(blocks)

    logger.info("GMRF: n=%d, %d days, mesh m=%d, q=%d", n, len(days), m, B.shape[1])
    return LinearGaussianModel(
        y=data.pm,
        X=design_matrix(data.covariates, aod),
        B=B,
        prior_blocks=prior_blocks,
        noise_variance=lambda theta: float(theta[6]),
        theta_names=GMRF_THETA,
        blocks=blocks,
        layout=spec,
    )


# -----------------------
# Starting values and bounds
# -----------------------

def initial_theta(model: LinearGaussianModel, data: Dataset) -> Tuple[np.ndarray, List[Tuple[float, float]]]:
    """Equal shares of the OLS residual variance; κ from a fifth of the domain diameter."""
    beta, *_ = np.linalg.lstsq(model.X, model.y, rcond=None)
    resid = model.y - model.X @ beta
    s2 = float(np.var(resid)) if len(resid) > 1 else 1.0
    s2 = s2 if s2 > 0 else 1.0
    spec = model.layout

    if isinstance(spec, LmmSpec):
        theta0 = np.full(5, s2 / 5.0)
        bounds = [(s2 * 1e-6, s2 * 1e3)] * 5
        return theta0, bounds

    share = s2 / 5.0
    diameter = max(spec.mesh.diameter, 1e-9)
    kappa0 = math.sqrt(8.0) / (diameter / 5.0)
    kappa_bounds = (math.sqrt(8.0) / (10.0 * diameter), math.sqrt(8.0) / max(spec.mesh.max_edge_length, 1e-9))
    var_bounds = (share * 1e-5, share * 1e3)
    tau_bounds = (
        1.0 / (math.sqrt(4.0 * math.pi * var_bounds[1]) * kappa_bounds[1]),
        1.0 / (math.sqrt(4.0 * math.pi * var_bounds[0]) * kappa_bounds[0]),
    )
    kappa0 = min(max(kappa0, kappa_bounds[0]), kappa_bounds[1])
    tau0 = SpdeParams.from_range_variance(math.sqrt(8.0) / kappa0, share).tau
    theta0 = np.array([kappa0, tau0, kappa0, tau0, share, share, share])
    bounds = [kappa_bounds, tau_bounds, kappa_bounds, tau_bounds, var_bounds, var_bounds, var_bounds]
    return theta0, bounds


# -----------------------
# Prediction
# -----------------------

def targets_from(data: Dataset) -> List[Target]:
    xy, cov = data.xy, data.covariates
    regions = data.region
    return [
        Target(float(xy[k, 0]), float(xy[k, 1]), int(d), float(a), tuple(cov[k]), sid,
               None if regions[k] < 0 else int(regions[k]))
        for k, (sid, d, a) in enumerate(zip(data.frame["station_id"], data.day, data.aod))
    ]


def predict(fit: FitResult, spec: ModelSpec, targets: Sequence[Target]) -> Prediction:
    n = len(targets)
    xy = np.array([(t.x, t.y) for t in targets], dtype=float).reshape(n, 2)
    day = np.array([t.day for t in targets], dtype=np.int64)
    aod = np.array([t.aod for t in targets], dtype=float)
    cov = np.array([t.covariates for t in targets], dtype=float).reshape(n, len(spec.covariate_names))

    offsets = np.array([spec._offset(d) for d in day], dtype=np.int64)
    beta, z = fit.beta_hat, fit.z_hat
    fixed = design_matrix(cov, aod) @ beta

    if isinstance(spec, LmmSpec):
        day_part = z[offsets] + z[offsets + 1] * aod
        explicit = [t.region for t in targets]
        region = spec.region_of(xy) if any(r is None for r in explicit) else np.zeros(n, dtype=np.int64)
        region = np.array([r if r is not None else region[k] for k, r in enumerate(explicit)], dtype=np.int64)
        spatial = np.zeros(n)
        for k, (d, r) in enumerate(zip(day, region)):
            g = spec.group_offset.get((int(d), int(r)))
            if g is not None:
                spatial[k] = z[g] + z[g + 1] * aod[k]
    else:
        m = spec.mesh.m
        A = project(spec.mesh, xy).A.tocoo()
        gamma = np.bincount(A.row, weights=A.data * z[offsets[A.row] + A.col], minlength=n)
        psi = np.bincount(A.row, weights=A.data * z[offsets[A.row] + m + A.col], minlength=n)
        spatial = gamma + psi * aod
        day_part = z[offsets + 2 * m] + z[offsets + 2 * m + 1] * aod

    frame = pd.DataFrame({
        "station_id": [t.station_id for t in targets],
        "x": xy[:, 0],
        "y": xy[:, 1],
        "day": day,
        "yhat": fixed + day_part + spatial,
        "fixed": fixed,
        "day_part": day_part,
        "spatial_part": spatial,
    })
    return Prediction(frame)


def export_spatial_surface(
    fit: FitResult, spec: ModelSpec, day: int, grid: RasterSpec, component: str = "intercept"
) -> pd.DataFrame:
    """The fitted spatial effect of one day on a regular grid of points.

    ``component`` picks the intercept effect (ĝ or γ̂) or the AOD-slope effect
    (ĥ or ψ̂). GMRF points outside the mesh get NaN.
    """
    if component not in ("intercept", "slope"):
        raise ValueError(f"component must be 'intercept' or 'slope', got {component!r}")
    shift = 0 if component == "intercept" else 1
    start = spec._offset(day)
    pts = grid.points()
    z = fit.z_hat

    if isinstance(spec, LmmSpec):
        region = spec.region_of(pts)
        value = np.array([
            z[spec.group_offset[(int(day), int(r))] + shift] if (int(day), int(r)) in spec.group_offset else 0.0
            for r in region
        ])
    else:
        m = spec.mesh.m
        proj = project(spec.mesh, pts, allow_outside=True)
        field_values = z[start + shift * m: start + (shift + 1) * m]
        value = proj.A @ field_values
        value[~proj.inside] = np.nan
    return pd.DataFrame({"x": pts[:, 0], "y": pts[:, 1], "value": value})


# -----------------------
# Precision views for one day
# -----------------------

def day_precisions(model: LinearGaussianModel, theta: np.ndarray, day: int, data: Dataset) -> Dict[str, Any]:
    """Latent prior/posterior precision blocks and the station-level (Var[η])⁻¹ of one day.

    ``data`` is the dataset the model was built from. Observation rows are ordered
    by region then station id so region blocks are contiguous.
    """
    spec = model.layout
    start = spec._offset(day)
    idx = next(k for k, part in enumerate(model.parts) if part.cols.size and part.cols[0] == start)
    part = model.parts[idx]
    theta = np.asarray(theta, dtype=float)
    s2 = float(model.noise_variance(theta))
    Qp = sparse.csc_matrix(model.prior_blocks(theta)[idx])
    Qpost = (Qp + part.BtB / s2).tocsc()

    sid = data.frame["station_id"].to_numpy()[part.rows]
    regions = data.region[part.rows]
    order = np.lexsort((sid, regions))

    Bd = part.B.toarray()[order]
    cov = Bd @ np.linalg.solve(Qp.toarray(), Bd.T) + s2 * np.eye(len(order))
    return {
        "prior": Qp,
        "posterior": Qpost,
        "eta_precision": np.linalg.inv(cov),
        "station_ids": [str(s) for s in sid[order]],
        "regions": regions[order],
    }


# -----------------------
# One-call fitting
# -----------------------

def fit_model(
    kind: str,
    data: Dataset,
    region_grid: Optional[RegionGrid] = None,
    mesh: Optional[Mesh] = None,
    max_rounds: int = 200,
    tol: float = 1e-6,
    n_jobs: Optional[int] = None,
    max_evals: Optional[int] = None,
) -> Tuple[FitResult, LinearGaussianModel]:
    """Build the model of ``kind`` on ``data`` and maximize its marginal likelihood."""
    if kind == "lmm":
        model = build_lmm(data, region_grid)
    elif kind == "gmrf":
        model = build_gmrf(data, mesh if mesh is not None else build_mesh(data.stations))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    theta0, bounds = initial_theta(model, data)
    result = fit(model, theta0, bounds, max_rounds=max_rounds, tol=tol, n_jobs=n_jobs, max_evals=max_evals)
    return result, model
