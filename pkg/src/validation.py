"""Cross-validation: K-fold and leave-p-out h-block plans, metrics, paired comparisons and the h-sweep."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

from joblib import Parallel, delayed
import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from config import thread_count
from domain import Dataset, RegionGrid
from errors import (
    BadK,
    DegenerateResponse,
    DimensionMismatch,
    EmptyTrainSet,
    FoldError,
    PlanMismatch,
    SpatioTempError,
)
from mesh import Mesh, build_mesh
from models import fit_model, predict, targets_from


logger = logging.getLogger(__name__)

# two-sided 95% normal quantile
Z95 = 1.96


@dataclass(frozen=True, eq=False)
class Fold:
    index: int
    train_rows: np.ndarray
    test_rows: np.ndarray
    test_stations: Tuple[str, ...] = ()
    dropped_stations: Tuple[str, ...] = ()

    @property
    def train_test_ratio(self) -> float:
        return len(self.train_rows) / len(self.test_rows) if len(self.test_rows) else math.inf


@dataclass(frozen=True, eq=False)
class FoldPlan:
    scheme: str
    folds: Tuple[Fold, ...]
    seed: int
    n_rows: int
    h: Optional[float] = None
    p: Optional[int] = None

    @property
    def signature(self) -> str:
        digest = hashlib.sha1(f"{self.scheme}|{self.n_rows}".encode())
        for fold in self.folds:
            digest.update(np.asarray(fold.test_rows, dtype=np.int64).tobytes())
            digest.update(b"|")
            digest.update(np.asarray(fold.train_rows, dtype=np.int64).tobytes())
            digest.update(b"#")
        return digest.hexdigest()

    @property
    def train_test_ratio(self) -> float:
        train = sum(len(f.train_rows) for f in self.folds)
        test = sum(len(f.test_rows) for f in self.folds)
        return train / test if test else math.inf


# -----------------------
# Fold plans
# -----------------------

def make_folds_kfold(data: Dataset, K: int, seed: int) -> FoldPlan:
    """Uniform random partition of observations into K folds of near-equal size."""
    n = len(data)
    if K < 2 or K > n:
        raise BadK(f"K must satisfy 2 <= K <= n = {n}, got {K}")
    perm = np.random.default_rng(seed).permutation(n)
    rows = np.arange(n)
    folds = []
    for k, test in enumerate(np.array_split(perm, K)):
        test = np.sort(test)
        folds.append(Fold(k, np.setdiff1d(rows, test, assume_unique=True), test))
    return FoldPlan(f"kfold:{K}", tuple(folds), seed, n)


def hblock_split(data: Dataset, test_stations: Sequence[str], h: float, index: int = 0) -> Fold:
    """One leave-p-out h-block fold: non-test stations strictly closer than ``h`` to a test station are dropped."""
    if h < 0:
        raise ValueError(f"h must be >= 0, got {h}")
    lookup = data.station_lookup
    test = set(test_stations)
    others = [s for s in data.stations if s.id not in test]
    if others and test:
        test_xy = np.array([(lookup[s].x, lookup[s].y) for s in sorted(test)])
        other_xy = np.array([(s.x, s.y) for s in others])
        near = cdist(other_xy, test_xy).min(axis=1) < h
    else:
        near = np.zeros(len(others), dtype=bool)
    dropped = tuple(s.id for s, d in zip(others, near) if d)
    train_ids = {s.id for s, d in zip(others, near) if not d}
    if not train_ids:
        raise EmptyTrainSet(f"fold {index}: h = {h} excludes every training station")

    ids = data.frame["station_id"].to_numpy()
    train_rows = np.flatnonzero(np.isin(ids, list(train_ids)))
    test_rows = np.flatnonzero(np.isin(ids, list(test)))
    return Fold(index, train_rows, test_rows, tuple(sorted(test)), tuple(sorted(dropped)))


def make_folds_lpo_hblock(data: Dataset, p: int, h: float, n_iter: int, seed: int) -> FoldPlan:
    """``n_iter`` iterations of p random test stations with an h-radius exclusion buffer.

    Test stations depend only on the seed, so plans for different h share them.
    """
    n_stations = len(data.stations)
    if p < 1 or n_iter < 1:
        raise ValueError(f"need p >= 1 and n_iter >= 1, got p={p}, n_iter={n_iter}")
    if p >= n_stations:
        raise EmptyTrainSet(f"p = {p} leaves no training stations out of {n_stations}")
    rng = np.random.default_rng(seed)
    folds = []
    for it in range(n_iter):
        picked = rng.choice(n_stations, size=p, replace=False)
        folds.append(hblock_split(data, [data.stations[k].id for k in picked], h, index=it))
    plan = FoldPlan(f"lpo:{p}:{h:g}", tuple(folds), seed, len(data), h=float(h), p=p)
    logger.info(
        "LPO h-block plan p=%d h=%g: %d iterations, train:test ratio %.2f",
        p, h, n_iter, plan.train_test_ratio,
    )
    return plan


def fold_map(data: Dataset, plan: FoldPlan) -> pd.DataFrame:
    """Station roles per iteration of a leave-p-out plan (train, test or dropped)."""
    if plan.h is None:
        raise ValueError("fold maps exist only for leave-p-out plans")
    records = []
    for fold in plan.folds:
        test, dropped = set(fold.test_stations), set(fold.dropped_stations)
        for s in data.stations:
            role = "test" if s.id in test else "dropped" if s.id in dropped else "train"
            records.append({"iteration": fold.index, "station_id": s.id, "x": s.x, "y": s.y, "role": role})
    return pd.DataFrame.from_records(records, columns=["iteration", "station_id", "x", "y", "role"])


# -----------------------
# Metrics
# -----------------------

def _pair(yhat: Sequence[float], y: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    yhat, y = np.asarray(yhat, dtype=float), np.asarray(y, dtype=float)
    if yhat.shape != y.shape or y.size == 0:
        raise DimensionMismatch(f"yhat {yhat.shape} and y {y.shape} must be equal and non-empty")
    return yhat, y


def rmse(yhat: Sequence[float], y: Sequence[float]) -> float:
    yhat, y = _pair(yhat, y)
    return float(np.sqrt(np.mean((yhat - y) ** 2)))


def r2(yhat: Sequence[float], y: Sequence[float]) -> float:
    """1 − SSE/SST about the holdout mean."""
    yhat, y = _pair(yhat, y)
    sst = float(np.sum((y - y.mean()) ** 2))
    if y.size < 2 or sst == 0.0:
        raise DegenerateResponse("R² needs at least two distinct responses")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / sst


def r2_corr(yhat: Sequence[float], y: Sequence[float]) -> float:
    """Squared Pearson correlation between predictions and responses."""
    yhat, y = _pair(yhat, y)
    if y.size < 2 or np.ptp(y) == 0.0:
        raise DegenerateResponse("R² needs at least two distinct responses")
    if np.ptp(yhat) == 0.0:
        return 0.0
    return float(np.corrcoef(yhat, y)[0, 1] ** 2)


def _safe(metric, yhat: np.ndarray, y: np.ndarray) -> float:
    try:
        return metric(yhat, y)
    except (DegenerateResponse, DimensionMismatch):
        return math.nan


# -----------------------
# Running a plan
# -----------------------

@dataclass(frozen=True)
class EngineConfig:
    region_grid: Optional[RegionGrid] = None
    mesh: Optional[Mesh] = None
    mesh_buffer_fraction: float = 0.2
    mesh_max_edge: Optional[float] = None
    max_rounds: int = 200
    tol: float = 1e-6
    mesh_max_nodes: int = 600
    max_evals: Optional[int] = None


@dataclass(frozen=True, eq=False)
class _FoldOutcome:
    fold: int
    n_train: int
    rows: np.ndarray
    y: np.ndarray
    yhat: np.ndarray
    skipped: int


@dataclass(frozen=True, eq=False)
class EvalReport:
    model: str
    scheme: str
    plan_signature: str
    seed: int
    folds: pd.DataFrame
    rows: np.ndarray
    y: np.ndarray
    yhat: np.ndarray
    skipped: int = 0

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def rmse(self) -> float:
        """Square root of the observation-weighted mean of fold MSEs."""
        return float(np.sqrt(np.sum(self.folds["sse"]) / np.sum(self.folds["n_test"])))

    @property
    def r2(self) -> float:
        return _safe(r2, self.yhat, self.y)

    @property
    def r2_corr(self) -> float:
        return _safe(r2_corr, self.yhat, self.y)

    @property
    def train_test_ratio(self) -> float:
        return float(np.sum(self.folds["n_train"]) / max(np.sum(self.folds["n_test"]), 1))

    def summary(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "scheme": self.scheme,
            "seed": self.seed,
            "n": self.n,
            "rmse": self.rmse,
            "r2": self.r2,
            "r2_corr": self.r2_corr,
            "train_test_ratio": self.train_test_ratio,
            "skipped": self.skipped,
        }

    def to_csv(self, path: str) -> None:
        self.folds.to_csv(path, index=False)

    def to_json(self) -> str:
        body = self.summary()
        body["folds"] = json.loads(self.folds.to_json(orient="records"))
        return json.dumps(body, indent=2, sort_keys=True, allow_nan=True)


def _run_fold(kind: str, data: Dataset, fold: Fold, engine: EngineConfig, n_jobs: Optional[int]) -> _FoldOutcome:
    train = data.take(fold.train_rows)
    test = data.take(fold.test_rows)
    if len(train) == 0:
        raise EmptyTrainSet(f"fold {fold.index} has no training rows")

    if kind == "mean":
        return _FoldOutcome(fold.index, len(train), fold.test_rows, test.pm, np.full(len(test), train.pm.mean()), 0)

    result, model = fit_model(
        kind, train, region_grid=engine.region_grid, mesh=engine.mesh,
        max_rounds=engine.max_rounds, tol=engine.tol, n_jobs=n_jobs, max_evals=engine.max_evals,
    )
    spec = model.layout
    seen = np.isin(test.day, list(spec.day_offset))
    skipped = int((~seen).sum())
    if skipped:
        logger.warning("Fold %d: %d test rows on days absent from training were skipped", fold.index, skipped)
    kept = np.flatnonzero(seen)
    targets = targets_from(test.take(kept))
    yhat = predict(result, spec, targets).yhat if targets else np.zeros(0)
    return _FoldOutcome(fold.index, len(train), fold.test_rows[kept], test.pm[kept], yhat, skipped)


def _guarded(kind: str, data: Dataset, fold: Fold, engine: EngineConfig, n_jobs: Optional[int]) -> _FoldOutcome:
    try:
        return _run_fold(kind, data, fold, engine, n_jobs)
    except (SpatioTempError, ValueError, np.linalg.LinAlgError) as exc:
        raise FoldError(fold.index, exc) from exc


def run_cv(data: Dataset, kind: str, plan: FoldPlan, engine: Optional[EngineConfig] = None) -> EvalReport:
    """Fit on each training fold, predict its test fold, and aggregate."""
    engine = engine or EngineConfig()
    if kind == "gmrf" and engine.mesh is None:
        # one mesh over every station so each test station is inside it
        mesh = build_mesh(data.stations, engine.mesh_buffer_fraction, engine.mesh_max_edge, engine.mesh_max_nodes)
        engine = replace(engine, mesh=mesh)

    jobs = thread_count()
    if jobs > 1 and len(plan.folds) > 1:
        outcomes = Parallel(n_jobs=jobs, prefer="threads")(
            delayed(_guarded)(kind, data, fold, engine, 1) for fold in plan.folds
        )
    else:
        outcomes = [_guarded(kind, data, fold, engine, None) for fold in plan.folds]

    records = []
    for fold, out in zip(plan.folds, outcomes):
        sse = float(np.sum((out.yhat - out.y) ** 2))
        records.append({
            "fold": out.fold,
            "n_train": out.n_train,
            "n_test": int(out.y.size),
            "n_skipped": out.skipped,
            "n_dropped_stations": len(fold.dropped_stations),
            "sse": sse,
            "rmse": math.sqrt(sse / out.y.size) if out.y.size else math.nan,
            "r2": _safe(r2, out.yhat, out.y),
            "r2_corr": _safe(r2_corr, out.yhat, out.y),
        })
        logger.info("%s %s fold %d: rmse %.4f (%d test rows)", kind, plan.scheme, out.fold, records[-1]["rmse"], out.y.size)

    report = EvalReport(
        model=kind,
        scheme=plan.scheme,
        plan_signature=plan.signature,
        seed=plan.seed,
        folds=pd.DataFrame.from_records(records),
        rows=np.concatenate([o.rows for o in outcomes]),
        y=np.concatenate([o.y for o in outcomes]),
        yhat=np.concatenate([o.yhat for o in outcomes]),
        skipped=sum(o.skipped for o in outcomes),
    )
    logger.info("%s %s: RMSE %.4f, R² %.4f", kind, plan.scheme, report.rmse, report.r2)
    return report


# -----------------------
# Comparisons
# -----------------------

@dataclass(frozen=True)
class PairedComparison:
    scheme: str
    model_a: str
    model_b: str
    n: int
    mean: float
    sd: float
    ci_low: float
    ci_high: float

    def to_row(self) -> Dict[str, Any]:
        return asdict(self)


def mean_ci(values: Sequence[float]) -> Tuple[float, float, float, float]:
    """Mean, sample sd and the normal-approximation 95% interval of the mean."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return (math.nan,) * 4
    mean = float(values.mean())
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    half = Z95 * sd / math.sqrt(values.size)
    return mean, sd, mean - half, mean + half


def compare_reports(a: EvalReport, b: EvalReport) -> PairedComparison:
    """Per-fold RMSE differences a − b; both reports must come from the same fold plan."""
    if a.plan_signature != b.plan_signature:
        raise PlanMismatch(f"{a.model} and {b.model} were evaluated on different fold plans")
    diff = a.folds["rmse"].to_numpy() - b.folds["rmse"].to_numpy()
    diff = diff[np.isfinite(diff)]
    if diff.size == 0:
        raise PlanMismatch("no fold has predictions from both models")
    mean, sd, lo, hi = mean_ci(diff)
    return PairedComparison(a.scheme, a.model, b.model, int(diff.size), mean, sd, lo, hi)


def cv_table(reports: Sequence[EvalReport], decimals: int = 2, with_r2_corr: bool = False) -> pd.DataFrame:
    """Rows are models, columns are scheme × {RMSE, R²}."""
    table: Dict[str, Dict[str, float]] = {}
    for rep in reports:
        row = table.setdefault(rep.model, {})
        row[f"{rep.scheme} RMSE"] = round(rep.rmse, decimals)
        row[f"{rep.scheme} R2"] = round(rep.r2, decimals)
        if with_r2_corr:
            row[f"{rep.scheme} R2corr"] = round(rep.r2_corr, decimals)
    frame = pd.DataFrame.from_dict(table, orient="index")
    frame.index.name = "model"
    return frame.reset_index()


def paired_table(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """Every model pair within each scheme."""
    by_scheme: Dict[str, List[EvalReport]] = {}
    for rep in reports:
        by_scheme.setdefault(rep.scheme, []).append(rep)
    rows = []
    for scheme, reps in by_scheme.items():
        for i in range(len(reps)):
            for j in range(i + 1, len(reps)):
                rows.append(compare_reports(reps[i], reps[j]).to_row())
    columns = ["scheme", "model_a", "model_b", "n", "mean", "sd", "ci_low", "ci_high"]
    return pd.DataFrame.from_records(rows, columns=columns)


# -----------------------
# h-sweep
# -----------------------

@dataclass(frozen=True, eq=False)
class SweepResult:
    tidy: pd.DataFrame
    summary: pd.DataFrame
    reports: List[EvalReport] = field(default_factory=list)


def h_sweep(
    data: Dataset,
    kinds: Sequence[str],
    p: int,
    h_list: Sequence[float],
    n_iter: int,
    seed: int,
    engine: Optional[EngineConfig] = None,
) -> SweepResult:
    """Leave-p-out h-block evaluation per radius and model, one shared plan per radius."""
    h_list = [float(h) for h in h_list]
    if not h_list or h_list != sorted(h_list):
        raise ValueError("h_list must be non-empty and ascending")
    engine = engine or EngineConfig()
    if "gmrf" in kinds and engine.mesh is None:
        mesh = build_mesh(data.stations, engine.mesh_buffer_fraction, engine.mesh_max_edge, engine.mesh_max_nodes)
        engine = replace(engine, mesh=mesh)

    tidy, summary, reports = [], [], []
    for h in h_list:
        plan = make_folds_lpo_hblock(data, p, h, n_iter, seed)
        for kind in kinds:
            rep = run_cv(data, kind, plan, engine)
            reports.append(rep)
            per_iter = rep.folds["rmse"].to_numpy()
            for it, value in zip(rep.folds["fold"], per_iter):
                tidy.append({"h": h, "model": kind, "iter": int(it), "rmse": float(value)})
            mean, sd, lo, hi = mean_ci(per_iter[np.isfinite(per_iter)])
            summary.append({
                "h": h, "model": kind, "mean_rmse": mean, "sd": sd,
                "ci_low": lo, "ci_high": hi, "n_iter": n_iter,
            })
            logger.info("h=%g %s: mean RMSE %.4f [%.4f, %.4f]", h, kind, mean, lo, hi)
    return SweepResult(pd.DataFrame.from_records(tidy), pd.DataFrame.from_records(summary), reports)
