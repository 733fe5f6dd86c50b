"""Linear-Gaussian latent model machinery shared by the LMM and the GMRF.

    y = X β + B z + ε,   z ~ N(0, Qprior(θ)⁻¹),   ε ~ N(0, σ²_ε(θ) I)

Latent effects are grouped into independent blocks (one per day in both models):
rows and latent columns of different blocks never interact, so every quantity is a
sum over blocks, each handled with one sparse factorization of
Q_post = Qprior + BᵀB / σ²_ε.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import logging
import math
import time
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from joblib import Parallel, delayed
import numpy as np
from scipy import sparse
from scipy.optimize import minimize

from config import thread_count
from errors import DimensionMismatch, NonFinite, NotPositiveDefinite
from sparse_linalg import CholeskyFactor, factorize


logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
# default Nelder–Mead budget per free parameter and search
EVALS_PER_PARAMETER = 100
# Nelder–Mead simplex size tolerance on log θ
XATOL = 1e-4


@dataclass(frozen=True, eq=False)
class LatentBlock:
    rows: np.ndarray
    cols: np.ndarray


@dataclass(frozen=True, eq=False)
class LinearGaussianModel:
    y: np.ndarray
    X: np.ndarray
    B: sparse.csr_matrix
    prior_blocks: Callable[[np.ndarray], Sequence[sparse.spmatrix]]
    noise_variance: Callable[[np.ndarray], float]
    theta_names: Tuple[str, ...]
    blocks: Tuple[LatentBlock, ...] = ()
    layout: Any = None

    def __post_init__(self) -> None:
        n = len(self.y)
        if self.X.shape[0] != n or self.B.shape[0] != n:
            raise DimensionMismatch(f"y has {n} rows, X {self.X.shape[0]}, B {self.B.shape[0]}")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def q(self) -> int:
        return int(self.B.shape[1])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @cached_property
    def parts(self) -> List["_BlockPart"]:
        blocks = self.blocks or (LatentBlock(np.arange(self.n), np.arange(self.q)),)
        B = self.B.tocsr()
        parts = []
        for block in blocks:
            Bb = B[block.rows][:, block.cols].tocsc()
            parts.append(_BlockPart(block.rows, block.cols, Bb, (Bb.T @ Bb).tocsc(), Bb.T.tocsr()))
        return parts

    @cached_property
    def free_rows(self) -> np.ndarray:
        """Rows not covered by any block; they carry noise only."""
        covered = np.zeros(self.n, dtype=bool)
        for part in self.parts:
            covered[part.rows] = True
        return np.flatnonzero(~covered)

    def prior_precision(self, theta: np.ndarray) -> sparse.csc_matrix:
        """Full q × q prior precision assembled from the block precisions."""
        rows, cols, vals = [], [], []
        for part, Qb in zip(self.parts, self.prior_blocks(np.asarray(theta, dtype=float))):
            Qb = sparse.coo_matrix(Qb)
            rows.append(part.cols[Qb.row])
            cols.append(part.cols[Qb.col])
            vals.append(Qb.data)
        if not vals:
            return sparse.csc_matrix((self.q, self.q))
        return sparse.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.q, self.q)
        )


@dataclass(frozen=True, eq=False)
class _BlockPart:
    rows: np.ndarray
    cols: np.ndarray
    B: sparse.csc_matrix
    BtB: sparse.csc_matrix
    Bt: sparse.csr_matrix


@dataclass(frozen=True)
class Convergence:
    converged: bool
    rounds: int
    evaluations: int
    message: str = ""
    seconds: float = 0.0


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_names: Tuple[str, ...]
    theta_hat: np.ndarray
    beta_hat: np.ndarray
    z_hat: np.ndarray
    loglik: float
    convergence: Convergence
    trace: Tuple[Tuple[int, Tuple[float, ...], float], ...] = ()

    @property
    def theta(self) -> Dict[str, float]:
        return dict(zip(self.theta_names, map(float, self.theta_hat)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "theta_names": list(self.theta_names),
            "theta_hat": [float(t) for t in self.theta_hat],
            "beta_hat": [float(b) for b in self.beta_hat],
            "z_hat": [float(z) for z in self.z_hat],
            "loglik": float(self.loglik),
            "convergence": {
                "converged": self.convergence.converged,
                "rounds": self.convergence.rounds,
                "evaluations": self.convergence.evaluations,
                "message": self.convergence.message,
                "seconds": self.convergence.seconds,
            },
            "trace": [[r, list(t), ll] for r, t, ll in self.trace],
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "FitResult":
        conv = raw.get("convergence", {})
        return cls(
            theta_names=tuple(raw["theta_names"]),
            theta_hat=np.asarray(raw["theta_hat"], dtype=float),
            beta_hat=np.asarray(raw["beta_hat"], dtype=float),
            z_hat=np.asarray(raw["z_hat"], dtype=float),
            loglik=float(raw["loglik"]),
            convergence=Convergence(
                bool(conv.get("converged", False)),
                int(conv.get("rounds", 0)),
                int(conv.get("evaluations", 0)),
                str(conv.get("message", "")),
                float(conv.get("seconds", 0.0)),
            ),
            trace=tuple((int(r), tuple(map(float, t)), float(ll)) for r, t, ll in raw.get("trace", [])),
        )


# -----------------------
# Exact evaluation
# -----------------------

@dataclass
class _BlockResult:
    loglik: float
    mean: np.ndarray
    factor: Optional[CholeskyFactor]


def _noise(model: LinearGaussianModel, theta: np.ndarray) -> float:
    s2 = float(model.noise_variance(theta))
    if not (s2 > 0 and math.isfinite(s2)):
        raise NotPositiveDefinite(message=f"noise variance must be positive, got {s2}")
    return s2


def _evaluate_block(part: _BlockPart, Qp: sparse.spmatrix, prior_logdet: float, s2: float, r: np.ndarray) -> _BlockResult:
    n_b = len(r)
    if part.cols.size == 0:
        return _BlockResult(-0.5 * (n_b * (LOG_2PI + math.log(s2)) + r @ r / s2), np.zeros(0), None)
    Qpost = sparse.csc_matrix(Qp) + part.BtB / s2
    factor = factorize(Qpost)
    b = part.Bt @ r / s2
    mean = factor.solve(b)
    loglik = -0.5 * (n_b * (LOG_2PI + math.log(s2)) + r @ r / s2 - b @ mean)
    loglik += 0.5 * (prior_logdet - factor.logdet())
    return _BlockResult(loglik, mean, factor)


def _prior_logdets(priors: Sequence[sparse.spmatrix]) -> List[float]:
    # the GMRF hands out one shared object per day; factor it once
    cache: Dict[int, float] = {}
    out = []
    for Qp in priors:
        key = id(Qp)
        if key not in cache:
            cache[key] = factorize(Qp).logdet() if Qp.shape[0] else 0.0
        out.append(cache[key])
    return out


def _evaluate(
    model: LinearGaussianModel, theta: np.ndarray, beta: np.ndarray, n_jobs: Optional[int] = None
) -> Tuple[float, List[_BlockResult]]:
    theta = np.asarray(theta, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (model.p,):
        raise DimensionMismatch(f"beta has shape {beta.shape}, expected ({model.p},)")
    s2 = _noise(model, theta)
    priors = list(model.prior_blocks(theta))
    if len(priors) != len(model.parts):
        raise DimensionMismatch(f"{len(priors)} prior blocks for {len(model.parts)} latent blocks")
    logdets = _prior_logdets(priors)
    resid = model.y - model.X @ beta

    jobs = n_jobs if n_jobs is not None else thread_count()
    tasks = (
        delayed(_evaluate_block)(part, Qp, ld, s2, resid[part.rows])
        for part, Qp, ld in zip(model.parts, priors, logdets)
    )
    if jobs > 1 and len(model.parts) > 1:
        results = Parallel(n_jobs=jobs, prefer="threads")(tasks)
    else:
        results = [fn(*args, **kwargs) for fn, args, kwargs in tasks]

    loglik = float(sum(r.loglik for r in results))
    free = resid[model.free_rows]
    if free.size:
        loglik += -0.5 * (free.size * (LOG_2PI + math.log(s2)) + free @ free / s2)
    return loglik, results


def marginal_loglik(
    model: LinearGaussianModel, theta: np.ndarray, beta: np.ndarray, n_jobs: Optional[int] = None
) -> float:
    """log ∫ N(y | Xβ + Bz, σ²_ε I) N(z | 0, Qprior⁻¹) dz, exactly."""
    return _evaluate(model, theta, beta, n_jobs)[0]


def posterior_mean(
    model: LinearGaussianModel, theta: np.ndarray, beta: np.ndarray, n_jobs: Optional[int] = None
) -> np.ndarray:
    """z_hat = Q_post⁻¹ Bᵀ (y − Xβ) / σ²_ε."""
    _, results = _evaluate(model, theta, beta, n_jobs)
    z = np.zeros(model.q)
    for part, res in zip(model.parts, results):
        z[part.cols] = res.mean
    return z


def gls_beta(model: LinearGaussianModel, theta: np.ndarray) -> np.ndarray:
    """Generalized least squares β given θ, using V⁻¹ = (I − B Q_post⁻¹ Bᵀ/σ²)/σ² per block."""
    if model.p == 0:
        return np.zeros(0)
    theta = np.asarray(theta, dtype=float)
    s2 = _noise(model, theta)
    priors = model.prior_blocks(theta)
    XtVX = np.zeros((model.p, model.p))
    XtVy = np.zeros(model.p)
    covered = np.zeros(model.n, dtype=bool)
    for part, Qp in zip(model.parts, priors):
        Xb, yb = model.X[part.rows], model.y[part.rows]
        covered[part.rows] = True
        XtVX += Xb.T @ Xb / s2
        XtVy += Xb.T @ yb / s2
        if part.cols.size == 0:
            continue
        factor = factorize(sparse.csc_matrix(Qp) + part.BtB / s2)
        BtX = part.Bt @ Xb
        Bty = part.Bt @ yb
        sol = factor.solve(np.column_stack([BtX, Bty]))
        XtVX -= BtX.T @ sol[:, :-1] / s2 ** 2
        XtVy -= BtX.T @ sol[:, -1] / s2 ** 2
    free = ~covered
    if free.any():
        XtVX += model.X[free].T @ model.X[free] / s2
        XtVy += model.X[free].T @ model.y[free] / s2
    return np.linalg.lstsq(XtVX, XtVy, rcond=None)[0]


# -----------------------
# Hyperparameter search
# -----------------------

def fit(
    model: LinearGaussianModel,
    theta0: Sequence[float],
    bounds: Sequence[Tuple[float, float]],
    free: Optional[Sequence[bool]] = None,
    max_rounds: int = 200,
    tol: float = 1e-6,
    restart: bool = True,
    n_jobs: Optional[int] = None,
    max_evals: Optional[int] = None,
) -> FitResult:
    """Maximum marginal likelihood by alternating a GLS β step with Nelder–Mead on log θ.

    ``tol`` is relative to the starting log-likelihood. Each Nelder–Mead search is
    capped at ``max_evals`` evaluations (100 per free parameter by default); a fit
    whose last search hit that cap is reported as not converged.
    """
    started = time.perf_counter()
    theta0 = np.asarray(theta0, dtype=float)
    lower = np.array([b[0] for b in bounds], dtype=float)
    upper = np.array([b[1] for b in bounds], dtype=float)
    if theta0.shape != lower.shape:
        raise DimensionMismatch(f"theta0 has {theta0.size} entries, bounds {lower.size}")
    if np.any(theta0 < lower) or np.any(theta0 > upper) or np.any(lower <= 0):
        raise ValueError("theta0 must lie inside positive bounds")
    mask = np.ones(theta0.size, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    if max_evals is None:
        max_evals = EVALS_PER_PARAMETER * max(int(mask.sum()), 1)

    evaluations = 0

    def assemble(log_free: np.ndarray) -> np.ndarray:
        theta = theta0.copy()
        theta[mask] = np.exp(log_free)
        return theta

    def loglik_at(theta: np.ndarray, beta: np.ndarray) -> float:
        nonlocal evaluations
        evaluations += 1
        try:
            return marginal_loglik(model, theta, beta, n_jobs)
        except NotPositiveDefinite:
            return -math.inf

    beta = gls_beta(model, theta0)
    ll0 = loglik_at(theta0, beta)
    if not math.isfinite(ll0):
        raise NonFinite(f"log-likelihood is {ll0} at theta0 = {theta0.tolist()}")
    ftol = tol * max(1.0, abs(ll0))

    best_theta, best_beta, best_ll = theta0, beta, ll0
    trace = [(0, tuple(map(float, theta0)), ll0)]
    log_bounds = list(zip(np.log(lower[mask]), np.log(upper[mask])))
    theta, prev = theta0, ll0
    converged, rounds, message = not mask.any(), 0, ""
    search_ok, search_message = True, ""

    def search(start_theta: np.ndarray, beta: np.ndarray) -> Tuple[np.ndarray, bool, str]:
        objective = lambda x: -_finite_or_inf(loglik_at(assemble(x), beta))
        result = minimize(
            objective,
            np.log(start_theta[mask]),
            method="Nelder-Mead",
            bounds=log_bounds,
            options={"xatol": XATOL, "fatol": ftol, "maxfev": max_evals, "maxiter": max_evals},
        )
        logger.debug("Nelder-Mead: %d iterations, %d evaluations, %s", result.nit, result.nfev, result.message)
        return assemble(result.x), bool(result.success), str(result.message)

    while mask.any() and rounds < max_rounds:
        rounds += 1
        theta, search_ok, search_message = search(theta, beta)
        beta = gls_beta(model, theta)
        ll = loglik_at(theta, beta)
        trace.append((rounds, tuple(map(float, theta)), ll))
        logger.debug("Round %d: loglik %.6f theta %s", rounds, ll, np.round(theta, 6).tolist())
        if ll > best_ll:
            best_theta, best_beta, best_ll = theta, beta, ll
        if ll - prev < ftol:
            converged = True
            break
        prev = ll

    if mask.any() and restart:
        theta, restart_ok, restart_message = search(best_theta, best_beta)
        beta = gls_beta(model, theta)
        ll = loglik_at(theta, beta)
        trace.append((rounds + 1, tuple(map(float, theta)), ll))
        if ll > best_ll:
            converged = converged and ll - best_ll < ftol
            best_theta, best_beta, best_ll = theta, beta, ll
            search_ok, search_message = restart_ok, restart_message

    if mask.any() and not search_ok:
        converged = False
        message = f"last Nelder-Mead search stopped early: {search_message}"
    elif not converged:
        message = f"no convergence within {max_rounds} rounds"
    elapsed = time.perf_counter() - started
    if not converged:
        logger.warning("Fit did not converge: %s (loglik %.4f, %.1f s)", message, best_ll, elapsed)
    else:
        logger.info(
            "Fit converged in %d rounds, %d evaluations, %.1f s, loglik %.4f", rounds, evaluations, elapsed, best_ll
        )

    z_hat = posterior_mean(model, best_theta, best_beta, n_jobs)
    return FitResult(
        theta_names=tuple(model.theta_names),
        theta_hat=np.asarray(best_theta, dtype=float),
        beta_hat=np.asarray(best_beta, dtype=float),
        z_hat=z_hat,
        loglik=float(best_ll),
        convergence=Convergence(converged, rounds, evaluations, message, round(elapsed, 3)),
        trace=tuple(trace),
    )


def _finite_or_inf(value: float) -> float:
    return value if math.isfinite(value) else -math.inf
