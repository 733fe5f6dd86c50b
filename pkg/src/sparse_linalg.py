"""Sparse symmetric positive-definite factorization, solves and log-determinants.

SuperLU is run with diagonal pivoting only (``diag_pivot_thresh=0``) in symmetric
mode, so ``P Q Pᵀ = L D Lᵀ`` with the fill-reducing minimum-degree order ``P`` and
``L`` unit lower triangular. The Cholesky factor is ``L D^½``; any non-positive
``D`` entry means ``Q`` is not positive definite.
"""

from __future__ import annotations

from functools import cached_property
import logging
from typing import Union

import numpy as np
import scipy.io
from scipy import sparse
from scipy.sparse import linalg as splinalg

from errors import DimensionMismatch, NotPositiveDefinite
from export import atomic_open


logger = logging.getLogger(__name__)

# relative to the largest diagonal entry of the matrix being factorized
PIVOT_TOLERANCE = 1e-12

ORDERINGS = {
    "natural": "NATURAL",
    "mmd": "MMD_AT_PLUS_A",
    "colamd": "COLAMD",
}

ArrayLike = Union[np.ndarray, sparse.spmatrix]


class CholeskyFactor:
    """Immutable factor with ``Q[order][:, order] = L Lᵀ``."""

    def __init__(self, lu, order: np.ndarray, pivots: np.ndarray):
        self._lu = lu
        self.order = order
        self.pivots = pivots

    @property
    def m(self) -> int:
        return int(self.order.size)

    @cached_property
    def L(self) -> sparse.csc_matrix:
        if self.m == 0:
            return sparse.csc_matrix((0, 0))
        scale = sparse.diags(np.sqrt(self.pivots))
        return (self._lu.L @ scale).tocsc()

    def solve(self, b: ArrayLike) -> np.ndarray:
        if sparse.issparse(b):
            b = b.toarray()
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.m:
            raise DimensionMismatch(f"right-hand side has {b.shape[0]} rows, factor has {self.m}")
        if self.m == 0:
            return b.copy()
        return self._lu.solve(b)

    def logdet(self) -> float:
        return float(np.sum(np.log(self.pivots)))

    def solve_lt(self, w: np.ndarray) -> np.ndarray:
        """x with ``x[order] = L⁻ᵀ w[order]``; maps standard normals to draws with precision Q."""
        w = np.asarray(w, dtype=float)
        if w.shape[0] != self.m:
            raise DimensionMismatch(f"noise has {w.shape[0]} rows, factor has {self.m}")
        y = splinalg.spsolve_triangular(self.L.T.tocsr(), w[self.order], lower=False)
        x = np.empty_like(y)
        x[self.order] = y
        return x


def factorize(Q: ArrayLike, ordering: str = "mmd") -> CholeskyFactor:
    """Factorize a symmetric matrix given in full (not triangle-only) storage."""
    Q = sparse.csc_matrix(Q, dtype=float)
    m, n = Q.shape
    if m != n:
        raise DimensionMismatch(f"matrix must be square, got {Q.shape}")
    if m == 0:
        return CholeskyFactor(None, np.zeros(0, dtype=np.int64), np.zeros(0))
    if ordering not in ORDERINGS:
        raise ValueError(f"unknown ordering {ordering!r}; choose from {sorted(ORDERINGS)}")

    diag = Q.diagonal()
    threshold = PIVOT_TOLERANCE * max(float(np.max(np.abs(diag))), np.finfo(float).tiny)
    if np.any(diag <= threshold):
        raise NotPositiveDefinite(pivot=int(np.flatnonzero(diag <= threshold)[0]))

    lu = _splu(Q, ordering)
    if lu is None or not np.array_equal(lu.perm_r, lu.perm_c):
        # the ordering step may have broken the symmetric pivot sequence
        lu = _splu(Q, "natural")
        if lu is None or not np.array_equal(lu.perm_r, np.arange(m)):
            raise NotPositiveDefinite(message="zero pivot encountered")

    order = np.argsort(lu.perm_c)
    pivots = lu.U.diagonal()
    bad = np.flatnonzero(pivots <= threshold)
    if bad.size:
        raise NotPositiveDefinite(pivot=int(order[bad[0]]))
    return CholeskyFactor(lu, order, pivots)


def _splu(Q: sparse.csc_matrix, ordering: str):
    try:
        return splinalg.splu(
            Q,
            permc_spec=ORDERINGS[ordering],
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:
        logger.debug("SuperLU failed with %s ordering: %s", ordering, exc)
        return None


def solve(f: CholeskyFactor, b: ArrayLike) -> np.ndarray:
    return f.solve(b)


def logdet(f: CholeskyFactor) -> float:
    return f.logdet()


# -----------------------
# Storage helpers
# -----------------------

def lower(Q: ArrayLike) -> sparse.csc_matrix:
    """Lower-triangle storage of a symmetric matrix, sorted indices, no duplicates."""
    L = sparse.tril(sparse.csc_matrix(Q), format="csc")
    L.sum_duplicates()
    L.sort_indices()
    return L


def from_lower(L: ArrayLike) -> sparse.csc_matrix:
    L = sparse.csc_matrix(L)
    full = L + L.T - sparse.diags(L.diagonal())
    return full.tocsc()


def to_coo_text(Q: ArrayLike, path: str, symmetric: bool = True, comment: str = "") -> None:
    """Write a MatrixMarket coordinate file (1-based ``row col value`` lines)."""
    matrix = sparse.coo_matrix(lower(Q) if symmetric else Q)
    with atomic_open(path, "wb") as f:
        scipy.io.mmwrite(f, matrix, comment=comment, symmetry="symmetric" if symmetric else "general")


def from_coo_text(path: str) -> sparse.csc_matrix:
    return sparse.csc_matrix(scipy.io.mmread(path))
