import math
import os
import sys

import numpy as np
import pytest
from scipy import sparse

sys.path.append(os.path.join(os.path.dirname(__file__), "src"))

from errors import DimensionMismatch, NotPositiveDefinite
from matern import SpdeParams, spde_precision
from mesh import assemble_fem, grid_mesh
from sparse_linalg import factorize, from_coo_text, from_lower, logdet, lower, solve, to_coo_text


def _tridiagonal(m, seed=0):
    rng = np.random.default_rng(seed)
    main = 2.0 + rng.random(m)
    off = -0.5 * np.ones(m - 1)
    return sparse.diags([off, main, off], [-1, 0, 1], format="csc")


def test_two_by_two_factor_and_logdet():
    Q = sparse.csc_matrix(np.array([[4.0, 2.0], [2.0, 3.0]]))
    f = factorize(Q)
    assert logdet(f) == pytest.approx(math.log(8.0), rel=1e-12)
    L = f.L.toarray()
    Qp = Q.toarray()[np.ix_(f.order, f.order)]
    np.testing.assert_allclose(L @ L.T, Qp, atol=1e-12)
    assert np.allclose(np.triu(L, 1), 0.0)
    np.testing.assert_allclose(solve(f, np.array([6.0, 5.0])), [1.0, 1.0], atol=1e-12)


@pytest.mark.parametrize("ordering", ["natural", "mmd", "colamd"])
def test_matches_dense_algebra(ordering):
    Q = _tridiagonal(50, seed=3)
    f = factorize(Q, ordering=ordering)
    dense = Q.toarray()
    assert f.logdet() == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-10)
    b = np.random.default_rng(1).standard_normal((50, 3))
    np.testing.assert_allclose(f.solve(b), np.linalg.solve(dense, b), rtol=1e-9, atol=1e-12)


def test_indefinite_matrix_is_rejected():
    with pytest.raises(NotPositiveDefinite):
        factorize(sparse.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]])))


def test_zero_diagonal_reports_pivot():
    Q = sparse.diags([1.0, 0.0, 2.0], format="csc")
    with pytest.raises(NotPositiveDefinite) as info:
        factorize(Q)
    assert info.value.pivot == 1


def test_non_square_and_bad_rhs():
    with pytest.raises(DimensionMismatch):
        factorize(sparse.csc_matrix((2, 3)))
    f = factorize(sparse.identity(3, format="csc"))
    with pytest.raises(DimensionMismatch):
        f.solve(np.ones(4))


def test_solve_lt_on_identity_returns_input():
    f = factorize(sparse.identity(5, format="csc"))
    w = np.arange(5.0)
    np.testing.assert_allclose(f.solve_lt(w), w)


def test_solve_lt_gives_precision_draws():
    # x = L⁻ᵀ w implies xᵀ Q x = wᵀ w
    Q = _tridiagonal(30, seed=5)
    f = factorize(Q)
    w = np.random.default_rng(2).standard_normal(30)
    x = f.solve_lt(w)
    assert x @ (Q @ x) == pytest.approx(w @ w, rel=1e-10)


def test_empty_matrix():
    f = factorize(sparse.csc_matrix((0, 0)))
    assert f.m == 0 and f.logdet() == 0.0


def test_lower_storage_and_text_round_trip(tmp_path):
    Q = _tridiagonal(6, seed=9)
    L = lower(Q)
    assert sparse.triu(L, 1).nnz == 0
    np.testing.assert_allclose(from_lower(L).toarray(), Q.toarray())

    path = str(tmp_path / "q.mtx")
    to_coo_text(Q, path, comment="tridiagonal")
    np.testing.assert_allclose(from_coo_text(path).toarray(), Q.toarray())


def _random_spd(m, seed):
    rng = np.random.default_rng(seed)
    A = sparse.random(m, m, density=min(1.0, 4.0 / m), random_state=rng, format="csc")
    return sparse.csc_matrix(A @ A.T + sparse.identity(m))


@pytest.mark.parametrize("m", [100, 2000])
def test_solve_residual_on_random_sparse_matrices(m):
    Q = _random_spd(m, seed=m)
    b = np.random.default_rng(0).standard_normal(m)
    x = solve(factorize(Q), b)
    assert np.linalg.norm(Q @ x - b) / np.linalg.norm(b) <= 1e-8


def test_tridiagonal_natural_order_has_no_fill():
    m = 50
    f = factorize(_tridiagonal(m, seed=6), ordering="natural")
    np.testing.assert_array_equal(f.order, np.arange(m))
    L = f.L.toarray()
    assert np.count_nonzero(np.tril(L, -2)) == 0
    assert np.count_nonzero(L) == 2 * m - 1


def test_logdet_shift_from_doubling_tau():
    fem = assemble_fem(grid_mesh(0.0, 4.0, 0.0, 4.0, 10, 10))
    low = logdet(factorize(spde_precision(fem, SpdeParams(1.2, 0.7))))
    high = logdet(factorize(spde_precision(fem, SpdeParams(1.2, 1.4))))
    assert high - low == pytest.approx(fem.stiffness.shape[0] * math.log(4.0), abs=1e-10 * fem.stiffness.shape[0])
