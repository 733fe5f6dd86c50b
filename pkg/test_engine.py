from dataclasses import replace
import os
import sys

import numpy as np
import pytest
from scipy import sparse
from scipy.stats import multivariate_normal

sys.path.append(os.path.join(os.path.dirname(__file__), "src"))

from engine import FitResult, LatentBlock, LinearGaussianModel, fit, gls_beta, marginal_loglik, posterior_mean
from errors import DimensionMismatch, NotPositiveDefinite


def _spd_block(q, rng):
    main = 2.0 + rng.random(q)
    off = -0.5 * rng.random(q - 1)
    return sparse.diags([off, main, off], [-1, 0, 1], format="csc")


def _toy(seed, n_blocks=3, rows_per_block=12, cols_per_block=5, free_rows=4, p=2):
    """Block-structured model with dense oracle pieces."""
    rng = np.random.default_rng(seed)
    n = n_blocks * rows_per_block + free_rows
    q = n_blocks * cols_per_block
    B = np.zeros((n, q))
    blocks, priors = [], []
    for k in range(n_blocks):
        rows = np.arange(k * rows_per_block, (k + 1) * rows_per_block)
        cols = np.arange(k * cols_per_block, (k + 1) * cols_per_block)
        B[np.ix_(rows, cols)] = rng.standard_normal((rows_per_block, cols_per_block)) * (rng.random((rows_per_block, cols_per_block)) < 0.6)
        blocks.append(LatentBlock(rows, cols))
        priors.append(_spd_block(cols_per_block, rng))
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    y = rng.standard_normal(n) * 2.0 + 1.0

    def prior_blocks(theta):
        return [theta[0] * Q for Q in priors]

    model = LinearGaussianModel(
        y=y, X=X, B=sparse.csr_matrix(B), prior_blocks=prior_blocks,
        noise_variance=lambda theta: theta[1], theta_names=("scale", "sigma2_eps"), blocks=tuple(blocks),
    )
    return model


def _dense(model, theta):
    Qp = model.prior_precision(theta).toarray()
    B = model.B.toarray()
    s2 = model.noise_variance(theta)
    V = B @ np.linalg.solve(Qp, B.T) + s2 * np.eye(model.n)
    return Qp, B, s2, V


# -----------------------
# Exact evaluation
# -----------------------

@pytest.mark.parametrize("seed", range(10))
def test_loglik_and_posterior_match_dense_oracle(seed):
    model = _toy(seed)
    theta = np.array([0.5 + seed * 0.2, 0.3 + 0.1 * seed])
    beta = np.array([0.7, -0.4])
    Qp, B, s2, V = _dense(model, theta)
    r = model.y - model.X @ beta

    expected = multivariate_normal(mean=model.X @ beta, cov=V).logpdf(model.y)
    assert marginal_loglik(model, theta, beta) == pytest.approx(expected, rel=1e-8)

    z_dense = np.linalg.solve(Qp + B.T @ B / s2, B.T @ r / s2)
    np.testing.assert_allclose(posterior_mean(model, theta, beta), z_dense, rtol=1e-8, atol=1e-10)


def test_gls_beta_matches_dense_gls():
    model = _toy(42)
    theta = np.array([1.3, 0.8])
    _, _, _, V = _dense(model, theta)
    Vi = np.linalg.inv(V)
    expected = np.linalg.solve(model.X.T @ Vi @ model.X, model.X.T @ Vi @ model.y)
    np.testing.assert_allclose(gls_beta(model, theta), expected, rtol=1e-8)


def test_no_latents_is_iid_normal():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(20)
    X = np.ones((20, 1))
    model = LinearGaussianModel(
        y=y, X=X, B=sparse.csr_matrix((20, 0)),
        prior_blocks=lambda theta: [sparse.csc_matrix((0, 0))],
        noise_variance=lambda theta: theta[0], theta_names=("sigma2_eps",),
    )
    expected = multivariate_normal(mean=np.full(20, 0.5), cov=2.0 * np.eye(20)).logpdf(y)
    assert marginal_loglik(model, [2.0], [0.5]) == pytest.approx(expected, rel=1e-10)
    assert gls_beta(model, [2.0])[0] == pytest.approx(y.mean())


def test_threaded_evaluation_matches_serial():
    model = _toy(7, n_blocks=6)
    theta, beta = np.array([0.9, 0.4]), np.array([0.1, 0.2])
    assert marginal_loglik(model, theta, beta, n_jobs=3) == pytest.approx(marginal_loglik(model, theta, beta, n_jobs=1), rel=1e-12)


def _single_latent(y):
    return LinearGaussianModel(
        y=np.array([y]), X=np.zeros((1, 0)), B=sparse.csr_matrix([[1.0]]),
        prior_blocks=lambda theta: [sparse.csc_matrix([[1.0]])],
        noise_variance=lambda theta: theta[0], theta_names=("sigma2_eps",),
    )


def test_single_observation_closed_forms():
    assert marginal_loglik(_single_latent(0.0), [1.0], []) == pytest.approx(-0.5 * np.log(4 * np.pi), abs=1e-12)
    assert marginal_loglik(_single_latent(0.0), [1.0], []) == pytest.approx(-1.26551, abs=1e-5)
    assert marginal_loglik(_single_latent(2.0), [1.0], []) == pytest.approx(-2.26551, abs=1e-5)
    np.testing.assert_allclose(posterior_mean(_single_latent(2.0), [1.0], []), [1.0])


def test_block_sum_equals_joint_evaluation():
    model = _toy(11, n_blocks=5)
    joint = replace(
        model,
        prior_blocks=lambda theta: [sparse.block_diag(model.prior_blocks(theta), format="csc")],
        blocks=(),
    )
    theta, beta = np.array([0.8, 0.6]), np.array([0.3, -0.2])
    assert len(model.parts) == 5 and len(joint.parts) == 1
    assert marginal_loglik(model, theta, beta) == pytest.approx(marginal_loglik(joint, theta, beta), rel=1e-9)
    np.testing.assert_allclose(posterior_mean(model, theta, beta), posterior_mean(joint, theta, beta), rtol=1e-9, atol=1e-12)


def test_posterior_mean_is_linear_in_y():
    model = _toy(12)
    rng = np.random.default_rng(12)
    y1, y2 = rng.standard_normal(model.n), rng.standard_normal(model.n)
    theta, beta, a = np.array([1.1, 0.5]), np.array([0.4, 0.1]), 0.3
    mixed = posterior_mean(replace(model, y=a * y1 + (1 - a) * y2), theta, beta)
    z1 = posterior_mean(replace(model, y=y1), theta, beta)
    z2 = posterior_mean(replace(model, y=y2), theta, beta)
    np.testing.assert_allclose(mixed, a * z1 + (1 - a) * z2, rtol=1e-9, atol=1e-12)


def test_loglik_falls_as_residual_leaves_the_design_span():
    model = _toy(13)
    rng = np.random.default_rng(13)
    theta, beta = np.array([0.7, 0.9]), np.array([1.0, -0.5])
    span, _ = np.linalg.qr(np.column_stack([model.X, model.B.toarray()]))
    v = rng.standard_normal(model.n)
    u = v - span @ (span.T @ v)
    u /= np.linalg.norm(u)
    base = model.X @ beta + model.B @ rng.standard_normal(model.q)
    lls = [marginal_loglik(replace(model, y=base + t * u), theta, beta) for t in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert np.all(np.diff(lls) < 0)


def test_bad_inputs():
    model = _toy(1)
    with pytest.raises(NotPositiveDefinite):
        marginal_loglik(model, [1.0, -1.0], [0.0, 0.0])
    with pytest.raises(DimensionMismatch):
        marginal_loglik(model, [1.0, 1.0], [0.0])
    with pytest.raises(DimensionMismatch):
        LinearGaussianModel(
            y=np.zeros(3), X=np.zeros((2, 1)), B=sparse.csr_matrix((3, 0)),
            prior_blocks=lambda t: [], noise_variance=lambda t: 1.0, theta_names=(),
        )


# -----------------------
# Fitting
# -----------------------

def _random_intercepts(seed, groups=15, per_group=8, tau2=2.0, s2=0.5):
    rng = np.random.default_rng(seed)
    n = groups * per_group
    g = np.repeat(np.arange(groups), per_group)
    y = 3.0 + rng.normal(0.0, np.sqrt(tau2), groups)[g] + rng.normal(0.0, np.sqrt(s2), n)
    B = sparse.csr_matrix((np.ones(n), (np.arange(n), g)), shape=(n, groups))
    blocks = tuple(LatentBlock(np.flatnonzero(g == k), np.array([k])) for k in range(groups))
    return LinearGaussianModel(
        y=y, X=np.ones((n, 1)), B=B,
        prior_blocks=lambda theta: [sparse.csc_matrix([[1.0 / theta[0]]])] * groups,
        noise_variance=lambda theta: theta[1], theta_names=("sigma2_g", "sigma2_eps"), blocks=blocks,
    )


def test_fit_improves_and_stays_in_bounds():
    model = _random_intercepts(3)
    theta0 = [1.0, 1.0]
    bounds = [(1e-4, 1e3), (1e-4, 1e3)]
    result = fit(model, theta0, bounds, max_rounds=20)
    start = marginal_loglik(model, theta0, gls_beta(model, theta0))
    assert result.loglik >= start
    assert all(lo <= t <= hi for t, (lo, hi) in zip(result.theta_hat, bounds))
    assert result.trace[0][0] == 0
    assert result.z_hat.shape == (model.q,)
    assert result.theta_hat[1] == pytest.approx(0.5, rel=0.5)
    assert result.loglik == pytest.approx(marginal_loglik(model, result.theta_hat, result.beta_hat), rel=1e-10)


def test_fit_with_fixed_component():
    model = _random_intercepts(4)
    result = fit(model, [2.0, 1.0], [(1e-4, 1e3), (1e-4, 1e3)], free=[False, True], max_rounds=10)
    assert result.theta_hat[0] == 2.0


def test_fit_reports_a_search_that_ran_out_of_evaluations():
    model = _random_intercepts(6)
    result = fit(model, [1.0, 1.0], [(1e-4, 1e3), (1e-4, 1e3)], max_rounds=3, max_evals=3)
    assert not result.convergence.converged
    assert "stopped early" in result.convergence.message
    assert result.convergence.seconds >= 0.0

    relaxed = fit(model, [1.0, 1.0], [(1e-4, 1e3), (1e-4, 1e3)], max_rounds=20)
    assert relaxed.convergence.converged
    assert relaxed.convergence.message == ""


def test_noise_only_fit_recovers_sample_variance():
    y = np.random.default_rng(14).normal(2.0, 1.5, 200)
    model = LinearGaussianModel(
        y=y, X=np.ones((200, 1)), B=sparse.csr_matrix((200, 0)),
        prior_blocks=lambda theta: [sparse.csc_matrix((0, 0))],
        noise_variance=lambda theta: theta[0], theta_names=("sigma2_eps",),
    )
    result = fit(model, [1.0], [(1e-4, 1e3)], max_rounds=20)
    assert result.convergence.converged
    assert result.theta_hat[0] == pytest.approx(np.var(y), rel=0.10)
    assert result.beta_hat[0] == pytest.approx(y.mean(), rel=1e-8)


def test_fit_result_serialization():
    model = _random_intercepts(5, groups=4)
    result = fit(model, [1.0, 1.0], [(1e-3, 1e2), (1e-3, 1e2)], max_rounds=5)
    back = FitResult.from_dict(result.to_dict())
    assert back.theta == result.theta
    np.testing.assert_array_equal(back.z_hat, result.z_hat)
    assert back.convergence == result.convergence
    assert len(back.trace) == len(result.trace)
