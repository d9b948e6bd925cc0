import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.stats import multivariate_normal

from lfmtwin.diagnosis import (
    GplfmProblem,
    OptimizerConfig,
    StudentTPrior,
    log_prior,
    neg_log_posterior,
    optimize_hyperparams,
)
from lfmtwin.statespace import ContinuousSSM, GpHyperparams


def pure_gp_problem(y, dt, noise_var):
    """Latent channel observed directly: no structural states at all."""
    ssm = ContinuousSSM(
        a_c=np.zeros((0, 0)),
        b_pc=np.zeros((0, 1)),
        b_uc=np.zeros((0, 0)),
        b_gc=np.zeros((0, 1)),
        h=np.zeros((1, 0)),
        j_p=np.ones((1, 1)),
        j_u=np.zeros((1, 0)),
        meas_noise_cov=np.array([[noise_var]]),
    )
    return GplfmProblem(ssm, dt, np.asarray(y, float)[:, None])


def batch_gp_loglik(y, t, alpha, ell, noise_var):
    k = alpha * np.exp(-np.abs(t[:, None] - t[None, :]) / ell) + noise_var * np.eye(t.size)
    return multivariate_normal(np.zeros(t.size), k).logpdf(y)


def gp_sample(alpha, ell, dt, n, noise_var, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * dt
    k = alpha * np.exp(-np.abs(t[:, None] - t[None, :]) / ell)
    f = np.linalg.cholesky(k + 1e-12 * np.eye(n)) @ rng.standard_normal(n)
    return t, f + math.sqrt(noise_var) * rng.standard_normal(n)


def test_prior_defaults():
    from lfmtwin.diagnosis import DEFAULT_ALPHA_PRIOR, DEFAULT_ELL_PRIOR

    assert (DEFAULT_ALPHA_PRIOR.mean, DEFAULT_ALPHA_PRIOR.variance, DEFAULT_ALPHA_PRIOR.dof) == (0.0, 1.0, 1.0)
    assert (DEFAULT_ELL_PRIOR.mean, DEFAULT_ELL_PRIOR.variance, DEFAULT_ELL_PRIOR.dof) == (100.0, 10.0, 1.0)


@pytest.mark.parametrize("scale", [0.3, 1.0, 7.5])
def test_cauchy_density_at_location(scale):
    prior = StudentTPrior(0.0, scale**2, 1.0)
    assert prior.logpdf(0.0) == pytest.approx(-math.log(math.pi * scale), rel=1e-14)


def test_cauchy_tail_decay():
    prior = StudentTPrior(0.0, 1.0, 1.0)
    x = 1e6
    assert prior.logpdf(x) - prior.logpdf(2 * x) == pytest.approx(2 * math.log(2), rel=1e-9)


def test_log_prior_sums_channels():
    th = GpHyperparams([0.5, 2.0], [90.0, 101.0])
    a, l = StudentTPrior(0, 1, 1), StudentTPrior(100, 10, 1)
    expected = sum(a.logpdf(x) for x in th.alpha) + sum(l.logpdf(x) for x in th.ell)
    assert log_prior(th) == pytest.approx(expected, rel=1e-14)


def test_objective_matches_batch_gp():
    alpha, ell, noise, dt = 1.7, 0.4, 0.05, 0.1
    t, y = gp_sample(alpha, ell, dt, 30, noise, seed=3)
    prob = pure_gp_problem(y, dt, noise)
    th = GpHyperparams([alpha], [ell])
    expected = -(batch_gp_loglik(y, t, alpha, ell, noise) + log_prior(th))
    assert neg_log_posterior(th, prob) == pytest.approx(expected, abs=1e-5)


def test_objective_log_roundtrip_and_determinism():
    t, y = gp_sample(1.0, 0.5, 0.1, 40, 0.1, seed=4)
    prob = pure_gp_problem(y, 0.1, 0.1)
    th = GpHyperparams([0.8], [0.3])
    again = GpHyperparams.from_log(th.to_log())
    assert neg_log_posterior(th, prob) == neg_log_posterior(again, prob)


def test_filter_failure_is_infeasible():
    # a negative noise variance swamping the signal variance makes S indefinite
    prob = pure_gp_problem(np.ones(5), 0.1, -1.0)
    assert neg_log_posterior(GpHyperparams([1e-3], [1.0]), prob) == math.inf


def test_quadratic_minimizer_recovered():
    target = np.array([0.3, -1.2, 2.0, 0.7])

    def obj(th):
        return float(np.sum((th.to_log() - target) ** 2))

    res = optimize_hyperparams(obj, GpHyperparams([1.0, 1.0], [1.0, 1.0]), OptimizerConfig(restarts=2, xatol=1e-6, fatol=1e-12))
    np.testing.assert_allclose(res.theta.to_log(), target, atol=1e-4)
    assert np.all(np.diff(res.trace) <= 0)
    assert res.trace[-1] == pytest.approx(res.value)


def test_bounds_enforced():
    lo, hi = 1e-15, 1e15

    def obj(th):
        # pushes alpha to -inf and ell to +inf in log space
        return float(th.to_log()[0] - th.to_log()[1])

    res = optimize_hyperparams(obj, GpHyperparams([1.0], [1.0]), OptimizerConfig(restarts=1, initial_step=20.0))
    assert res.theta.alpha[0] >= lo * (1 - 1e-12)
    assert res.theta.ell[0] <= hi * (1 + 1e-12)
    assert res.theta.alpha[0] == pytest.approx(lo, rel=1e-6)
    assert res.theta.ell[0] == pytest.approx(hi, rel=1e-6)


def test_init_outside_bounds_rejected():
    with pytest.raises(ValueError):
        optimize_hyperparams(lambda th: 0.0, GpHyperparams([1e-20], [1.0]))


def test_ml_recovery_matches_batch_fit():
    alpha, ell, noise, dt = 2.0, 0.5, 0.1, 0.05
    t, y = gp_sample(alpha, ell, dt, 300, noise, seed=11)
    prob = pure_gp_problem(y, dt, noise)
    res = optimize_hyperparams(lambda th: -prob.log_likelihood(th), GpHyperparams([1.0], [1.0]), OptimizerConfig(restarts=2))

    batch = minimize(lambda v: -batch_gp_loglik(y, t, math.exp(v[0]), math.exp(v[1]), noise), [0.0, 0.0], method="Nelder-Mead",
                     options={"xatol": 1e-6, "fatol": 1e-9})
    a_ref, l_ref = np.exp(batch.x)
    assert res.theta.alpha[0] == pytest.approx(a_ref, rel=0.1)
    assert res.theta.ell[0] == pytest.approx(l_ref, rel=0.1)


def test_best_restart_wins():
    calls = []

    def obj(th):
        calls.append(1)
        x = th.to_log()
        # two basins; the deeper one is away from the initial point
        return float(min((x[0] - 1) ** 2 + (x[1] - 1) ** 2, (x[0] + 2) ** 2 + (x[1] + 2) ** 2 - 1.0))

    res = optimize_hyperparams(obj, GpHyperparams([math.e], [math.e]), OptimizerConfig(restarts=8, seed=1, alpha_range=(1e-3, 1.0), ell_range=(1e-3, 1.0), xatol=1e-5, fatol=1e-9))
    assert res.value == pytest.approx(-1.0, abs=1e-6)
    assert res.value == min(res.start_values)
    assert res.n_evaluations == len(calls)
