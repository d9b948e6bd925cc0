import math

import numpy as np
import pytest

from lfmtwin.bnn import (
    BnnModel,
    BnnTopology,
    MapDataset,
    OutputScaling,
    TrainConfig,
    VariationalParams,
    bank_moments,
    elbo_minibatch,
    forward,
    kl_divergence,
    posterior_predictive,
    predictive_moments,
    train,
)


def test_output_node_count():
    assert BnnTopology(2, n_out=1).layer_sizes[-1] == 2
    assert BnnTopology(6, n_out=3).layer_sizes[-1] == 9


def test_zero_weights_forward():
    topo = BnnTopology(2, (5, 3), n_out=2)
    mean, L = forward(topo, np.zeros(topo.n_params), np.array([0.7, -3.0]))
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_allclose(np.diag(L), math.log(2.0), rtol=1e-15)
    assert L[0, 1] == 0.0


def test_covariance_pd_for_random_weights():
    topo = BnnTopology(3, (8,), "tanh", n_out=3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 3))
    worst = np.inf
    for _ in range(1000):
        _, L = forward(topo, rng.standard_normal(topo.n_params) * 2, x)
        # eigenvalues of L L^T are the squared singular values of L; computing
        # them from L avoids the cancellation of forming the product first
        worst = min(worst, (np.linalg.svd(L, compute_uv=False) ** 2).min())
    assert worst > 0


def test_kl_closed_form_cases():
    assert kl_divergence(VariationalParams(np.zeros(5), np.full(5, math.log(math.e - 1)))) == pytest.approx(0.0, abs=1e-15)
    assert kl_divergence(VariationalParams([1.0], [math.log(math.e - 1)])) == pytest.approx(0.5)


def test_kl_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(100):
        vp = VariationalParams(rng.standard_normal(10), rng.standard_normal(10) * 2)
        assert kl_divergence(vp) > 0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(1)
    mu = np.array([0.3, -0.8, 1.2])
    sig = np.array([0.5, 1.3, 0.9])
    vp = VariationalParams(mu, np.log(np.expm1(sig)))
    w = mu + sig * rng.standard_normal((1_000_000, 3))
    log_q = -0.5 * ((w - mu) / sig) ** 2 - np.log(sig) - 0.5 * math.log(2 * math.pi)
    log_p = -0.5 * w**2 - 0.5 * math.log(2 * math.pi)
    assert kl_divergence(vp) == pytest.approx((log_q - log_p).sum(axis=1).mean(), abs=1e-2)


def test_perfect_fit_data_term():
    # one-layer net whose output exactly equals the target with unit covariance
    topo = BnnTopology(1, (1,), "relu", n_out=1)
    # hidden: relu(1*x + 0); output: mean = 1*h, chol raw = c with softplus(c) = 1
    c = math.log(math.e - 1)
    mu = np.array([1.0, 0.0, 1.0, 0.0, 0.0, c])
    vp = VariationalParams(mu, np.full(6, -200.0))  # sigma ~ 0
    x = np.array([[0.5], [1.5], [2.0]])
    loss = elbo_minibatch(vp, topo, x, x, 3, seed=0, kl_weight=0.0, return_grad=False)
    assert loss == pytest.approx(0.5 * math.log(2 * math.pi), rel=1e-12)


@pytest.mark.parametrize("cfg", [
    (1, (2,), "relu", 1),
    (2, (3, 2), "tanh", 2),
    (3, (4,), "tanh", 3),
])
def test_gradient_matches_finite_differences(cfg):
    d, hidden, act, n_out = cfg
    topo = BnnTopology(d, hidden, act, n_out)
    rng = np.random.default_rng(sum(hidden) + n_out)
    vp = VariationalParams(rng.standard_normal(topo.n_params) * 0.7, rng.standard_normal(topo.n_params) - 1.0)
    x = rng.standard_normal((5, d))
    eta = rng.standard_normal((5, n_out))
    scaling = OutputScaling(np.zeros(d), np.ones(d), rng.standard_normal(n_out), rng.uniform(0.5, 2.0, n_out))
    eps = rng.standard_normal((3, topo.n_params))
    kw = dict(kl_weight=0.3, scaling=scaling, eps=eps)
    _, g_mu, g_rho = elbo_minibatch(vp, topo, x, eta, 3, **kw)
    h = 1e-5

    def f(mu, rho):
        return elbo_minibatch(VariationalParams(mu, rho), topo, x, eta, 3, return_grad=False, **kw)

    for grad, which in ((g_mu, 0), (g_rho, 1)):
        num = np.zeros_like(grad)
        for j in range(grad.size):
            e = np.zeros_like(grad)
            e[j] = h
            if which == 0:
                num[j] = (f(vp.mu + e, vp.rho) - f(vp.mu - e, vp.rho)) / (2 * h)
            else:
                num[j] = (f(vp.mu, vp.rho + e) - f(vp.mu, vp.rho - e)) / (2 * h)
        scale = np.maximum(np.abs(num), 1e-6)
        # parameters feeding a dead ReLU unit have zero gradient on both sides
        assert np.all(np.abs(grad - num) <= 1e-3 * scale + 1e-9)


def test_collapsed_posterior_predictive():
    topo = BnnTopology(2, (6,), n_out=2)
    rng = np.random.default_rng(4)
    mu = rng.standard_normal(topo.n_params)
    vp = VariationalParams(mu, np.full(topo.n_params, -800.0))  # softplus underflows to 0
    assert np.all(vp.sigma == 0.0)
    x = np.array([0.4, -1.1])
    pred = posterior_predictive(vp, topo, x, S=16, seed=0)
    m, L = forward(topo, mu, x)
    np.testing.assert_allclose(pred.mean, m, rtol=1e-14)
    np.testing.assert_allclose(pred.cov, L @ L.T, rtol=1e-14)


def test_moment_matching_matches_mixture_sampling():
    topo = BnnTopology(2, (8,), "tanh", n_out=2)
    rng = np.random.default_rng(5)
    vp = VariationalParams(rng.standard_normal(topo.n_params) * 0.5, np.full(topo.n_params, math.log(math.expm1(0.3))))
    x = np.array([[0.2, -0.4]])
    S = 32
    bank = vp.mu + vp.sigma * np.random.default_rng(9).standard_normal((S, topo.n_params))
    mbar, cbar = predictive_moments(vp, topo, x, bank=bank)
    # sample the S-component mixture directly
    mus, Ls = [], []
    for w in bank:
        m, L = forward(topo, w, x[0])
        mus.append(m)
        Ls.append(L)
    comp = rng.integers(S, size=100_000)
    z = rng.standard_normal((100_000, 2))
    draws = np.array(mus)[comp] + np.einsum("kij,kj->ki", np.array(Ls)[comp], z)
    np.testing.assert_allclose(mbar[0], draws.mean(axis=0), rtol=0.03, atol=0.03 * np.sqrt(np.diag(cbar[0])).max())
    np.testing.assert_allclose(cbar[0], np.cov(draws.T), rtol=0.03, atol=0.03 * np.abs(cbar[0]).max())


def test_total_covariance_decomposition():
    topo = BnnTopology(3, (5,), n_out=2)
    rng = np.random.default_rng(6)
    vp = VariationalParams(rng.standard_normal(topo.n_params), rng.standard_normal(topo.n_params) - 2)
    X = rng.standard_normal((7, 3))
    mbar, total, within, between = predictive_moments(vp, topo, X, S=20, seed=1, return_parts=True)
    np.testing.assert_allclose(total, within + between, atol=1e-12)
    for b in range(7):
        assert np.linalg.eigvalsh(total[b] - within[b]).min() >= -1e-12


def test_numba_kernel_matches_numpy():
    topo = BnnTopology(4, (7, 5), "relu", n_out=2)
    rng = np.random.default_rng(7)
    vp = VariationalParams(rng.standard_normal(topo.n_params) * 0.5, rng.standard_normal(topo.n_params) - 2)
    scaling = OutputScaling(rng.standard_normal(4), rng.uniform(0.5, 2, 4), rng.standard_normal(2), rng.uniform(0.5, 2, 2))
    model = BnnModel(topo, vp, scaling)
    bank = model.weight_bank(16, seed=3)
    x = rng.standard_normal(4)
    m_ref, c_ref = predictive_moments(vp, topo, x[None], scaling=scaling, bank=bank)
    sizes, act, in_shift, in_scale, out_shift, out_scale = model.kernel_args()
    m, c = np.zeros(2), np.zeros((2, 2))
    bank_moments(bank, sizes, act, (x - in_shift) / in_scale, out_shift, out_scale, 2, m, c)
    np.testing.assert_allclose(m, m_ref[0], rtol=1e-12)
    np.testing.assert_allclose(c, c_ref[0], rtol=1e-10)


def test_normalization_roundtrip():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((100, 2)) * [1e-3, 50.0] + [0.5, -7.0]
    ds = MapDataset.from_samples(x, rng.standard_normal(100))
    back = ds.scaling.denormalize(ds.scaling.normalize(x))
    assert np.all(np.abs(back - x) <= 10 * np.finfo(float).eps * np.abs(x).max(axis=0))


def test_save_load_roundtrip(tmp_path):
    topo = BnnTopology(2, (4,), n_out=1)
    rng = np.random.default_rng(0)
    model = BnnModel(topo, VariationalParams.initialize(topo, 1), OutputScaling(rng.random(2), rng.random(2) + 1, [0.5], [2.0]))
    model.save(tmp_path / "m.json")
    again = BnnModel.load(tmp_path / "m.json")
    assert np.array_equal(again.params.mu, model.params.mu)
    assert np.array_equal(again.params.rho, model.params.rho)
    x = np.array([[0.3, 0.1]])
    np.testing.assert_array_equal(again.predict(x, 8, 2)[1], model.predict(x, 8, 2)[1])


def test_linear_recovery():
    rng = np.random.default_rng(10)
    x = rng.uniform(-1, 1, (4000, 1))
    eta = 2 * x[:, 0] + 0.1 * rng.standard_normal(4000)
    ds = MapDataset.from_samples(x, eta)
    model, res = BnnModel.fit(ds, BnnTopology(1, n_out=1), TrainConfig(max_epochs=300, seed=1))
    grid = np.linspace(-0.8, 0.8, 9)[:, None]
    m, c = model.predict(grid, S=64, seed=0)
    slope = np.polyfit(grid[:, 0], m[:, 0], 1)[0]
    assert 1.8 <= slope <= 2.2
    std = np.sqrt(c[:, 0, 0])
    assert np.all((std >= 0.05) & (std <= 0.2))


def test_heteroskedastic_recovery():
    rng = np.random.default_rng(11)
    x = rng.uniform(-1.5, 1.5, (6000, 1))
    eta = x[:, 0] ** 3 + (0.1 + np.abs(x[:, 0])) * rng.standard_normal(6000)
    ds = MapDataset.from_samples(x, eta)
    model, _ = BnnModel.fit(ds, BnnTopology(1, n_out=1), TrainConfig(max_epochs=300, seed=2))
    _, c = model.predict(np.array([[0.0], [1.0]]), S=64, seed=0)
    s0, s1 = np.sqrt(c[:, 0, 0])
    assert s1 >= 2 * s0


def test_training_curve_decreases():
    rng = np.random.default_rng(12)
    x = rng.uniform(-1, 1, (2000, 1))
    eta = 3 * x[:, 0] ** 3 + 0.05 * rng.standard_normal(2000)
    ds = MapDataset.from_samples(x, eta)
    res = train(ds, BnnTopology(1, n_out=1), TrainConfig(max_epochs=60, epsilon=0.0, seed=3))
    ma = np.convolve(res.loss_trace, np.ones(10) / 10, mode="valid")
    assert ma[-1] < ma[0]
    assert np.all(np.diff(ma[:50]) < 0.05 * np.abs(ma[0]))
    assert res.epochs == 60 and not res.converged


def test_nonfinite_target_rejected():
    with pytest.raises(ValueError):
        MapDataset.from_samples(np.zeros((3, 1)), [0.0, np.nan, 1.0])
