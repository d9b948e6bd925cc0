import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from lfmtwin.statespace import (
    AugmentedSSM,
    GpHyperparams,
    OutputSpec,
    PhysicalParams,
    augment_with_gp,
    build_nominal_ssm,
    chain_matrix,
    discretize,
    stationary_latent_cov,
)


def sdof():
    return PhysicalParams.shear_building([1.0], [100.0], [0.2])


def bare_aug(f_c, q_c):
    f_c = np.atleast_2d(np.asarray(f_c, float))
    d = f_c.shape[0]
    return AugmentedSSM(
        f_c=np.asarray(f_c, float),
        b_uc_a=np.zeros((d, 1)),
        b_gc_a=np.zeros((d, 1)),
        q_c=np.asarray(q_c, float),
        h_a=np.eye(d),
        j_u=np.zeros((d, 1)),
        meas_noise_cov=np.eye(d),
        n_struct=0,
    )


def random_stable(rng, d):
    a = rng.standard_normal((d, d))
    s = a - a.T
    b = rng.standard_normal((d, d)) * 0.5
    return s - (b @ b.T + 0.5 * np.eye(d))


def test_sdof_system_matrix():
    ssm = build_nominal_ssm(sdof(), OutputSpec.all_dofs(1), [[1.0]])
    np.testing.assert_allclose(ssm.a_c, [[0.0, 1.0], [-100.0, -0.2]])
    np.testing.assert_allclose(ssm.b_gc.ravel(), [0.0, -1.0])
    np.testing.assert_allclose(ssm.b_pc.ravel(), [0.0, -1.0])
    np.testing.assert_allclose(ssm.b_uc.ravel(), [0.0, 1.0])


def test_free_mass_identity_case():
    n = 2
    p = PhysicalParams(np.eye(n), np.zeros((n, n)), np.zeros((n, n)), np.eye(n), np.eye(n))
    ssm = build_nominal_ssm(p, OutputSpec.all_dofs(n, ("displacement",)), np.eye(n))
    expected = np.block([[np.zeros((n, n)), np.eye(n)], [np.zeros((n, n)), np.zeros((n, n))]])
    np.testing.assert_array_equal(ssm.a_c, expected)


def test_three_dof_chain_stiffness():
    # hand assembly: storey springs k1 (ground-1), k2 (1-2), k3 (2-3), all 100
    k_hand = np.array([[200.0, -100.0, 0.0], [-100.0, 200.0, -100.0], [0.0, -100.0, 100.0]])
    np.testing.assert_array_equal(chain_matrix([100.0, 100.0, 100.0]), k_hand)
    p = PhysicalParams.shear_building(np.ones(3), 100.0, 0.2)
    ssm = build_nominal_ssm(p, OutputSpec.all_dofs(3), np.eye(3))
    block = ssm.a_c[3:, :3]
    np.testing.assert_allclose(np.diag(block), [-200.0, -200.0, -100.0])
    np.testing.assert_allclose(block, -np.linalg.inv(np.eye(3)) @ k_hand)


def test_singular_mass_rejected():
    with pytest.raises(ValueError, match="mass"):
        PhysicalParams(np.zeros((1, 1)), np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)))


def test_selection_matrix_validation():
    with pytest.raises(ValueError):
        PhysicalParams(np.eye(2), np.zeros((2, 2)), np.eye(2), np.ones((2, 1)), np.eye(2))


def test_augment_unit_hyperparameters():
    ssm = build_nominal_ssm(sdof(), OutputSpec.all_dofs(1), [[1.0]])
    aug = augment_with_gp(ssm, GpHyperparams([1.0], [1.0]))
    assert aug.f_c[2, 2] == -1.0
    assert aug.q_c[2, 2] == 2.0
    np.testing.assert_array_equal(aug.f_c[2, :2], 0.0)
    np.testing.assert_array_equal(aug.q_c[:2, :2], 1e-14 * np.eye(2))


def test_augment_spectral_density():
    ssm = build_nominal_ssm(sdof(), OutputSpec.all_dofs(1), [[1.0]])
    aug = augment_with_gp(ssm, GpHyperparams([0.5], [0.1]))
    assert aug.q_c[2, 2] == pytest.approx(10.0)
    assert aug.f_c[2, 2] == pytest.approx(-10.0)


@pytest.mark.parametrize("alpha,ell", [(0.0, 1.0), (1.0, -1.0)])
def test_nonpositive_hyperparameters_rejected(alpha, ell):
    with pytest.raises(ValueError):
        GpHyperparams([alpha], [ell])


def test_zero_drift_discretization():
    q_c = np.diag([2.0, 3.0])
    disc = discretize(bare_aug(np.zeros((2, 2)), q_c), 0.3)
    np.testing.assert_allclose(disc.f_d, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(disc.q_d, q_c * 0.3, rtol=1e-13)


def test_scalar_ou_closed_form():
    a, sigma, dt = 3.0, 2.0, 0.1
    disc = discretize(bare_aug([[-a]], [[sigma]]), dt)
    assert disc.f_d[0, 0] == pytest.approx(np.exp(-a * dt), rel=1e-13)
    assert disc.q_d[0, 0] == pytest.approx(sigma * (1 - np.exp(-2 * a * dt)) / (2 * a), rel=1e-12)


def van_loan_quadrature(f_c, q_c, dt, nodes=10_000):
    # trapezoid over tau in [0, dt] of Psi(tau) Qc Psi(tau)^T (integrand symmetric in the substitution)
    h = dt / (nodes - 1)
    step = expm(f_c * h)
    psi = np.eye(f_c.shape[0])
    total = np.zeros_like(q_c)
    for i in range(nodes):
        w = 0.5 if i in (0, nodes - 1) else 1.0
        total += w * psi @ q_c @ psi.T
        psi = step @ psi
    return total * h


def test_van_loan_matches_quadrature():
    rng = np.random.default_rng(7)
    f_c = random_stable(rng, 6)
    b = rng.standard_normal((6, 6))
    q_c = b @ b.T
    dt = 0.2
    disc = discretize(bare_aug(f_c, q_c), dt)
    ref = van_loan_quadrature(f_c, q_c, dt)
    assert np.abs(disc.q_d - ref).max() <= 1e-6 * np.abs(ref).max()


def test_input_matrix_without_inverse():
    # rigid-body (singular) drift: b_d = integral of expm(F s) ds B
    p = PhysicalParams(np.eye(1), np.zeros((1, 1)), np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1)))
    ssm = build_nominal_ssm(p, OutputSpec.all_dofs(1, ("displacement",)), [[1.0]])
    aug = augment_with_gp(ssm, GpHyperparams([1.0], [1.0]))
    disc = discretize(aug, 0.5)
    # unit force on a free unit mass: q = dt^2/2, v = dt
    np.testing.assert_allclose(disc.b_ud[:2, 0], [0.125, 0.5], rtol=1e-12)


def aug_from(theta, n=2, dt=0.01):
    p = PhysicalParams.shear_building(np.ones(n), 50.0, 0.5)
    ssm = build_nominal_ssm(p, OutputSpec.all_dofs(n), np.eye(n))
    return augment_with_gp(ssm, theta)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=2),
    st.lists(st.floats(1e-2, 1e2), min_size=2, max_size=2),
    st.floats(1e-3, 0.1),
)
def test_process_noise_symmetric_psd(alpha, ell, dt):
    disc = discretize(aug_from(GpHyperparams(alpha, ell)), dt)
    assert np.abs(disc.q_d - disc.q_d.T).max() == 0.0
    assert np.linalg.eigvalsh(disc.q_d).min() >= -1e-12 * max(1.0, np.abs(disc.q_d).max())


def test_semigroup_property():
    aug = aug_from(GpHyperparams([2.0, 0.5], [0.3, 1.5]))
    dt = 0.01
    one, two = discretize(aug, dt), discretize(aug, 2 * dt)
    np.testing.assert_allclose(one.f_d @ one.f_d, two.f_d, rtol=1e-9, atol=1e-12)
    composed = one.f_d @ one.q_d @ one.f_d.T + one.q_d
    assert np.abs(composed - two.q_d).max() <= 1e-8 * np.abs(two.q_d).max()


def test_matern_stationary_variance():
    theta = GpHyperparams([0.7, 3.0], [0.2, 5.0])
    cov = stationary_latent_cov(aug_from(theta))
    np.testing.assert_allclose(np.diag(cov), theta.alpha, rtol=1e-9)


def test_acceleration_output_consistency():
    p = PhysicalParams.shear_building([1.0, 2.0], [100.0, 80.0], [0.3, 0.1], force_dofs=[0, 1])
    spec = OutputSpec.all_dofs(2, ("acceleration",))
    ssm = build_nominal_ssm(p, spec, np.eye(2))
    rng = np.random.default_rng(0)
    for _ in range(5):
        x, u, eta = rng.standard_normal(4), rng.standard_normal(2), rng.standard_normal(2)
        xdot = ssm.a_c @ x + ssm.b_uc @ u + ssm.b_pc @ eta
        y = ssm.h @ x + ssm.j_u @ u + ssm.j_p @ eta
        np.testing.assert_allclose(y, xdot[2:], rtol=1e-8)


def test_acceleration_is_absolute_under_ground_motion():
    ssm = build_nominal_ssm(sdof(), OutputSpec.all_dofs(1), [[1.0]])
    x, ug = np.array([0.1, -0.3]), 2.5
    rel_acc = (ssm.a_c @ x + ssm.b_gc[:, 0] * ug)[1]
    assert (ssm.h @ x)[0] == pytest.approx(rel_acc + ug)
