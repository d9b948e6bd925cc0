"""Linear state-space construction for latent-force-corrected structural models.

The nominal model is

    M q'' + C q' + K q = S_u u - M 1 ug'' - S_p eta

written in first-order form with x = [q, q'], then augmented with one
Ornstein-Uhlenbeck (Matern-1/2) state per latent force channel and
discretized exactly under a zero-order hold on the known inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov

CHANNEL_KINDS = ("displacement", "velocity", "acceleration")
DEFAULT_JITTER = 1e-14


def _as_matrix(a, name, shape=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if shape is not None and a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


@dataclass(frozen=True)
class PhysicalParams:
    """Mass, damping and stiffness matrices plus force influence matrices.

    ``lf_influence`` (S_p) places latent forces on DOFs, ``force_influence``
    (S_u) places external forces. Both are 0/1 selection matrices.
    """

    mass: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray
    lf_influence: np.ndarray
    force_influence: np.ndarray

    def __post_init__(self):
        m = _as_matrix(self.mass, "mass")
        n = m.shape[0]
        c = _as_matrix(self.damping, "damping", (n, n))
        k = _as_matrix(self.stiffness, "stiffness", (n, n))
        sp = np.asarray(self.lf_influence, dtype=float).reshape(n, -1)
        su = np.asarray(self.force_influence, dtype=float).reshape(n, -1)
        for name, a in (("mass", m), ("damping", c), ("stiffness", k)):
            if not np.allclose(a, a.T, rtol=1e-12, atol=0.0):
                raise ValueError(f"{name} matrix must be symmetric")
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise ValueError("mass matrix must be positive definite") from exc
        scale = max(np.abs(k).max(), np.abs(c).max(), 1.0)
        for name, a in (("damping", c), ("stiffness", k)):
            if np.linalg.eigvalsh(a).min() < -1e-10 * scale:
                raise ValueError(f"{name} matrix must be positive semi-definite")
        for name, s in (("lf_influence", sp), ("force_influence", su)):
            if np.any((s != 0) & (s != 1)):
                raise ValueError(f"{name} entries must be 0 or 1")
            if np.any(np.count_nonzero(s, axis=0) > 1):
                raise ValueError(f"{name} must have at most one nonzero per column")
        object.__setattr__(self, "mass", m)
        object.__setattr__(self, "damping", c)
        object.__setattr__(self, "stiffness", k)
        object.__setattr__(self, "lf_influence", sp)
        object.__setattr__(self, "force_influence", su)

    @property
    def n_dof(self) -> int:
        return self.mass.shape[0]

    @property
    def n_lf(self) -> int:
        return self.lf_influence.shape[1]

    @property
    def n_force(self) -> int:
        return self.force_influence.shape[1]

    @classmethod
    def shear_building(cls, masses, stiffnesses, dampings, lf_dofs=None, force_dofs=None):
        """Chain (shear-storey) model; storey i connects DOF i-1 (ground for i=0) to DOF i.

        ``lf_dofs`` defaults to every DOF; ``force_dofs`` defaults to DOF 0.
        """
        masses = np.atleast_1d(np.asarray(masses, dtype=float))
        n = masses.size
        kk = np.broadcast_to(np.asarray(stiffnesses, dtype=float), (n,))
        cc = np.broadcast_to(np.asarray(dampings, dtype=float), (n,))
        lf_dofs = range(n) if lf_dofs is None else lf_dofs
        force_dofs = [0] if force_dofs is None else force_dofs
        return cls(
            mass=np.diag(masses),
            damping=chain_matrix(cc),
            stiffness=chain_matrix(kk),
            lf_influence=selection_matrix(n, lf_dofs),
            force_influence=selection_matrix(n, force_dofs),
        )


def chain_matrix(coeffs):
    """Assemble the tridiagonal matrix of a ground-fixed spring (or damper) chain."""
    coeffs = np.asarray(coeffs, dtype=float)
    n = coeffs.size
    out = np.zeros((n, n))
    for i, c in enumerate(coeffs):
        out[i, i] += c
        if i > 0:
            out[i - 1, i - 1] += c
            out[i - 1, i] -= c
            out[i, i - 1] -= c
    return out


def selection_matrix(n, dofs):
    dofs = list(dofs)
    s = np.zeros((n, len(dofs)))
    for col, dof in enumerate(dofs):
        s[dof, col] = 1.0
    return s


@dataclass(frozen=True)
class OutputSpec:
    """Measured channels as ``(kind, dof)`` pairs.

    Acceleration channels are absolute accelerations (relative plus ground),
    which is what an accelerometer mounted on the structure reports.
    """

    channels: tuple

    def __post_init__(self):
        chans = tuple((str(kind), int(dof)) for kind, dof in self.channels)
        for kind, _ in chans:
            if kind not in CHANNEL_KINDS:
                raise ValueError(f"unknown channel kind {kind!r}")
        object.__setattr__(self, "channels", chans)

    @classmethod
    def all_dofs(cls, n, kinds=("acceleration",)):
        return cls(tuple((kind, i) for kind in kinds for i in range(n)))

    @property
    def n_y(self) -> int:
        return len(self.channels)

    def labels(self):
        short = {"displacement": "disp", "velocity": "vel", "acceleration": "acc"}
        return [f"{short[k]}{d + 1}" for k, d in self.channels]


@dataclass(frozen=True)
class ContinuousSSM:
    a_c: np.ndarray
    b_pc: np.ndarray
    b_uc: np.ndarray
    b_gc: np.ndarray
    h: np.ndarray
    j_p: np.ndarray
    j_u: np.ndarray
    meas_noise_cov: np.ndarray

    @property
    def n_dof(self) -> int:
        return self.a_c.shape[0] // 2


@dataclass(frozen=True)
class GpHyperparams:
    """Per-channel signal variance ``alpha`` and lengthscale ``ell`` (seconds)."""

    alpha: np.ndarray
    ell: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alpha, dtype=float)).copy()
        l = np.atleast_1d(np.asarray(self.ell, dtype=float)).copy()
        if a.shape != l.shape or a.ndim != 1:
            raise ValueError("alpha and ell must be 1-D arrays of equal length")
        if not (np.all(a > 0) and np.all(l > 0)):
            raise ValueError("GP hyperparameters must be strictly positive")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(l))):
            raise ValueError("GP hyperparameters must be finite")
        a.flags.writeable = False
        l.flags.writeable = False
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "ell", l)

    @property
    def size(self) -> int:
        return self.alpha.size

    def to_log(self):
        """Flat log-space vector ``[log alpha..., log ell...]``."""
        return np.concatenate([np.log(self.alpha), np.log(self.ell)])

    @classmethod
    def from_log(cls, v):
        v = np.asarray(v, dtype=float)
        k = v.size // 2
        return cls(np.exp(v[:k]), np.exp(v[k:]))

    def to_dict(self):
        return {"alpha": self.alpha.tolist(), "ell": self.ell.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["alpha"], d["ell"])


@dataclass(frozen=True)
class AugmentedSSM:
    f_c: np.ndarray
    b_uc_a: np.ndarray
    b_gc_a: np.ndarray
    q_c: np.ndarray
    h_a: np.ndarray
    j_u: np.ndarray
    meas_noise_cov: np.ndarray
    n_struct: int


@dataclass(frozen=True)
class DiscreteSSM:
    f_d: np.ndarray
    b_ud: np.ndarray
    b_gd: np.ndarray
    q_d: np.ndarray
    h_a: np.ndarray
    j_u: np.ndarray
    meas_noise_cov: np.ndarray
    dt: float
    n_struct: int = field(default=0)

    @property
    def dim(self) -> int:
        return self.f_d.shape[0]


def build_nominal_ssm(params: PhysicalParams, output_spec: OutputSpec | None, meas_noise_cov=None) -> ContinuousSSM:
    """Continuous-time state-space form of the nominal (linear) model.

    ``output_spec=None`` builds a model without measurement channels, as used
    for prognosis where only pseudo-measurements of the latent forces exist.
    """
    n = params.n_dof
    if output_spec is None:
        output_spec = OutputSpec(())
    minv_k = np.linalg.solve(params.mass, params.stiffness)
    minv_c = np.linalg.solve(params.mass, params.damping)
    minv_sp = np.linalg.solve(params.mass, params.lf_influence)
    minv_su = np.linalg.solve(params.mass, params.force_influence)
    zeros, eye = np.zeros((n, n)), np.eye(n)

    a_c = np.block([[zeros, eye], [-minv_k, -minv_c]])
    b_pc = np.vstack([np.zeros_like(minv_sp), -minv_sp])
    b_uc = np.vstack([np.zeros_like(minv_su), minv_su])
    b_gc = np.concatenate([np.zeros(n), -np.ones(n)])[:, None]

    n_y = output_spec.n_y
    h = np.zeros((n_y, 2 * n))
    j_p = np.zeros((n_y, params.n_lf))
    j_u = np.zeros((n_y, params.n_force))
    for row, (kind, dof) in enumerate(output_spec.channels):
        if not 0 <= dof < n:
            raise ValueError(f"channel DOF {dof} out of range for {n}-DOF model")
        if kind == "displacement":
            h[row, dof] = 1.0
        elif kind == "velocity":
            h[row, n + dof] = 1.0
        else:
            # absolute acceleration: the -1 * ug'' of the relative EoM cancels
            h[row] = a_c[n + dof]
            j_p[row] = b_pc[n + dof]
            j_u[row] = b_uc[n + dof]

    if n_y == 0:
        return ContinuousSSM(a_c, b_pc, b_uc, b_gc, h, j_p, j_u, np.zeros((0, 0)))
    r = _as_matrix(meas_noise_cov, "meas_noise_cov", (n_y, n_y))
    if not np.allclose(r, r.T):
        raise ValueError("meas_noise_cov must be symmetric")
    try:
        np.linalg.cholesky(r)
    except np.linalg.LinAlgError as exc:
        raise ValueError("meas_noise_cov must be positive definite") from exc
    return ContinuousSSM(a_c, b_pc, b_uc, b_gc, h, j_p, j_u, r)


def augment_with_gp(ssm: ContinuousSSM, theta: GpHyperparams, jitter: float = DEFAULT_JITTER) -> AugmentedSSM:
    """Append one Matern-1/2 SDE state per latent force channel."""
    n_p = ssm.b_pc.shape[1]
    if theta.size != n_p:
        raise ValueError(f"theta has {theta.size} channels, model has {n_p}")
    if not jitter > 0:
        raise ValueError("jitter must be positive")
    n2 = ssm.a_c.shape[0]
    lam = np.diag(1.0 / theta.ell)
    f_c = np.block([[ssm.a_c, ssm.b_pc], [np.zeros((n_p, n2)), -lam]])
    b_uc_a = np.vstack([ssm.b_uc, np.zeros((n_p, ssm.b_uc.shape[1]))])
    b_gc_a = np.vstack([ssm.b_gc, np.zeros((n_p, 1))])
    q_c = np.zeros((n2 + n_p, n2 + n_p))
    q_c[:n2, :n2] = jitter * np.eye(n2)
    q_c[n2:, n2:] = np.diag(2.0 * theta.alpha / theta.ell)
    h_a = np.hstack([ssm.h, ssm.j_p])
    return AugmentedSSM(f_c, b_uc_a, b_gc_a, q_c, h_a, ssm.j_u, ssm.meas_noise_cov, n2)


def discretize_ab(f_c, b, dt):
    """Exact ZOH discretization via one augmented exponential; valid for singular f_c."""
    d, m = f_c.shape[0], b.shape[1]
    block = np.zeros((d + m, d + m))
    block[:d, :d] = f_c
    block[:d, d:] = b
    phi = expm(block * dt)
    return phi[:d, :d], phi[:d, d:]


def discretize_q(f_c, q_c, dt):
    """Process noise covariance of the exact discretization (Van Loan)."""
    d = f_c.shape[0]
    # [[-F, Qc], [0, F^T]] -> top-right block is F_d^{-1} Q_d
    block = np.block([[-f_c, symmetrize(q_c)], [np.zeros((d, d)), f_c.T]])
    phi = expm(block * dt)
    f_d = phi[d:, d:].T
    return symmetrize(f_d @ phi[:d, d:])


def discretize(aug: AugmentedSSM, dt: float) -> DiscreteSSM:
    if not dt > 0:
        raise ValueError("dt must be positive")
    inputs = np.hstack([aug.b_uc_a, aug.b_gc_a])
    f_d, b_d = discretize_ab(aug.f_c, inputs, dt)
    q_d = discretize_q(aug.f_c, aug.q_c, dt)
    if not (np.all(np.isfinite(f_d)) and np.all(np.isfinite(q_d))):
        raise FloatingPointError("discretization produced non-finite values")
    n_u = aug.b_uc_a.shape[1]
    return DiscreteSSM(
        f_d=f_d,
        b_ud=b_d[:, :n_u],
        b_gd=b_d[:, n_u:],
        q_d=q_d,
        h_a=aug.h_a,
        j_u=aug.j_u,
        meas_noise_cov=aug.meas_noise_cov,
        dt=float(dt),
        n_struct=aug.n_struct,
    )


def build_discrete(params, output_spec, meas_noise_cov, theta, dt, jitter=DEFAULT_JITTER):
    """Shortcut: nominal model -> GP augmentation -> discretization."""
    ssm = build_nominal_ssm(params, output_spec, meas_noise_cov)
    return discretize(augment_with_gp(ssm, theta, jitter), dt)


def stationary_latent_cov(aug: AugmentedSSM):
    """Stationary covariance of the latent-force block (Lyapunov solve)."""
    n2 = aug.n_struct
    f = aug.f_c[n2:, n2:]
    q = aug.q_c[n2:, n2:]
    return solve_continuous_lyapunov(f, -q)
