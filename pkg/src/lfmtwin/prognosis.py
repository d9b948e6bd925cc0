"""Measurement-free state prediction driven by BNN pseudo-measurements.

Under a new excitation the structural model is propagated with a Kalman
filter whose only "observations" are draws from the trained state-to-force
map. At every step the predicted structural state is fed to the BNN, one
force value is drawn from its moment-matched predictive and assimilated as
a direct observation of the latent-force block, with the predictive
covariance as its noise covariance. The GP hyperparameters of the forces
are re-estimated from the innovation likelihood of these pseudo-measurements
before a final filter/smoother pass.

No measured response enters anywhere; every function here takes only the
excitation series.

Random numbers: the normals used at step ``k`` come from a generator keyed
on ``(seed, k)`` and the BNN weight bank from one keyed on ``seed`` alone,
so the objective is a deterministic function of the hyperparameters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .bnn import BnnModel, bank_moments
from .diagnosis import (
    DEFAULT_ALPHA_PRIOR,
    DEFAULT_ELL_PRIOR,
    OptimizationResult,
    OptimizerConfig,
    StudentTPrior,
    _pad_front,
    default_initial_state,
    log_prior,
    optimize_hyperparams,
)
from .kalman import LOG_2PI, FilterError, FilterResult, GaussianState, SmootherResult, _chol_jitter, _kalman_update, _predict, rts_smoother
from .statespace import (
    DEFAULT_JITTER,
    ContinuousSSM,
    DiscreteSSM,
    GpHyperparams,
    PhysicalParams,
    augment_with_gp,
    build_nominal_ssm,
    discretize,
)

SAMPLE_MODES = ("sample", "mean")


@dataclass(frozen=True)
class PseudoMeasurement:
    value: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.value, dtype=float))
        r = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if r.shape != (v.size, v.size):
            raise ValueError("noise_cov must be square and match value")
        if not np.allclose(r, r.T, rtol=1e-10, atol=0.0):
            raise ValueError("noise_cov must be symmetric")
        object.__setattr__(self, "value", v)
        object.__setattr__(self, "noise_cov", r)


@dataclass(frozen=True)
class PrognosisInputs:
    """Excitation for the prediction horizon, one row per output time step."""

    dt: float
    u: np.ndarray | None = None
    ug: np.ndarray | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        u = None if self.u is None else np.asarray(self.u, dtype=float)
        if u is not None and u.ndim == 1:
            u = u[:, None]
        ug = None if self.ug is None else np.asarray(self.ug, dtype=float).reshape(-1)
        if u is None and ug is None:
            raise ValueError("prognosis needs at least one excitation series")
        if u is not None and ug is not None and u.shape[0] != ug.shape[0]:
            raise ValueError("u and ug must have the same number of rows")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "ug", ug)

    @property
    def n_steps(self) -> int:
        return (self.u if self.u is not None else self.ug).shape[0]

    @property
    def times(self):
        return np.arange(self.n_steps) * self.dt


@dataclass(frozen=True)
class PrognosisConfig:
    """Settings for the prognosis phase.

    ``theta_star_init`` is normally the diagnosis MAP estimate. With
    ``optimize=False`` it is used as is. ``cov_scale`` multiplies the BNN
    predictive covariance before it is used (1 leaves it untouched).
    """

    theta_star_init: GpHyperparams | None = None
    alpha_prior: StudentTPrior = DEFAULT_ALPHA_PRIOR
    ell_prior: StudentTPrior = DEFAULT_ELL_PRIOR
    seed: int = 0
    sample_mode: str = "sample"
    restarts: int = 3
    weight_samples: int = 32
    cov_scale: float = 1.0
    optimize: bool = True
    struct_var: float = 1e-6
    jitter: float = DEFAULT_JITTER
    xatol: float = 1e-2
    fatol: float = 1e-2
    maxiter: int | None = None

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.sample_mode not in SAMPLE_MODES:
            raise ValueError(f"sample_mode must be one of {SAMPLE_MODES}")
        if self.weight_samples < 2:
            raise ValueError("weight_samples must be >= 2")
        if not self.cov_scale > 0:
            raise ValueError("cov_scale must be positive")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(restarts=self.restarts, seed=self.seed, xatol=self.xatol, fatol=self.fatol, maxiter=self.maxiter)


# ------------------------------------------------------------------ kernel


@njit(cache=True)
def _pseudo_kernel(F, Q, drive, m0, P0, n_struct, bank, sizes, act, in_shift, in_scale, out_shift, out_scale,
                   z_state, z_eta, sample, cov_scale, store, m_pred, P_pred, m_filt, P_filt, eta_out, R_out):
    N = drive.shape[0]
    d = F.shape[0]
    n_p = d - n_struct
    H = np.zeros((n_p, d))
    for i in range(n_p):
        H[i, n_struct + i] = 1.0
    Ls = np.zeros((n_struct, n_struct))
    Le = np.zeros((n_p, n_p))
    Lu = np.zeros((n_p, n_p))
    mbar = np.zeros(n_p)
    cbar = np.zeros((n_p, n_p))
    xn = np.zeros(n_struct)
    eta = np.zeros(n_p)
    m = m0.copy()
    P = P0.copy()
    work = np.empty((d, d))
    x = np.empty(n_struct)
    resid = np.empty(n_p)
    ll = 0.0
    for k in range(N):
        mp = np.empty(d)
        Pp = np.empty((d, d))
        _predict(F, Q, drive[k], m, P, mp, Pp, work)
        m, P = mp, Pp
        if store:
            m_pred[k] = m
            P_pred[k] = P
        # structural marginal -> one representative state
        if sample:
            Ps = np.ascontiguousarray(P[:n_struct, :n_struct])
            if not _chol_jitter(Ps, Ls):
                return ll, k
            for i in range(n_struct):
                acc = m[i]
                for j in range(i + 1):
                    acc += Ls[i, j] * z_state[k, j]
                x[i] = acc
        else:
            x[:] = m[:n_struct]
        for i in range(n_struct):
            xn[i] = (x[i] - in_shift[i]) / in_scale[i]
        bank_moments(bank, sizes, act, xn, out_shift, out_scale, n_p, mbar, cbar)
        R = np.empty((n_p, n_p))
        for i in range(n_p):
            for j in range(n_p):
                R[i, j] = cov_scale * 0.5 * (cbar[i, j] + cbar[j, i])
        if not _chol_jitter(R, Le):
            return ll, k
        for i in range(n_p):
            acc = mbar[i]
            for j in range(i + 1):
                acc += Le[i, j] * z_eta[k, j]
            eta[i] = acc
        for i in range(n_p):
            resid[i] = eta[i] - m[n_struct + i]
        m, P, logdet, maha, ok = _kalman_update(m, P, resid, H, R, Lu)
        if not ok:
            return ll, k
        ll -= 0.5 * (logdet + maha + n_p * LOG_2PI)
        if store:
            m_filt[k] = m
            P_filt[k] = P
            eta_out[k] = eta
            R_out[k] = R
    return ll, -1


def step_normals(seed: int, n_steps: int, n_struct: int, n_p: int):
    """Standard normals for each step, drawn from a generator keyed on (seed, k)."""
    zs = np.empty((n_steps, n_struct))
    ze = np.empty((n_steps, n_p))
    for k in range(n_steps):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, k)))
        zs[k] = rng.standard_normal(n_struct)
        ze[k] = rng.standard_normal(n_p)
    return zs, ze


def pseudo_selector(n_struct: int, n_p: int):
    """Observation matrix picking the latent-force block out of the state."""
    H = np.zeros((n_p, n_struct + n_p))
    H[:, n_struct:] = np.eye(n_p)
    return H


# ----------------------------------------------------------------- problem


@dataclass
class PseudoPassResult:
    filter: FilterResult
    values: np.ndarray
    noise_covs: np.ndarray

    @property
    def pseudo_measurements(self):
        return [PseudoMeasurement(v, r) for v, r in zip(self.values, self.noise_covs)]


@dataclass
class PrognosisProblem:
    """Nominal model, trained map and excitation, with the random streams fixed."""

    ssm: ContinuousSSM
    model: BnnModel
    inputs: PrognosisInputs
    config: PrognosisConfig = field(default_factory=PrognosisConfig)

    def __post_init__(self):
        n_struct = self.ssm.a_c.shape[0]
        n_p = self.ssm.b_pc.shape[1]
        topo = self.model.topology
        if topo.input_dim != n_struct:
            raise ValueError(f"BNN takes {topo.input_dim} inputs but the model has {n_struct} structural states")
        if topo.n_out != n_p:
            raise ValueError(f"BNN predicts {topo.n_out} forces but the model has {n_p} latent channels")
        cfg = self.config
        self._bank = np.ascontiguousarray(self.model.weight_bank(cfg.weight_samples, np.random.SeedSequence(cfg.seed, spawn_key=(1,))))
        self._kargs = self.model.kernel_args()
        self._zs, self._ze = step_normals(cfg.seed, self.inputs.n_steps, n_struct, n_p)
        u, ug = _pad_front(self.inputs.u), _pad_front(self.inputs.ug)
        self._u = u
        self._ug = ug

    @classmethod
    def from_params(cls, params: PhysicalParams, model: BnnModel, inputs: PrognosisInputs, config: PrognosisConfig | None = None):
        return cls(build_nominal_ssm(params, None), model, inputs, config or PrognosisConfig())

    @property
    def n_struct(self) -> int:
        return self.ssm.a_c.shape[0]

    @property
    def n_lf(self) -> int:
        return self.ssm.b_pc.shape[1]

    @property
    def n_steps(self) -> int:
        return self.inputs.n_steps

    def discrete(self, theta: GpHyperparams) -> DiscreteSSM:
        return discretize(augment_with_gp(self.ssm, theta, self.config.jitter), self.inputs.dt)

    def initial_state(self, theta: GpHyperparams) -> GaussianState:
        return default_initial_state(self.n_struct, theta, self.config.struct_var)

    def _drive(self, disc: DiscreteSSM):
        N = self.n_steps
        drive = np.zeros((N, disc.dim))
        if self._u is not None and disc.b_ud.shape[1] > 0:
            drive += self._u[:-1] @ disc.b_ud.T
        if self._ug is not None:
            drive += self._ug[:-1, None] * disc.b_gd[:, 0]
        return drive

    def _run(self, theta: GpHyperparams, store: bool, init: GaussianState | None = None):
        disc = self.discrete(theta)
        init = init or self.initial_state(theta)
        N, d, n_p = self.n_steps, disc.dim, self.n_lf
        shape = (N,) if store else (1,)
        m_pred, m_filt = np.zeros(shape + (d,)), np.zeros(shape + (d,))
        P_pred, P_filt = np.zeros(shape + (d, d)), np.zeros(shape + (d, d))
        eta, R = np.zeros(shape + (n_p,)), np.zeros(shape + (n_p, n_p))
        sizes, act, in_shift, in_scale, out_shift, out_scale = self._kargs
        ll, fail = _pseudo_kernel(
            np.ascontiguousarray(disc.f_d), np.ascontiguousarray(disc.q_d), self._drive(disc), init.mean, init.cov,
            self.n_struct, self._bank, sizes, act, in_shift, in_scale, out_shift, out_scale,
            self._zs, self._ze, self.config.sample_mode == "sample", float(self.config.cov_scale), store,
            m_pred, P_pred, m_filt, P_filt, eta, R,
        )
        if fail >= 0:
            raise FilterError("pseudo-measurement update failed", int(fail))
        return disc, float(ll), (m_pred, P_pred, m_filt, P_filt, eta, R)

    def log_likelihood(self, theta: GpHyperparams) -> float:
        """Innovation log-likelihood of the pseudo-measurement sequence."""
        return self._run(theta, store=False)[1]

    def filter_pass(self, theta: GpHyperparams, init: GaussianState | None = None):
        disc, ll, (m_pred, P_pred, m_filt, P_filt, eta, R) = self._run(theta, True, init)
        H = pseudo_selector(self.n_struct, self.n_lf)
        innov = eta - m_pred @ H.T
        S = H @ P_pred @ H.T + R
        return disc, PseudoPassResult(FilterResult(m_pred, P_pred, m_filt, P_filt, ll, innov, S), eta, R)

    def neg_log_posterior(self, theta: GpHyperparams) -> float:
        try:
            ll = self.log_likelihood(theta)
        except (FilterError, FloatingPointError, np.linalg.LinAlgError):
            return math.inf
        value = -ll - log_prior(theta, self.config.alpha_prior, self.config.ell_prior)
        return value if math.isfinite(value) else math.inf


def pseudo_filter_pass(problem: PrognosisProblem, theta: GpHyperparams, init: GaussianState | None = None) -> PseudoPassResult:
    """One forward pass at fixed hyperparameters, keeping every step."""
    return problem.filter_pass(theta, init)[1]


def optimize_prognosis_hyperparams(problem: PrognosisProblem, init: GpHyperparams | None = None) -> OptimizationResult:
    """MAP estimate of the prognosis-phase hyperparameters."""
    cfg = problem.config
    init = init or cfg.theta_star_init or GpHyperparams(np.ones(problem.n_lf), np.ones(problem.n_lf))
    return optimize_hyperparams(problem.neg_log_posterior, init, cfg.optimizer())


# ------------------------------------------------------------------ result


@dataclass
class PrognosisResult:
    theta_star_map: GpHyperparams
    smoother: SmootherResult
    passes: PseudoPassResult
    times: np.ndarray
    n_struct: int
    map_objective: float
    objective_trace: np.ndarray
    optimization: OptimizationResult | None = None

    @property
    def pseudo_measurements(self):
        return self.passes.pseudo_measurements

    @property
    def predicted_states(self):
        """Smoothed structural marginals, one Gaussian per step."""
        s = self.n_struct
        return [GaussianState(m[:s], P[:s, :s]) for m, P in zip(self.smoother.means, self.smoother.covs)]

    def states(self):
        """Smoothed structural means and standard deviations, (N, 2n) each."""
        return self.smoother.marginal(np.arange(self.n_struct))

    def latent_forces(self):
        return self.smoother.marginal(np.arange(self.n_struct, self.smoother.means.shape[1]))

    def summary(self) -> dict:
        opt = self.optimization
        return {
            "theta_star": self.theta_star_map.to_dict(),
            "map_objective": self.map_objective,
            "pseudo_log_likelihood": self.passes.filter.log_likelihood,
            "n_evaluations": None if opt is None else opt.n_evaluations,
            "restart_values": None if opt is None else opt.start_values,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def run_prognosis(params: PhysicalParams, model: BnnModel, inputs: PrognosisInputs,
                  config: PrognosisConfig | None = None) -> PrognosisResult:
    """Estimate theta*, then filter and smooth with pseudo-measurements.

    The signature deliberately has no slot for measured responses.
    """
    cfg = config or PrognosisConfig()
    problem = PrognosisProblem.from_params(params, model, inputs, cfg)
    return prognose(problem)


def prognose(problem: PrognosisProblem) -> PrognosisResult:
    cfg = problem.config
    theta = cfg.theta_star_init or GpHyperparams(np.ones(problem.n_lf), np.ones(problem.n_lf))
    opt = None
    if cfg.optimize:
        opt = optimize_prognosis_hyperparams(problem, theta)
        theta = opt.theta
    disc, passes = problem.filter_pass(theta)
    smooth = rts_smoother(disc, passes.filter)
    value = -passes.filter.log_likelihood - log_prior(theta, cfg.alpha_prior, cfg.ell_prior)
    trace = opt.trace if opt is not None else np.array([value])
    return PrognosisResult(theta, smooth, passes, problem.inputs.times, problem.n_struct, float(value), trace, opt)
