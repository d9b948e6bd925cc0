"""GP latent-force diagnosis: MAP hyperparameters and smoothed states/forces.

The objective is the innovation-form marginal likelihood of the measured
series under the GP-augmented linear model plus heavy-tailed Student-t
priors on the signal variances and lengthscales. Optimization runs in log
space with a multi-start Nelder-Mead search, since differentiating through
thousands of filter steps is not worth the trouble for a handful of
hyperparameters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .kalman import (
    FilterError,
    GaussianState,
    SmootherResult,
    kalman_filter,
    log_likelihood,
    rts_smoother,
    sample_smoothed_marginals,
)
from .statespace import (
    DEFAULT_JITTER,
    ContinuousSSM,
    DiscreteSSM,
    GpHyperparams,
    OutputSpec,
    PhysicalParams,
    augment_with_gp,
    build_nominal_ssm,
    discretize,
)

__all__ = [
    "GpHyperparams",
    "StudentTPrior",
    "MeasurementData",
    "GplfmProblem",
    "OptimizerConfig",
    "OptimizationResult",
    "DiagnosisConfig",
    "DiagnosisResult",
    "OptimizationError",
    "log_prior",
    "neg_log_posterior",
    "optimize_hyperparams",
    "run_diagnosis",
]

BOUNDS = (1e-15, 1e15)


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StudentTPrior:
    """Location-scale Student-t prior.

    ``variance`` is read as the squared scale. With ``dof=1`` the
    distribution is Cauchy and has no variance, so this is the only
    reading that makes a "variance" setting meaningful.
    """

    mean: float = 0.0
    variance: float = 1.0
    dof: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("prior variance (squared scale) must be positive")
        if not self.dof > 0:
            raise ValueError("prior degrees of freedom must be positive")

    @property
    def scale(self) -> float:
        return math.sqrt(self.variance)

    def logpdf(self, x):
        nu, s = self.dof, self.scale
        z = (np.asarray(x, dtype=float) - self.mean) / s
        const = gammaln(0.5 * (nu + 1)) - gammaln(0.5 * nu) - 0.5 * math.log(nu * math.pi) - math.log(s)
        return const - 0.5 * (nu + 1) * np.log1p(z * z / nu)

    def to_dict(self):
        return {"mean": self.mean, "variance": self.variance, "dof": self.dof}


DEFAULT_ALPHA_PRIOR = StudentTPrior(0.0, 1.0, 1.0)
DEFAULT_ELL_PRIOR = StudentTPrior(100.0, 10.0, 1.0)


def log_prior(theta: GpHyperparams, alpha_prior: StudentTPrior = DEFAULT_ALPHA_PRIOR,
              ell_prior: StudentTPrior = DEFAULT_ELL_PRIOR) -> float:
    return float(np.sum(alpha_prior.logpdf(theta.alpha)) + np.sum(ell_prior.logpdf(theta.ell)))


@dataclass(frozen=True)
class MeasurementData:
    """Sampled measurements and known inputs on a uniform grid.

    All series share the same time grid ``t_k = k * dt``; ``u`` has one
    column per external force, ``ug`` is the ground acceleration.
    """

    dt: float
    y: np.ndarray
    output_spec: OutputSpec
    noise_cov: np.ndarray
    u: np.ndarray | None = None
    ug: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        n = y.shape[0]
        if y.shape[1] != self.output_spec.n_y:
            raise ValueError(f"y has {y.shape[1]} columns, output spec has {self.output_spec.n_y}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "noise_cov", np.atleast_2d(np.asarray(self.noise_cov, dtype=float)))
        if self.u is not None:
            u = np.asarray(self.u, dtype=float).reshape(n, -1)
            object.__setattr__(self, "u", u)
        if self.ug is not None:
            ug = np.asarray(self.ug, dtype=float).reshape(-1)
            if ug.size != n:
                raise ValueError(f"ug has {ug.size} samples, y has {n}")
            object.__setattr__(self, "ug", ug)
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def n_steps(self) -> int:
        return self.y.shape[0]

    @property
    def times(self):
        return np.arange(self.n_steps) * self.dt


def _pad_front(a):
    # the prior sits one step before the first sample; the input over that
    # extra interval is taken as zero
    if a is None:
        return None
    return np.concatenate([np.zeros_like(a[:1]), a], axis=0)


@dataclass
class GplfmProblem:
    """Everything needed to evaluate the marginal likelihood for a given theta."""

    ssm: ContinuousSSM
    dt: float
    y: np.ndarray
    u: np.ndarray | None = None
    ug: np.ndarray | None = None
    struct_var: float = 1e-6
    jitter: float = DEFAULT_JITTER

    @classmethod
    def from_data(cls, params: PhysicalParams, data: MeasurementData, struct_var=1e-6, jitter=DEFAULT_JITTER):
        ssm = build_nominal_ssm(params, data.output_spec, data.noise_cov)
        return cls(ssm, data.dt, data.y, data.u, data.ug, struct_var, jitter)

    @property
    def n_struct(self) -> int:
        return self.ssm.a_c.shape[0]

    @property
    def n_lf(self) -> int:
        return self.ssm.b_pc.shape[1]

    def discrete(self, theta: GpHyperparams) -> DiscreteSSM:
        return discretize(augment_with_gp(self.ssm, theta, self.jitter), self.dt)

    def initial_state(self, theta: GpHyperparams) -> GaussianState:
        return default_initial_state(self.n_struct, theta, self.struct_var)

    def _series(self):
        return self.y, _pad_front(self.u), _pad_front(self.ug)

    def log_likelihood(self, theta: GpHyperparams) -> float:
        y, u, ug = self._series()
        return log_likelihood(self.discrete(theta), self.initial_state(theta), y, u, ug)

    def smooth(self, theta: GpHyperparams):
        y, u, ug = self._series()
        disc = self.discrete(theta)
        filt = kalman_filter(disc, self.initial_state(theta), y, u, ug)
        return disc, filt, rts_smoother(disc, filt)


def default_initial_state(n_struct: int, theta: GpHyperparams, struct_var: float = 1e-6) -> GaussianState:
    """Zero mean; small structural variance, stationary variance on the forces."""
    d = n_struct + theta.size
    cov = np.zeros((d, d))
    cov[:n_struct, :n_struct] = struct_var * np.eye(n_struct)
    cov[n_struct:, n_struct:] = np.diag(theta.alpha)
    return GaussianState(np.zeros(d), cov)


def neg_log_posterior(theta: GpHyperparams, problem: GplfmProblem,
                      alpha_prior: StudentTPrior = DEFAULT_ALPHA_PRIOR,
                      ell_prior: StudentTPrior = DEFAULT_ELL_PRIOR) -> float:
    """Negative log posterior; ``inf`` when the filter breaks down."""
    try:
        ll = problem.log_likelihood(theta)
    except (FilterError, FloatingPointError, np.linalg.LinAlgError):
        return math.inf
    value = -ll - log_prior(theta, alpha_prior, ell_prior)
    return value if math.isfinite(value) else math.inf


# ------------------------------------------------------------ optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    restarts: int = 5
    seed: int = 0
    bounds: tuple = BOUNDS
    alpha_range: tuple = (1e-2, 1e2)
    ell_range: tuple = (1e-2, 1e1)
    initial_step: float = 1.0
    maxiter: int | None = None
    xatol: float = 1e-2
    fatol: float = 1e-2

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        lo, hi = self.bounds
        if not 0 < lo < hi:
            raise ValueError("bounds must satisfy 0 < lo < hi")


@dataclass
class OptimizationResult:
    theta: GpHyperparams
    value: float
    trace: np.ndarray
    start_points: list = field(default_factory=list)
    start_values: list = field(default_factory=list)
    n_evaluations: int = 0


def _random_start(rng, n, cfg: OptimizerConfig):
    a_lo, a_hi = np.log(cfg.alpha_range)
    l_lo, l_hi = np.log(cfg.ell_range)
    return np.concatenate([rng.uniform(a_lo, a_hi, n), rng.uniform(l_lo, l_hi, n)])


def optimize_hyperparams(objective, init: GpHyperparams, config: OptimizerConfig | None = None) -> OptimizationResult:
    """Multi-start Nelder-Mead over ``[log alpha, log ell]`` with clamped bounds.

    ``objective`` maps a ``GpHyperparams`` to a scalar. The first start is
    ``init``; the remaining ``restarts - 1`` are log-uniform draws.
    """
    cfg = config or OptimizerConfig()
    lo, hi = math.log(cfg.bounds[0]), math.log(cfg.bounds[1])
    x_init = init.to_log()
    if np.any(x_init < lo) or np.any(x_init > hi):
        raise ValueError("initial hyperparameters outside the optimizer bounds")
    dim = x_init.size
    rng = np.random.default_rng(cfg.seed)
    starts = [x_init] + [np.clip(_random_start(rng, init.size, cfg), lo, hi) for _ in range(cfg.restarts - 1)]

    history = []

    def f(x):
        x = np.clip(x, lo, hi)
        v = objective(GpHyperparams.from_log(x))
        history.append(v)
        return v

    best_x, best_v, start_values = None, math.inf, []
    for x0 in starts:
        simplex = np.vstack([x0, x0 + cfg.initial_step * np.eye(dim)])
        simplex = np.clip(simplex, lo, hi)
        res = minimize(
            f, x0, method="Nelder-Mead", bounds=[(lo, hi)] * dim,
            options={"initial_simplex": simplex, "xatol": cfg.xatol, "fatol": cfg.fatol,
                     "maxiter": cfg.maxiter, "maxfev": None if cfg.maxiter is None else 2 * cfg.maxiter},
        )
        v = float(res.fun)
        start_values.append(v)
        if v < best_v:
            best_x, best_v = np.clip(res.x, lo, hi), v
    if best_x is None:
        raise OptimizationError("every restart ended at an infeasible point")
    trace = np.minimum.accumulate(np.asarray(history, dtype=float))
    return OptimizationResult(
        theta=GpHyperparams.from_log(best_x),
        value=best_v,
        trace=trace,
        start_points=[GpHyperparams.from_log(s) for s in starts],
        start_values=start_values,
        n_evaluations=len(history),
    )


# ------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class DiagnosisConfig:
    alpha_prior: StudentTPrior = DEFAULT_ALPHA_PRIOR
    ell_prior: StudentTPrior = DEFAULT_ELL_PRIOR
    optimizer: OptimizerConfig = OptimizerConfig()
    theta_init: GpHyperparams | None = None
    struct_var: float = 1e-6
    jitter: float = DEFAULT_JITTER


@dataclass
class DiagnosisResult:
    theta_map: GpHyperparams
    smoother: SmootherResult
    objective_trace: np.ndarray
    map_objective: float
    discrete: DiscreteSSM
    times: np.ndarray
    log_likelihood: float
    optimization: OptimizationResult | None = None

    @property
    def n_struct(self) -> int:
        return self.discrete.n_struct

    def states(self):
        """Smoothed structural means and standard deviations."""
        idx = np.arange(self.n_struct)
        return self.smoother.marginal(idx)

    def latent_forces(self):
        """Smoothed latent-force means and standard deviations."""
        idx = np.arange(self.n_struct, self.discrete.dim)
        return self.smoother.marginal(idx)

    def mapping_samples(self, count_per_step: int, seed: int):
        """State/force sample pairs drawn from the smoothed marginals."""
        return sample_smoothed_marginals(self.smoother, count_per_step, seed, self.n_struct)

    def summary(self) -> dict:
        return {
            "theta_map": self.theta_map.to_dict(),
            "map_objective": self.map_objective,
            "log_likelihood": self.log_likelihood,
            "n_evaluations": None if self.optimization is None else self.optimization.n_evaluations,
            "restart_values": None if self.optimization is None else self.optimization.start_values,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def _objective_for(problem: GplfmProblem, cfg: DiagnosisConfig):
    return lambda th: neg_log_posterior(th, problem, cfg.alpha_prior, cfg.ell_prior)


def run_diagnosis(params: PhysicalParams, data: MeasurementData, config: DiagnosisConfig | None = None) -> DiagnosisResult:
    """Fit theta by MAP, then filter and smooth with the fitted model."""
    cfg = config or DiagnosisConfig()
    problem = GplfmProblem.from_data(params, data, cfg.struct_var, cfg.jitter)
    init = cfg.theta_init or GpHyperparams(np.ones(problem.n_lf), np.ones(problem.n_lf))
    opt = optimize_hyperparams(_objective_for(problem, cfg), init, cfg.optimizer)
    return diagnose_at(problem, opt.theta, cfg, opt, data.times)


def diagnose_at(problem: GplfmProblem, theta: GpHyperparams, cfg: DiagnosisConfig | None = None,
                opt: OptimizationResult | None = None, times=None) -> DiagnosisResult:
    """Filter and smooth at fixed hyperparameters (no optimization)."""
    cfg = cfg or DiagnosisConfig()
    disc, filt, smooth = problem.smooth(theta)
    value = -filt.log_likelihood - log_prior(theta, cfg.alpha_prior, cfg.ell_prior)
    trace = opt.trace if opt is not None else np.array([value])
    if times is None:
        times = np.arange(problem.y.shape[0]) * problem.dt
    return DiagnosisResult(theta, smooth, trace, float(value), disc, np.asarray(times), filt.log_likelihood, opt)
