"""Ground-truth simulators, excitation generators, noise injection and metrics.

Four benchmark systems are provided, all written as

    M q'' + C q' + K q + p(q, q', b) = S_u u - M 1 ug''

with a kind-specific nonlinear restoring force ``p``. The linear part
(M, C, K) is exactly what the nominal model sees; ``p`` is the model-form
error the latent forces are meant to absorb.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import signal

from .statespace import PhysicalParams, chain_matrix, selection_matrix

__all__ = [
    "TrueSystem",
    "ExcitationSignal",
    "MeasurementSeries",
    "SimulationResult",
    "SimulationError",
    "simulate_true",
    "kanai_tajimi",
    "filtered_white_noise",
    "sine",
    "multisine",
    "ramp_envelope",
    "add_measurement_noise",
    "nmse",
    "coverage",
    "load_io_csv",
    "save_io_csv",
    "sdof_duffing",
    "three_dof_local_nl",
    "silverbox_surrogate",
    "bouc_wen",
]

KINDS = ("sdof_duffing", "mdof_local_nl", "silverbox_surrogate", "bouc_wen")
_CODE = {"linear": 0, "sdof_duffing": 1, "silverbox_surrogate": 1, "mdof_local_nl": 2, "bouc_wen": 3}

SILVERBOX_FS = 610.35


class SimulationError(FloatingPointError):
    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step


# ------------------------------------------------------------------ systems


@dataclass(frozen=True)
class TrueSystem:
    """Nonlinear ground-truth system.

    ``params`` keys: ``masses``, ``stiffnesses``, ``dampings`` (storey
    values of a shear chain) plus the nonlinear coefficients of the kind:
    ``knl`` (cubic spring at DOF 1), ``k1g``/``c23`` (3-DOF study) or
    ``bw_alpha``, ``bw_beta``, ``bw_gamma``, ``bw_delta``, ``bw_nu``.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS + ("linear",):
            raise ValueError(f"unknown system kind {self.kind!r}")
        for key in ("masses", "stiffnesses"):
            if np.any(np.asarray(self.params[key], dtype=float) <= 0):
                raise ValueError(f"{key} must be positive")
        if self.kind == "mdof_local_nl" and self.n_dof < 3:
            raise ValueError("the local-nonlinearity system needs at least 3 DOFs")

    @property
    def n_dof(self) -> int:
        return len(np.atleast_1d(self.params["masses"]))

    @property
    def state_dim(self) -> int:
        return 2 * self.n_dof + (1 if self.kind == "bouc_wen" else 0)

    def matrices(self):
        p = self.params
        n = self.n_dof
        m = np.diag(np.broadcast_to(np.asarray(p["masses"], float), (n,)).copy())
        k = chain_matrix(np.broadcast_to(np.asarray(p["stiffnesses"], float), (n,)))
        c = chain_matrix(np.broadcast_to(np.asarray(p.get("dampings", 0.0), float), (n,)))
        return m, c, k

    def nominal(self, lf_dofs=None, force_dofs=(0,)) -> PhysicalParams:
        """Linear nominal model; latent forces on ``lf_dofs`` (default all)."""
        m, c, k = self.matrices()
        n = self.n_dof
        lf = selection_matrix(n, range(n) if lf_dofs is None else lf_dofs)
        su = selection_matrix(n, force_dofs)
        return PhysicalParams(m, c, k, lf, su)

    def _coeffs(self):
        p = self.params
        return np.array([
            p.get("knl", 0.0), p.get("k1g", 0.0), p.get("c23", 0.0),
            p.get("bw_alpha", 0.0), p.get("bw_beta", 0.0), p.get("bw_gamma", 0.0),
            p.get("bw_delta", 0.0), p.get("bw_nu", 1.0),
        ], dtype=float)

    def restoring_force(self, q, v, b=None):
        """True nonlinear force per DOF for state rows ``q``, ``v`` (N, n)."""
        q = np.atleast_2d(q)
        v = np.atleast_2d(v)
        out = np.zeros_like(q)
        kind, c = self.kind, self.params
        if kind in ("sdof_duffing", "silverbox_surrogate"):
            out[:, 0] = c["knl"] * q[:, 0] ** 3
        elif kind == "mdof_local_nl":
            dv = v[:, 2] - v[:, 1]
            out[:, 0] = c["k1g"] * q[:, 0] ** 3
            out[:, 2] = c["c23"] * dv * np.abs(dv)
        elif kind == "bouc_wen":
            out[:, 0] = np.asarray(b).reshape(-1)
        return out


def sdof_duffing(knl=1000.0) -> TrueSystem:
    return TrueSystem("sdof_duffing", {"masses": [1.0], "stiffnesses": [100.0], "dampings": [0.2], "knl": knl})


def three_dof_local_nl(k1g=1000.0, c23=0.5) -> TrueSystem:
    return TrueSystem("mdof_local_nl", {
        "masses": [1.0] * 3, "stiffnesses": [100.0] * 3, "dampings": [0.2] * 3, "k1g": k1g, "c23": c23,
    })


def silverbox_surrogate() -> TrueSystem:
    return TrueSystem("silverbox_surrogate", {
        "masses": [5.3722e-6], "stiffnesses": [0.9932], "dampings": [2.1905e-4], "knl": 3.4239,
    })


def bouc_wen(mass=1.0) -> TrueSystem:
    return TrueSystem("bouc_wen", {
        "masses": [mass], "stiffnesses": [5e4], "dampings": [10.0],
        "bw_alpha": 5e4, "bw_beta": 1e3, "bw_gamma": 0.8, "bw_delta": -1.1, "bw_nu": 1.0,
    })


# --------------------------------------------------------------- simulation


@njit(cache=True)
def _rhs(z, n, minv, c, k, force, ug, code, co, out):
    q = z[:n]
    v = z[n:2 * n]
    p = np.zeros(n)
    if code == 1:
        p[0] = co[0] * q[0] ** 3
    elif code == 2:
        dv = v[2] - v[1]
        p[0] = co[1] * q[0] ** 3
        p[2] = co[2] * dv * abs(dv)
    elif code == 3:
        b = z[2 * n]
        p[0] = b
        nu = co[7]
        ab = abs(b)
        # standard Bouc-Wen evolution driven by the velocity
        pw = ab ** (nu - 1.0) if nu != 1.0 else 1.0
        out[2 * n] = co[3] * v[0] - co[4] * (co[5] * abs(v[0]) * pw * b + co[6] * v[0] * ab ** nu)
    rhs = force - c @ v - k @ q - p
    acc = minv @ rhs - ug
    out[:n] = v
    out[n:2 * n] = acc
    return p


@njit(cache=True)
def _simulate(z0, n, minv, c, k, force, ug, dt, substeps, code, co, states, accel, pforce):
    nz = z0.size
    z = z0.copy()
    k1, k2, k3, k4 = np.zeros(nz), np.zeros(nz), np.zeros(nz), np.zeros(nz)
    tmp = np.zeros(nz)
    h = dt / substeps
    n_out = states.shape[0]
    for i in range(n_out):
        states[i] = z
        p = _rhs(z, n, minv, c, k, force[i], ug[i], code, co, k1)
        accel[i] = k1[n:2 * n] + ug[i]
        pforce[i] = p
        if i == n_out - 1:
            break
        for _ in range(substeps):
            _rhs(z, n, minv, c, k, force[i], ug[i], code, co, k1)
            tmp[:] = z + 0.5 * h * k1
            _rhs(tmp, n, minv, c, k, force[i], ug[i], code, co, k2)
            tmp[:] = z + 0.5 * h * k2
            _rhs(tmp, n, minv, c, k, force[i], ug[i], code, co, k3)
            tmp[:] = z + h * k3
            _rhs(tmp, n, minv, c, k, force[i], ug[i], code, co, k4)
            z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for j in range(nz):
            if not np.isfinite(z[j]):
                return i + 1
    return -1


@dataclass
class SimulationResult:
    t: np.ndarray
    q: np.ndarray
    v: np.ndarray
    acc: np.ndarray
    force: np.ndarray
    hysteretic: np.ndarray | None
    u: np.ndarray
    ug: np.ndarray

    @property
    def states(self):
        return np.hstack([self.q, self.v])

    def channels(self, spec):
        """Clean outputs for an ``OutputSpec``."""
        cols = []
        for kind, dof in spec.channels:
            src = {"displacement": self.q, "velocity": self.v, "acceleration": self.acc}[kind]
            cols.append(src[:, dof])
        return np.column_stack(cols) if cols else np.zeros((self.t.size, 0))


def simulate_true(system: TrueSystem, dt: float, n_samples: int | None = None, u=None, ug=None,
                  force_dofs=(0,), x0=None, substeps: int = 4) -> SimulationResult:
    """Fixed-step RK4 with zero-order-hold inputs, sampled every ``dt``.

    ``u`` is (N, n_u) external force on ``force_dofs``, ``ug`` is (N,)
    ground acceleration. ``n_samples`` is needed only for free vibration.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = system.n_dof
    if n_samples is None:
        src = u if u is not None else ug
        if src is None:
            raise ValueError("n_samples is required without inputs")
        n_samples = np.asarray(src).shape[0]
    su = selection_matrix(n, force_dofs)
    force = np.zeros((n_samples, n))
    if u is not None:
        force = np.asarray(u, float).reshape(n_samples, -1) @ su.T
    ugv = np.zeros(n_samples) if ug is None else np.asarray(ug, float).reshape(n_samples)
    m, c, k = system.matrices()
    z0 = np.zeros(system.state_dim) if x0 is None else np.asarray(x0, float).copy()
    states = np.zeros((n_samples, system.state_dim))
    accel = np.zeros((n_samples, n))
    pforce = np.zeros((n_samples, n))
    code = _CODE[system.kind]
    fail = _simulate(z0, n, np.linalg.inv(m), c, k, np.ascontiguousarray(force), ugv, float(dt), int(substeps),
                     code, system._coeffs(), states, accel, pforce)
    if fail >= 0:
        raise SimulationError("state became non-finite", int(fail))
    t = np.arange(n_samples) * dt
    hyst = states[:, 2 * n] if system.kind == "bouc_wen" else None
    u_out = np.zeros((n_samples, 0)) if u is None else np.asarray(u, float).reshape(n_samples, -1)
    return SimulationResult(t, states[:, :n], states[:, n:2 * n], accel, pforce, hyst, u_out, ugv)


# --------------------------------------------------------------- excitation


@dataclass(frozen=True)
class ExcitationSignal:
    kind: str
    samples: np.ndarray
    dt: float
    applied_dof: int | str = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("excitation contains non-finite samples")

    @property
    def t(self):
        return np.arange(self.samples.size) * self.dt


def _n(dt, duration):
    if not (dt > 0 and duration > 0):
        raise ValueError("dt and duration must be positive")
    return int(round(duration / dt))


def ramp_envelope(t, rise=4.0, hold_until=40.0, decay=0.15):
    """(t/rise)^2 ramp, flat hold, exponential decay."""
    t = np.asarray(t, float)
    return np.where(t < rise, (t / rise) ** 2, np.where(t <= hold_until, 1.0, np.exp(-decay * (t - hold_until))))


def kanai_tajimi(dt=0.005, duration=60.0, omega_g=5 * math.pi, zeta_g=0.6, intensity=1.0, seed=0,
                 envelope=True, rise=4.0, hold_until=40.0, decay=0.15) -> ExcitationSignal:
    """Ground acceleration: white noise through a Kanai-Tajimi filter times an envelope.

    ``intensity`` is the standard deviation of the discrete white noise
    driving the filter.
    """
    if not (omega_g > 0 and zeta_g > 0 and intensity >= 0):
        raise ValueError("Kanai-Tajimi parameters must be positive")
    n = _n(dt, duration)
    rng = np.random.default_rng(seed)
    w = intensity * rng.standard_normal(n)
    num = [2 * zeta_g * omega_g, omega_g**2]
    den = [1.0, 2 * zeta_g * omega_g, omega_g**2]
    bd, ad, _ = signal.cont2discrete((num, den), dt, method="bilinear")
    x = signal.lfilter(np.ravel(bd), ad, w)
    if envelope:
        x = x * ramp_envelope(np.arange(n) * dt, rise, hold_until, decay)
    return ExcitationSignal("kanai_tajimi", x, dt, "ground")


def filtered_white_noise(dt=0.005, duration=60.0, cutoff=5.0, order=4, amplitude=1.0, seed=0,
                         applied_dof=0) -> ExcitationSignal:
    """Low-pass Butterworth-filtered Gaussian noise scaled to RMS ``amplitude``."""
    fs = 1.0 / dt
    if not 0 < cutoff < fs / 2:
        raise ValueError(f"cutoff {cutoff} Hz must lie in (0, Nyquist={fs / 2} Hz)")
    n = _n(dt, duration)
    if amplitude == 0:
        return ExcitationSignal("filtered_white_noise", np.zeros(n), dt, applied_dof)
    rng = np.random.default_rng(seed)
    sos = signal.butter(order, cutoff, btype="low", fs=fs, output="sos")
    x = signal.sosfilt(sos, rng.standard_normal(n))
    x *= amplitude / np.sqrt(np.mean(x**2))
    return ExcitationSignal("filtered_white_noise", x, dt, applied_dof)


def sine(dt=0.005, duration=60.0, amplitude=1.0, frequency=1.0, phase=0.0, applied_dof=0) -> ExcitationSignal:
    t = np.arange(_n(dt, duration)) * dt
    return ExcitationSignal("sine", amplitude * np.sin(2 * math.pi * frequency * t + phase), dt, applied_dof)


def multisine(dt, period_samples, periods=1, f_max=None, rms=1.0, seed=0, applied_dof=0) -> ExcitationSignal:
    """Odd random-phase multisine: equal amplitudes on odd harmonics up to ``f_max``."""
    fs = 1.0 / dt
    f_max = fs / 4 if f_max is None else f_max
    f0 = fs / period_samples
    harmonics = np.arange(1, int(f_max / f0) + 1, 2)
    if harmonics.size == 0:
        raise ValueError("f_max is below the frequency resolution")
    rng = np.random.default_rng(seed)
    t = np.arange(period_samples) * dt
    phases = rng.uniform(0, 2 * math.pi, harmonics.size)
    x = np.cos(2 * math.pi * f0 * np.outer(t, harmonics) + phases).sum(axis=1)
    x *= rms / np.sqrt(np.mean(x**2))
    return ExcitationSignal("multisine", np.tile(x, periods), dt, applied_dof)


# -------------------------------------------------------------- measurement


@dataclass(frozen=True)
class MeasurementSeries:
    values: np.ndarray
    noise_std: np.ndarray
    labels: tuple = ()

    @property
    def noise_cov(self):
        return np.diag(self.noise_std**2)


def add_measurement_noise(clean, fraction=0.05, seed=0, labels=()) -> MeasurementSeries:
    """Per-channel Gaussian noise with std ``fraction * RMS(channel)``."""
    if fraction < 0:
        raise ValueError("noise fraction must be non-negative")
    clean = np.asarray(clean, float)
    if clean.ndim == 1:
        clean = clean[:, None]
    std = fraction * np.sqrt(np.mean(clean**2, axis=0))
    if fraction == 0:
        return MeasurementSeries(clean.copy(), std, tuple(labels))
    rng = np.random.default_rng(seed)
    return MeasurementSeries(clean + rng.standard_normal(clean.shape) * std, std, tuple(labels))


# ----------------------------------------------------------------- metrics


def nmse(truth, predicted) -> float:
    """Normalized mean square error in percent, averaged over components."""
    d = np.asarray(truth, float)
    dh = np.asarray(predicted, float)
    if d.shape != dh.shape:
        raise ValueError(f"shape mismatch {d.shape} vs {dh.shape}")
    if d.ndim == 1:
        d, dh = d[:, None], dh[:, None]
    var = d.var(axis=0)
    if np.any(var <= 0):
        raise ValueError("a truth component has zero variance; NMSE is undefined")
    return float(np.mean((d - dh) ** 2 / var) * 100.0)


def coverage(truth, mean, std, k=2.0) -> float:
    """Fraction of entries with ``|truth - mean| <= k * std``."""
    truth, mean, std = (np.asarray(a, float) for a in (truth, mean, std))
    return float(np.mean(np.abs(truth - mean) <= k * std))


# ---------------------------------------------------------------------- io


def save_io_csv(path, u, y, dt):
    """Two-column CSV (input, output) preceded by a ``# dt=`` line."""
    u = np.asarray(u, float).reshape(-1)
    y = np.asarray(y, float).reshape(-1)
    if u.size != y.size:
        raise ValueError("input and output lengths differ")
    with open(path, "w", newline="") as fh:
        fh.write(f"# dt={float(dt)!r}\n")
        w = csv.writer(fh)
        w.writerow(["u", "y"])
        for a, b in zip(u, y):
            w.writerow([repr(float(a)), repr(float(b))])


def load_io_csv(path, start=None, stop=None):
    """Read ``(u, y, dt)``; ``start``/``stop`` select an inclusive sample range."""
    dt = None
    u, y = [], []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                body = s[1:].strip()
                if body.startswith("dt="):
                    try:
                        dt = float(body[3:])
                    except ValueError as exc:
                        raise ValueError(f"line {lineno}: bad dt header {body!r}") from exc
                continue
            parts = [p.strip() for p in s.split(",")]
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 2 columns, got {len(parts)}")
            try:
                a, b = float(parts[0]), float(parts[1])
            except ValueError:
                if not u and not y and parts[0].lower() in ("u", "input", "v1"):
                    continue
                raise ValueError(f"line {lineno}: non-numeric row {s!r}") from None
            if not (math.isfinite(a) and math.isfinite(b)):
                raise ValueError(f"line {lineno}: non-finite value")
            u.append(a)
            y.append(b)
    if dt is None:
        raise ValueError("missing '# dt=' header")
    u, y = np.array(u), np.array(y)
    lo = 0 if start is None else int(start)
    hi = u.size - 1 if stop is None else int(stop)
    if not 0 <= lo <= hi < u.size:
        raise ValueError(f"slice [{lo}, {hi}] outside 0..{u.size - 1}")
    return u[lo:hi + 1], y[lo:hi + 1], dt
