"""Kalman filter, RTS smoother and smoothed-marginal sampling.

Time convention: ``init`` is the state at t_0; measurements are y_1..y_N at
t_1..t_N. Known inputs are sampled on the full grid t_0..t_N (N + 1 rows):
the prediction to t_k uses the inputs held at t_{k-1} (zero-order hold) and
the measurement feedthrough at t_k uses the inputs at t_k.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from numba import njit

from .statespace import DiscreteSSM, symmetrize

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER_REL = 1e-10


class FilterError(FloatingPointError):
    """Raised when an innovation or predicted covariance cannot be factorized."""

    def __init__(self, message, step):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        p = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if p.shape != (m.size, m.size):
            raise ValueError(f"cov shape {p.shape} does not match mean of length {m.size}")
        scale = max(np.abs(p).max(), 1e-300)
        if np.abs(p - p.T).max() > 1e-9 * scale:
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", symmetrize(p))

    @property
    def dim(self) -> int:
        return self.mean.size

    def std(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _chol(a, out):
    """Lower Cholesky factor of ``a`` into ``out``; False if not positive definite."""
    n = a.shape[0]
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= out[j, k] * out[j, k]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        out[j, j] = d
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            out[i, j] = s / d
        for i in range(j):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def _chol_jitter(a, out):
    if _chol(a, out):
        return True
    n = a.shape[0]
    tr = 0.0
    for i in range(n):
        tr += a[i, i]
    bump = JITTER_REL * abs(tr) / n
    if not bump > 0.0:
        bump = 1e-300
    bumped = a.copy()
    for i in range(n):
        bumped[i, i] += bump
    return _chol(bumped, out)


@njit(cache=True)
def _chol_solve(L, b):
    """Solve (L L^T) X = b for a 2-D right-hand side."""
    n, m = b.shape
    x = b.copy()
    for c in range(m):
        for i in range(n):
            s = x[i, c]
            for k in range(i):
                s -= L[i, k] * x[k, c]
            x[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = x[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * x[k, c]
            x[i, c] = s / L[i, i]
    return x


# Explicit loops beat BLAS dispatch for the small dense matrices met here
# (state dimension a few tens at most) and keep results bitwise stable.


@njit(cache=True)
def _matmul(a, b, out):
    """out = a @ b."""
    n, kk = a.shape
    m = b.shape[1]
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
        for l in range(kk):
            ail = a[i, l]
            for j in range(m):
                out[i, j] += ail * b[l, j]


@njit(cache=True)
def _matmul_t(a, b, out):
    """out = a @ b.T."""
    n, kk = a.shape
    m = b.shape[0]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for l in range(kk):
                s += a[i, l] * b[j, l]
            out[i, j] = s


@njit(cache=True)
def _symmetrize(a):
    n = a.shape[0]
    for i in range(n):
        for j in range(i):
            v = 0.5 * (a[i, j] + a[j, i])
            a[i, j] = v
            a[j, i] = v


@njit(cache=True)
def _predict(F, Q, drive, m, P, m_out, P_out, work):
    """m_out = F m + drive, P_out = F P F^T + Q (symmetrized)."""
    d = m.shape[0]
    for i in range(d):
        s = drive[i]
        for j in range(d):
            s += F[i, j] * m[j]
        m_out[i] = s
    _matmul(F, P, work)
    _matmul_t(work, F, P_out)
    for i in range(d):
        for j in range(d):
            P_out[i, j] += Q[i, j]
    _symmetrize(P_out)


@njit(cache=True)
def _kalman_update(m, P, resid, H, R, L):
    """Joseph-form update; returns (m, P, logdet S, mahalanobis, ok)."""
    d = m.shape[0]
    ny = H.shape[0]
    PHt = np.empty((d, ny))
    _matmul_t(P, H, PHt)
    S = np.empty((ny, ny))
    _matmul(H, PHt, S)
    for i in range(ny):
        for j in range(ny):
            S[i, j] += R[i, j]
    _symmetrize(S)
    if not _chol_jitter(S, L):
        return m, P, 0.0, 0.0, False
    logdet = 0.0
    for i in range(ny):
        logdet += 2.0 * np.log(L[i, i])
    w = _chol_solve(L, resid.reshape(ny, 1))
    maha = 0.0
    for i in range(ny):
        maha += resid[i] * w[i, 0]
    Kt = _chol_solve(L, np.ascontiguousarray(PHt.T))  # K^T, (ny, d)
    m_new = m.copy()
    for i in range(d):
        for j in range(ny):
            m_new[i] += Kt[j, i] * resid[j]
    IKH = np.empty((d, d))
    for i in range(d):
        for l in range(d):
            s = 1.0 if i == l else 0.0
            for j in range(ny):
                s -= Kt[j, i] * H[j, l]
            IKH[i, l] = s
    T = np.empty((d, d))
    _matmul(IKH, P, T)
    P_new = np.empty((d, d))
    _matmul_t(T, IKH, P_new)
    KR = np.empty((d, ny))
    for i in range(d):
        for b in range(ny):
            s = 0.0
            for a in range(ny):
                s += Kt[a, i] * R[a, b]
            KR[i, b] = s
    for i in range(d):
        for l in range(d):
            s = 0.0
            for b in range(ny):
                s += KR[i, b] * Kt[b, l]
            P_new[i, l] += s
    _symmetrize(P_new)
    return m_new, P_new, logdet, maha, True


@njit(cache=True)
def _filter_kernel(F, Q, H, R, drive, feed, y, observed, m0, P0, store,
                   m_pred, P_pred, m_filt, P_filt, innov, S_out):
    N = drive.shape[0]
    d = m0.shape[0]
    ny = H.shape[0]
    L = np.zeros((max(ny, 1), max(ny, 1)))
    m = m0.copy()
    P = P0.copy()
    mp = np.empty(d)
    Pp = np.empty((d, d))
    work = np.empty((d, d))
    resid = np.empty(ny)
    ll = 0.0
    for k in range(N):
        _predict(F, Q, drive[k], m, P, mp, Pp, work)
        if store:
            m_pred[k] = mp
            P_pred[k] = Pp
        if observed[k]:
            for i in range(ny):
                s = y[k, i] - feed[k, i]
                for j in range(d):
                    s -= H[i, j] * mp[j]
                resid[i] = s
            m, P, logdet, maha, ok = _kalman_update(mp, Pp, resid, H, R, L)
            if not ok:
                return ll, k
            ll -= 0.5 * (logdet + maha + ny * LOG_2PI)
            if store:
                innov[k] = resid
                S_out[k] = H @ P_pred[k] @ H.T + R
        else:
            m[:] = mp
            P[:, :] = Pp
        if store:
            m_filt[k] = m
            P_filt[k] = P
    return ll, -1


@njit(cache=True)
def _rts_kernel(F, m_pred, P_pred, m_filt, P_filt, ms, Ps, G):
    N = m_filt.shape[0]
    d = F.shape[0]
    L = np.zeros((d, d))
    FP = np.empty((d, d))
    D = np.empty((d, d))
    T = np.empty((d, d))
    ms[N - 1] = m_filt[N - 1]
    Ps[N - 1] = P_filt[N - 1]
    for k in range(N - 2, -1, -1):
        if not _chol_jitter(P_pred[k + 1], L):
            return k
        # G_k = P_k|k F^T P_k+1|k^{-1}
        _matmul(F, P_filt[k], FP)
        Gt = _chol_solve(L, FP)
        Gk = G[k]
        for i in range(d):
            for j in range(d):
                Gk[i, j] = Gt[j, i]
        for i in range(d):
            s = m_filt[k, i]
            for j in range(d):
                s += Gk[i, j] * (ms[k + 1, j] - m_pred[k + 1, j])
            ms[k, i] = s
        for i in range(d):
            for j in range(d):
                D[i, j] = Ps[k + 1, i, j] - P_pred[k + 1, i, j]
        _matmul(Gk, D, T)
        _matmul_t(T, Gk, Ps[k])
        for i in range(d):
            for j in range(d):
                Ps[k, i, j] += P_filt[k, i, j]
        _symmetrize(Ps[k])
    return -1


# ---------------------------------------------------------------- results


@dataclass
class FilterResult:
    """Per-step predicted/filtered moments, stacked along the first axis."""

    m_pred: np.ndarray
    P_pred: np.ndarray
    m_filt: np.ndarray
    P_filt: np.ndarray
    log_likelihood: float
    innovations: np.ndarray
    innovation_covs: np.ndarray

    def __len__(self):
        return self.m_filt.shape[0]

    @property
    def predicted(self):
        return [GaussianState(m, P) for m, P in zip(self.m_pred, self.P_pred)]

    @property
    def filtered(self):
        return [GaussianState(m, P) for m, P in zip(self.m_filt, self.P_filt)]


@dataclass
class SmootherResult:
    means: np.ndarray
    covs: np.ndarray
    gains: np.ndarray

    def __len__(self):
        return self.means.shape[0]

    @property
    def smoothed(self):
        return [GaussianState(m, P) for m, P in zip(self.means, self.covs)]

    def std(self):
        return np.sqrt(np.clip(np.einsum("kii->ki", self.covs), 0.0, None))

    def marginal(self, index):
        """Means and standard deviations of the selected state components."""
        idx = np.atleast_1d(index)
        return self.means[:, idx], self.std()[:, idx]


# ---------------------------------------------------------------- drivers


def _input_terms(ssm: DiscreteSSM, n_steps, u, ug):
    d = ssm.dim
    drive = np.zeros((n_steps, d))
    feed = np.zeros((n_steps, ssm.h_a.shape[0]))
    if u is not None and ssm.b_ud.shape[1] > 0:
        u = np.asarray(u, dtype=float).reshape(n_steps + 1, -1)
        drive += u[:-1] @ ssm.b_ud.T
        feed += u[1:] @ ssm.j_u.T
    if ug is not None:
        ug = np.asarray(ug, dtype=float).reshape(n_steps + 1)
        drive += ug[:-1, None] * ssm.b_gd[:, 0]
    return drive, feed


def _model_arrays(ssm):
    c = np.ascontiguousarray
    return c(ssm.f_d), c(ssm.q_d), c(ssm.h_a), c(ssm.meas_noise_cov)


def _prepare(ssm, init, measurements, u, ug, n_steps):
    if measurements is None:
        if n_steps is None:
            raise ValueError("n_steps is required when no measurements are given")
        y = np.full((n_steps, ssm.h_a.shape[0]), np.nan)
    else:
        y = np.asarray(measurements, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[1] != ssm.h_a.shape[0]:
            raise ValueError(f"measurement dimension {y.shape[1]} != {ssm.h_a.shape[0]} output rows")
        n_steps = y.shape[0]
    if init.dim != ssm.dim:
        raise ValueError(f"initial state has dimension {init.dim}, model has {ssm.dim}")
    observed = ~np.any(np.isnan(y), axis=1) & (y.shape[1] > 0)
    drive, feed = _input_terms(ssm, n_steps, u, ug)
    return np.ascontiguousarray(y), observed, drive, feed


def kalman_filter(ssm: DiscreteSSM, init: GaussianState, measurements, u=None, ug=None, n_steps=None):
    """Run the Kalman filter.

    Parameters
    ----------
    ssm : DiscreteSSM
    init : GaussianState
        State distribution at t_0.
    measurements : array (N, n_y) or None
        Rows containing NaN are treated as missing (prediction only).
    u : array (N + 1, n_u), optional
        External force on the grid t_0..t_N.
    ug : array (N + 1,), optional
        Ground acceleration on the grid t_0..t_N.
    """
    y, observed, drive, feed = _prepare(ssm, init, measurements, u, ug, n_steps)
    N, d, ny = drive.shape[0], ssm.dim, y.shape[1]
    m_pred, m_filt = np.zeros((N, d)), np.zeros((N, d))
    P_pred, P_filt = np.zeros((N, d, d)), np.zeros((N, d, d))
    innov = np.full((N, ny), np.nan)
    S = np.full((N, ny, ny), np.nan)
    ll, fail = _filter_kernel(
        *_model_arrays(ssm), drive, feed, y, observed, init.mean, init.cov, True, m_pred, P_pred, m_filt, P_filt, innov, S,
    )
    if fail >= 0:
        raise FilterError("innovation covariance not positive definite", int(fail))
    return FilterResult(m_pred, P_pred, m_filt, P_filt, float(ll), innov, S)


def log_likelihood(ssm: DiscreteSSM, init: GaussianState, measurements, u=None, ug=None):
    """Innovation-form marginal log-likelihood without storing the trajectory."""
    y, observed, drive, feed = _prepare(ssm, init, measurements, u, ug, None)
    d, ny = ssm.dim, y.shape[1]
    e1, e2 = np.zeros((1, d)), np.zeros((1, d, d))
    ll, fail = _filter_kernel(
        *_model_arrays(ssm), drive, feed, y, observed, init.mean, init.cov, False, e1, e2, e1, e2, np.zeros((1, ny)), np.zeros((1, ny, ny)),
    )
    if fail >= 0:
        raise FilterError("innovation covariance not positive definite", int(fail))
    return float(ll)


def rts_smoother(ssm: DiscreteSSM, filt: FilterResult) -> SmootherResult:
    N, d = filt.m_filt.shape
    ms, Ps = np.zeros((N, d)), np.zeros((N, d, d))
    G = np.zeros((N, d, d))
    fail = _rts_kernel(np.ascontiguousarray(ssm.f_d), filt.m_pred, filt.P_pred, filt.m_filt, filt.P_filt, ms, Ps, G)
    if fail >= 0:
        raise FilterError("predicted covariance not positive definite", int(fail) + 1)
    return SmootherResult(ms, Ps, G)


def psd_sqrt(covs, tol=1e-9):
    """Symmetric square roots of a stack of PSD matrices (zero-safe)."""
    covs = symmetrize(np.asarray(covs, dtype=float))
    w, v = np.linalg.eigh(covs)
    scale = np.maximum(np.abs(w).max(axis=-1, keepdims=True), 1e-300)
    if np.any(w < -tol * scale):
        raise ValueError("covariance is not positive semi-definite")
    return (v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]) @ np.swapaxes(v, -1, -2)


def sample_smoothed_marginals(smooth: SmootherResult, count_per_step: int, seed: int, n_struct: int):
    """Draw ``count_per_step`` samples from each per-step smoothed marginal.

    Returns ``(states, forces)`` with shapes (N * count, n_struct) and
    (N * count, d - n_struct), ordered step-major.
    """
    if count_per_step < 1:
        raise ValueError("count_per_step must be >= 1")
    rng = np.random.default_rng(seed)
    roots = psd_sqrt(smooth.covs)
    N, d = smooth.means.shape
    eps = rng.standard_normal((N, count_per_step, d))
    draws = smooth.means[:, None, :] + np.einsum("kij,ksj->ksi", roots, eps)
    draws = draws.reshape(N * count_per_step, d)
    return draws[:, :n_struct], draws[:, n_struct:]


# ---------------------------------------------------------------- export


def _std_of(covs):
    return np.sqrt(np.clip(np.einsum("kii->ki", covs), 0.0, None))


def write_moments_csv(path, means, covs, labels=None, times=None):
    """One row per step: mean entries then marginal standard deviations."""
    d = means.shape[1]
    labels = labels or [f"z{i + 1}" for i in range(d)]
    std = _std_of(covs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = (["t"] if times is not None else []) + [f"{l}_mean" for l in labels] + [f"{l}_std" for l in labels]
        w.writerow(head)
        for k in range(means.shape[0]):
            row = ([repr(float(times[k]))] if times is not None else [])
            row += [repr(float(v)) for v in means[k]] + [repr(float(v)) for v in std[k]]
            w.writerow(row)


def moments_to_json(means, covs, labels=None):
    d = means.shape[1]
    labels = labels or [f"z{i + 1}" for i in range(d)]
    std = _std_of(covs)
    return json.dumps({"labels": labels, "mean": means.tolist(), "std": std.tolist()})
