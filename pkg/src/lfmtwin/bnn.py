"""Heteroskedastic Bayesian neural network for the state -> latent force map.

The network outputs a mean vector and the lower-triangular Cholesky factor
of a full covariance (softplus on the diagonal). Weights carry a
fully-factorised Gaussian variational posterior trained with
reparameterised Monte Carlo gradients; the backward pass through the MLP
and the Gaussian log-density is written out by hand.

Inputs are standardised per dimension. The loss is evaluated on targets in
physical units; the output head multiplies by a fixed per-channel scale
and adds a fixed shift (both taken from the training targets), which keeps
the raw weights O(1) whatever the force magnitude.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

__all__ = [
    "BnnTopology",
    "VariationalParams",
    "OutputScaling",
    "MapDataset",
    "PredictiveGaussian",
    "BnnModel",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "softplus",
    "forward",
    "kl_divergence",
    "elbo_minibatch",
    "train",
    "posterior_predictive",
    "predictive_moments",
    "bank_moments",
]

LOG_2PI = math.log(2.0 * math.pi)
ACTIVATIONS = ("relu", "tanh")


class TrainingError(FloatingPointError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _inv_softplus(y):
    return np.log(np.expm1(y))


# ------------------------------------------------------------------ types


@dataclass(frozen=True)
class BnnTopology:
    input_dim: int
    hidden: tuple = (20, 10)
    activation: str = "relu"
    n_out: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("at least one hidden layer of positive width is required")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.input_dim < 1 or self.n_out < 1:
            raise ValueError("input and output dimensions must be positive")

    @property
    def output_dim_mean(self) -> int:
        return self.n_out

    @property
    def output_dim_chol(self) -> int:
        return self.n_out * (self.n_out + 1) // 2

    @property
    def layer_sizes(self):
        return (self.input_dim,) + self.hidden + (self.output_dim_mean + self.output_dim_chol,)

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i + 1] * (s[i] + 1) for i in range(len(s) - 1))

    def fan_in(self):
        """Fan-in of the layer each parameter belongs to, in packing order."""
        s = self.layer_sizes
        return np.concatenate([np.full(s[i + 1] * (s[i] + 1), s[i], dtype=float) for i in range(len(s) - 1)])

    def unpack(self, w):
        """Split flat parameters (..., P) into per-layer (W, b) views.

        W has shape (..., fan_out, fan_in); b has shape (..., fan_out).
        """
        w = np.asarray(w)
        s = self.layer_sizes
        out, pos = [], 0
        for i in range(len(s) - 1):
            n_w = s[i + 1] * s[i]
            W = w[..., pos:pos + n_w].reshape(w.shape[:-1] + (s[i + 1], s[i]))
            pos += n_w
            b = w[..., pos:pos + s[i + 1]]
            pos += s[i + 1]
            out.append((W, b))
        return out

    def to_dict(self):
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "activation": self.activation, "n_out": self.n_out}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["input_dim"]), tuple(d["hidden"]), d["activation"], int(d["n_out"]))


@dataclass
class VariationalParams:
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if self.mu.shape != self.rho.shape or self.mu.ndim != 1:
            raise ValueError("mu and rho must be 1-D arrays of equal length")

    @property
    def sigma(self):
        return softplus(self.rho)

    @classmethod
    def initialize(cls, topology: BnnTopology, seed: int = 0, sigma0: float = 0.05, scale: float = 0.1):
        rng = np.random.default_rng(seed)
        mu = rng.standard_normal(topology.n_params) * scale / np.sqrt(topology.fan_in())
        rho = np.full(topology.n_params, _inv_softplus(sigma0))
        return cls(mu, rho)

    def sample(self, eps):
        return self.mu + self.sigma * eps


@dataclass(frozen=True)
class OutputScaling:
    """Fixed affine maps around the network: input standardisation and head scaling."""

    in_shift: np.ndarray
    in_scale: np.ndarray
    out_shift: np.ndarray
    out_scale: np.ndarray

    def __post_init__(self):
        for k in ("in_shift", "in_scale", "out_shift", "out_scale"):
            object.__setattr__(self, k, np.atleast_1d(np.asarray(getattr(self, k), dtype=float)))
        if np.any(self.in_scale <= 0) or np.any(self.out_scale <= 0):
            raise ValueError("scales must be positive")

    @classmethod
    def identity(cls, input_dim, n_out):
        return cls(np.zeros(input_dim), np.ones(input_dim), np.zeros(n_out), np.ones(n_out))

    def normalize(self, x):
        return (np.asarray(x, float) - self.in_shift) / self.in_scale

    def denormalize(self, xn):
        return np.asarray(xn, float) * self.in_scale + self.in_shift

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("in_shift", "in_scale", "out_shift", "out_scale")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], float) for k in ("in_shift", "in_scale", "out_shift", "out_scale")))


def _safe_scale(a):
    s = np.asarray(a, float).std(axis=0)
    return np.where(s > 0, s, 1.0)


@dataclass
class MapDataset:
    """State/force training pairs with the scaling derived from them."""

    inputs: np.ndarray
    targets: np.ndarray
    scaling: OutputScaling

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, float))
        self.targets = np.asarray(self.targets, float).reshape(self.inputs.shape[0], -1)
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite values")

    @classmethod
    def from_samples(cls, states, forces):
        states = np.atleast_2d(np.asarray(states, float))
        forces = np.asarray(forces, float).reshape(states.shape[0], -1)
        if states.shape[0] == 0:
            raise ValueError("empty dataset")
        scaling = OutputScaling(states.mean(axis=0), _safe_scale(states), forces.mean(axis=0), _safe_scale(forces))
        return cls(states, forces, scaling)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def normalized_inputs(self):
        return self.scaling.normalize(self.inputs)


@dataclass(frozen=True)
class PredictiveGaussian:
    mean: np.ndarray
    cov: np.ndarray


# ---------------------------------------------------------- forward pass


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def _mlp(topology: BnnTopology, w, xn):
    """Batched MLP. w: (S, P), xn: (B, d). Returns raw outputs (S, B, K) and a cache."""
    layers = topology.unpack(w)
    a = np.broadcast_to(xn, (w.shape[0],) + xn.shape)
    cache = []
    for i, (W, b) in enumerate(layers):
        z = a @ np.swapaxes(W, -1, -2) + b[:, None, :]
        last = i == len(layers) - 1
        cache.append((a, z))
        a = z if last else _act(z, topology.activation)
    return a, cache


def _head(topology: BnnTopology, raw, scaling: OutputScaling):
    """Mean (S,B,n) and Cholesky factor (S,B,n,n) from raw outputs."""
    n = topology.n_out
    ri, ci = np.tril_indices(n)
    mean = scaling.out_shift + scaling.out_scale * raw[..., :n]
    vals = raw[..., n:].copy()
    diag = ri == ci
    vals[..., diag] = softplus(vals[..., diag])
    L = np.zeros(raw.shape[:-1] + (n, n))
    L[..., ri, ci] = vals
    L *= scaling.out_scale[:, None]
    return mean, L


def forward(topology: BnnTopology, weights, x, scaling: OutputScaling | None = None):
    """Network output for one weight vector.

    ``x`` may be a single input (d,) or a batch (B, d). Returns the mean and
    the lower-triangular Cholesky factor of the covariance. ``scaling``
    defaults to the identity (no input or output scaling).
    """
    scaling = scaling or OutputScaling.identity(topology.input_dim, topology.n_out)
    x = np.asarray(x, float)
    single = x.ndim == 1
    xn = scaling.normalize(np.atleast_2d(x))
    w = np.asarray(weights, float)[None, :]
    raw, _ = _mlp(topology, w, xn)
    mean, L = _head(topology, raw, scaling)
    mean, L = mean[0], L[0]
    return (mean[0], L[0]) if single else (mean, L)


# -------------------------------------------------------- loss and grads


def kl_divergence(vp: VariationalParams) -> float:
    """KL[q || N(0, I)] for a fully factorised Gaussian q."""
    s = vp.sigma
    return float(np.sum(-np.log(s) + 0.5 * (s * s + vp.mu * vp.mu) - 0.5))


def _nll_grads(mean, L, eta):
    """Gaussian NLL per (s, b) and its gradients w.r.t. mean and L."""
    n = mean.shape[-1]
    r = eta[None, :, :] - mean
    Linv = np.linalg.inv(L)
    z = np.einsum("...ij,...j->...i", Linv, r)
    diagL = np.diagonal(L, axis1=-2, axis2=-1)
    nll = 0.5 * np.sum(z * z, axis=-1) + np.sum(np.log(diagL), axis=-1) + 0.5 * n * LOG_2PI
    LinvT_z = np.einsum("...ji,...j->...i", Linv, z)
    d_mean = -LinvT_z
    d_L = -LinvT_z[..., :, None] * z[..., None, :]
    d_L = d_L + np.eye(n) / diagL[..., None]
    return nll, d_mean, np.tril(d_L)


def _backward(topology: BnnTopology, w, cache, raw, d_mean, d_L, scaling: OutputScaling):
    """Gradient of sum_{s,b} weight * nll w.r.t. the sampled weights (S, P)."""
    n = topology.n_out
    ri, ci = np.tril_indices(n)
    d_raw = np.zeros_like(raw)
    d_raw[..., :n] = d_mean * scaling.out_scale
    d_vals = (d_L * scaling.out_scale[:, None])[..., ri, ci]
    diag = ri == ci
    d_vals[..., diag] *= _sigmoid(raw[..., n:][..., diag])
    d_raw[..., n:] = d_vals

    layers = topology.unpack(w)
    grads = []
    delta = d_raw
    for i in range(len(layers) - 1, -1, -1):
        a_in, _ = cache[i]
        W, _ = layers[i]
        gW = np.swapaxes(delta, -1, -2) @ a_in
        gb = delta.sum(axis=-2)
        grads.append((gW, gb))
        if i > 0:
            _, z_prev = cache[i - 1]
            a_prev = cache[i][0]
            delta = (delta @ W) * _act_grad(z_prev, a_prev, topology.activation)
    grads.reverse()
    S = w.shape[0]
    return np.concatenate([np.concatenate([gW.reshape(S, -1), gb], axis=-1) for gW, gb in grads], axis=-1)


def elbo_minibatch(vp: VariationalParams, topology: BnnTopology, x, eta, mc_samples: int, seed=None,
                   kl_weight: float = 1.0, scaling: OutputScaling | None = None, eps=None, return_grad: bool = True):
    """Minibatch loss ``mean_b mean_s NLL + kl_weight * KL`` and its gradients.

    ``x`` must already be normalised. Either ``seed`` or an explicit
    ``eps`` array of shape (S, P) fixes the reparameterisation noise.
    Returns ``(loss, grad_mu, grad_rho)`` or just the loss.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    x = np.atleast_2d(np.asarray(x, float))
    eta = np.asarray(eta, float).reshape(x.shape[0], -1)
    B = x.shape[0]
    if B == 0:
        raise ValueError("empty minibatch")
    scaling = scaling or OutputScaling.identity(topology.input_dim, topology.n_out)
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal((mc_samples, topology.n_params))
    S = eps.shape[0]
    sigma = vp.sigma
    w = vp.mu + sigma * eps
    raw, cache = _mlp(topology, w, x)
    mean, L = _head(topology, raw, scaling)
    nll, d_mean, d_L = _nll_grads(mean, L, eta)
    if not np.all(np.isfinite(nll)):
        s_bad, b_bad = np.argwhere(~np.isfinite(nll))[0]
        raise TrainingError(f"non-finite log-likelihood at batch sample {b_bad} (weight draw {s_bad})")
    kl = kl_divergence(vp)
    loss = float(nll.mean()) + kl_weight * kl
    if not return_grad:
        return loss
    g_w = _backward(topology, w, cache, raw, d_mean / (S * B), d_L / (S * B), scaling)
    dsig = _sigmoid(vp.rho)
    grad_mu = g_w.sum(axis=0) + kl_weight * vp.mu
    grad_rho = (g_w * eps).sum(axis=0) * dsig + kl_weight * (sigma - 1.0 / sigma) * dsig
    return loss, grad_mu, grad_rho


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    mc_samples: int = 4
    learning_rate: float = 1e-3
    epsilon: float = 1e-4
    max_epochs: int = 2000
    min_epochs: int = 1
    seed: int = 0
    kl_weight: float | None = None  # None -> 1 / N_m
    sigma0: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class TrainResult:
    params: VariationalParams
    loss_trace: np.ndarray
    converged: bool
    epochs: int


class _Adam:
    def __init__(self, size, lr, b1, b2, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


def train(dataset: MapDataset, topology: BnnTopology, config: TrainConfig | None = None,
          init: VariationalParams | None = None) -> TrainResult:
    """Adam on (mu, rho) until the epoch loss changes by less than ``epsilon``."""
    cfg = config or TrainConfig()
    if dataset.inputs.shape[1] != topology.input_dim or dataset.targets.shape[1] != topology.n_out:
        raise ValueError("dataset dimensions do not match the topology")
    rng = np.random.default_rng(cfg.seed)
    vp = init or VariationalParams.initialize(topology, seed=int(rng.integers(2**31)), sigma0=cfg.sigma0)
    vp = VariationalParams(vp.mu.copy(), vp.rho.copy())
    N = len(dataset)
    kl_w = 1.0 / N if cfg.kl_weight is None else cfg.kl_weight
    xn = dataset.normalized_inputs
    eta = dataset.targets
    P = topology.n_params
    opt = _Adam(2 * P, cfg.learning_rate, cfg.beta1, cfg.beta2)
    trace = []
    converged = False
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(N)
        batch_losses = []
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            eps = rng.standard_normal((cfg.mc_samples, P))
            loss, g_mu, g_rho = elbo_minibatch(vp, topology, xn[idx], eta[idx], cfg.mc_samples, eps=eps,
                                               kl_weight=kl_w, scaling=dataset.scaling)
            step = opt.step(np.concatenate([g_mu, g_rho]))
            vp.mu -= step[:P]
            vp.rho -= step[P:]
            batch_losses.append(loss)
        epoch_loss = float(np.mean(batch_losses))
        if not math.isfinite(epoch_loss):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        trace.append(epoch_loss)
        if epoch + 1 >= max(cfg.min_epochs, 2) and abs(trace[-1] - trace[-2]) < cfg.epsilon:
            converged = True
            break
    return TrainResult(vp, np.array(trace), converged, len(trace))


# --------------------------------------------------------------- prediction


def _weight_bank(vp: VariationalParams, S: int, seed):
    eps = np.random.default_rng(seed).standard_normal((S, vp.mu.size))
    return vp.mu + vp.sigma * eps


def predictive_moments(vp: VariationalParams, topology: BnnTopology, X, S: int = 64, seed=0,
                       scaling: OutputScaling | None = None, bank=None, return_parts: bool = False):
    """Moment-matched predictive for a batch of inputs X (B, d).

    One bank of ``S`` weight draws (fixed by ``seed``) is shared across the
    batch. Returns means (B, n) and covariances (B, n, n); with
    ``return_parts`` also the within-draw and between-draw covariance terms.
    """
    scaling = scaling or OutputScaling.identity(topology.input_dim, topology.n_out)
    X = np.atleast_2d(np.asarray(X, float))
    w = _weight_bank(vp, S, seed) if bank is None else np.asarray(bank, float)
    raw, _ = _mlp(topology, w, scaling.normalize(X))
    mean, L = _head(topology, raw, scaling)
    covs = L @ np.swapaxes(L, -1, -2)
    mbar = mean.mean(axis=0)
    within = covs.mean(axis=0)
    dev = mean - mbar
    between = np.einsum("sbi,sbj->bij", dev, dev) / w.shape[0]
    total = within + between
    total = 0.5 * (total + np.swapaxes(total, -1, -2))
    if return_parts:
        return mbar, total, within, between
    return mbar, total


def posterior_predictive(vp: VariationalParams, topology: BnnTopology, x_star, S: int = 64, seed=0,
                         scaling: OutputScaling | None = None) -> PredictiveGaussian:
    if S < 2:
        raise ValueError("at least two weight draws are needed for moment matching")
    m, c = predictive_moments(vp, topology, np.asarray(x_star, float)[None, :], S, seed, scaling)
    return PredictiveGaussian(m[0], c[0])


# numba version of the predictive for a single input, used inside the
# prognosis filter loop where it runs once per time step


@njit(cache=True)
def bank_moments(bank, sizes, act, xn, out_shift, out_scale, n_out, mean_out, cov_out):
    S = bank.shape[0]
    n_layers = sizes.size - 1
    maxw = 0
    for i in range(sizes.size):
        if sizes[i] > maxw:
            maxw = sizes[i]
    a = np.zeros(maxw)
    z = np.zeros(maxw)
    mus = np.zeros((S, n_out))
    mean_out[:] = 0.0
    cov_out[:, :] = 0.0
    L = np.zeros((n_out, n_out))
    for s in range(S):
        w = bank[s]
        for j in range(sizes[0]):
            a[j] = xn[j]
        pos = 0
        for layer in range(n_layers):
            fi = sizes[layer]
            fo = sizes[layer + 1]
            bpos = pos + fo * fi
            for o in range(fo):
                acc = w[bpos + o]
                for i in range(fi):
                    acc += w[pos + o * fi + i] * a[i]
                z[o] = acc
            pos = bpos + fo
            last = layer == n_layers - 1
            for o in range(fo):
                if last:
                    a[o] = z[o]
                elif act == 0:
                    a[o] = z[o] if z[o] > 0.0 else 0.0
                else:
                    a[o] = np.tanh(z[o])
        for i in range(n_out):
            mus[s, i] = out_shift[i] + out_scale[i] * a[i]
        L[:, :] = 0.0
        k = n_out
        for r in range(n_out):
            for c in range(r + 1):
                v = a[k]
                if r == c:
                    v = max(v, 0.0) + np.log1p(np.exp(-abs(v)))
                L[r, c] = out_scale[r] * v
                k += 1
        for r in range(n_out):
            for c in range(n_out):
                acc = 0.0
                for m in range(min(r, c) + 1):
                    acc += L[r, m] * L[c, m]
                cov_out[r, c] += acc / S
        for i in range(n_out):
            mean_out[i] += mus[s, i] / S
    for s in range(S):
        for r in range(n_out):
            dr = mus[s, r] - mean_out[r]
            for c in range(n_out):
                cov_out[r, c] += dr * (mus[s, c] - mean_out[c]) / S


# ------------------------------------------------------------------ model


@dataclass
class BnnModel:
    """Trained mapping: topology, variational parameters and fixed scalings."""

    topology: BnnTopology
    params: VariationalParams
    scaling: OutputScaling
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def fit(cls, dataset: MapDataset, topology: BnnTopology | None = None, config: TrainConfig | None = None):
        topology = topology or BnnTopology(dataset.inputs.shape[1], n_out=dataset.targets.shape[1])
        res = train(dataset, topology, config)
        return cls(topology, res.params, dataset.scaling, res.loss_trace), res

    def predict(self, X, S: int = 64, seed=0):
        return predictive_moments(self.params, self.topology, X, S, seed, self.scaling)

    def predictive(self, x_star, S: int = 64, seed=0) -> PredictiveGaussian:
        return posterior_predictive(self.params, self.topology, x_star, S, seed, self.scaling)

    def weight_bank(self, S: int, seed):
        return _weight_bank(self.params, S, seed)

    def kernel_args(self):
        """Arrays passed to the numba predictive kernel."""
        t = self.topology
        return (
            np.asarray(t.layer_sizes, dtype=np.int64),
            0 if t.activation == "relu" else 1,
            np.ascontiguousarray(self.scaling.in_shift),
            np.ascontiguousarray(self.scaling.in_scale),
            np.ascontiguousarray(self.scaling.out_shift),
            np.ascontiguousarray(self.scaling.out_scale),
        )

    def to_dict(self):
        return {
            "topology": self.topology.to_dict(),
            "mu": self.params.mu.tolist(),
            "rho": self.params.rho.tolist(),
            "scaling": self.scaling.to_dict(),
            "loss_trace": np.asarray(self.loss_trace).tolist(),
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d):
        return cls(
            BnnTopology.from_dict(d["topology"]),
            VariationalParams(d["mu"], d["rho"]),
            OutputScaling.from_dict(d["scaling"]),
            np.asarray(d.get("loss_trace", []), float),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def write_loss_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace, start=1):
            w.writerow([i, repr(float(v))])
