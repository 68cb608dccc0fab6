"""DDPM on low-dimensional Euclidean data.

Schedule arrays are padded at index 0 so that ``sched.beta[t]`` reads like
the maths for t = 1..T, with ``alpha_bar[0] = 1``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Mlp, Tape, Tensor, sinusoidal_time_embedding
from .errors import (ContractError, DimensionError, DivergenceError, NonFiniteError,
                     SamplingError, ScheduleError)
from .mdp import Trajectory


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    variance: str = "beta_tilde"

    @property
    def sigma2(self):
        return self.beta_tilde if self.variance == "beta_tilde" else self.beta

    def sigma(self, t):
        return math.sqrt(self.sigma2[t])

    def with_variance(self, variance):
        if variance not in ("beta", "beta_tilde"):
            raise ContractError(f"unknown variance choice {variance!r}")
        return NoiseSchedule(self.T, self.kind, self.beta, self.alpha, self.alpha_bar,
                             self.beta_tilde, variance)


def make_schedule(T=50, kind="linear", beta_min=1e-3, beta_max=0.2, variance="beta_tilde"):
    if T < 2:
        raise ContractError("need at least two diffusion steps")
    if not 0 < beta_min < beta_max < 1:
        raise ContractError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T)
    elif kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ContractError(f"unknown schedule kind {kind!r}")
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if alpha_bar[T] >= 0.01:
        raise ScheduleError(
            f"alpha_bar_T = {alpha_bar[T]:.4f} >= 0.01; increase beta_max or T so x_T is near N(0, I)")
    beta_tilde = np.zeros(T + 1)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(T, kind, beta, alpha, alpha_bar, beta_tilde).with_variance(variance)


# ---------------------------------------------------------------- data

@dataclass
class Mixture:
    weights: list
    means: list
    stds: list


@dataclass
class DataConfig:
    kind: str = "mixture"
    dim: int = 2
    contexts: list = field(default_factory=list)

    def __post_init__(self):
        self.contexts = [m if isinstance(m, Mixture) else Mixture(**m) for m in self.contexts]
        if self.kind not in ("mixture", "spiral", "checkerboard"):
            raise ContractError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "mixture" and self.dim != 2:
            raise ContractError(f"{self.kind} data is two-dimensional")
        for m in self.contexts:
            if abs(sum(m.weights) - 1.0) > 1e-9:
                raise ContractError("mixture weights must sum to 1")
            if any(s <= 0 for s in m.stds):
                raise ContractError("component standard deviations must be positive")
            if any(len(mu) != self.dim for mu in m.means):
                raise DimensionError("component mean has wrong dimension")

    @property
    def n_contexts(self):
        return max(1, len(self.contexts))

    def to_dict(self):
        return asdict(self)


def three_mode_mixture(radius=2.0, std=0.25):
    angles = np.deg2rad([90.0, 210.0, 330.0])
    means = [[radius * math.cos(a), radius * math.sin(a)] for a in angles]
    return DataConfig("mixture", 2, [Mixture([1 / 3, 1 / 3, 1 / 3], means, [std] * 3)])


def two_mode_conditional(offset=2.0, std=0.3):
    return DataConfig("mixture", 2, [Mixture([1.0], [[-offset, 0.0]], [std]),
                                     Mixture([1.0], [[offset, 0.0]], [std])])


def sample_data(cfg, n, rng, context=None):
    """Draw ``n`` points; returns (x, c) with contexts uniform unless fixed."""
    if context is None:
        c = rng.integers(0, cfg.n_contexts, n)
    else:
        c = np.full(n, int(context))
    if cfg.kind == "spiral":
        u = np.sqrt(rng.uniform(0, 1, n)) * 3 * math.pi
        x = np.stack([u * np.cos(u), u * np.sin(u)], axis=1) / (math.pi) + 0.1 * rng.standard_normal((n, 2))
        return x, c
    if cfg.kind == "checkerboard":
        x1 = rng.uniform(-2, 2, n)
        x2 = rng.uniform(-2, 0, n) + 2 * (np.floor(x1) % 2)
        return np.stack([x1, x2], axis=1), c
    x = np.empty((n, cfg.dim))
    for k, mix in enumerate(cfg.contexts):
        idx = np.flatnonzero(c == k)
        comp = rng.choice(len(mix.weights), size=idx.size, p=mix.weights)
        means = np.asarray(mix.means)[comp]
        stds = np.asarray(mix.stds)[comp][:, None]
        x[idx] = means + stds * rng.standard_normal((idx.size, cfg.dim))
    return x, c


# ---------------------------------------------------------------- model

class Denoiser:
    """Noise predictor eps(x_t, t, c); context slot ``n_contexts`` is the null context."""

    def __init__(self, dim=2, n_contexts=1, hidden=(64, 64), time_dim=16, ctx_dim=4,
                 activation="tanh", seed=0):
        rng = np.random.default_rng(seed)
        self.dim, self.n_contexts = dim, n_contexts
        self.hidden, self.time_dim, self.ctx_dim = tuple(hidden), time_dim, ctx_dim
        self.activation, self.seed = activation, seed
        self.net = Mlp([dim + time_dim + ctx_dim, *hidden, dim], activation, rng=rng, name="eps")
        self.context_table = Tensor(rng.normal(0.0, 1.0, (n_contexts + 1, ctx_dim)), True,
                                    "eps.context")

    @property
    def null_context(self):
        return self.n_contexts

    def parameters(self):
        return self.net.parameters() + [self.context_table]

    def config(self):
        return {"dim": self.dim, "n_contexts": self.n_contexts, "hidden": list(self.hidden),
                "time_dim": self.time_dim, "ctx_dim": self.ctx_dim,
                "activation": self.activation, "seed": self.seed}

    def copy(self):
        out = copy.deepcopy(self)
        for p in out.parameters():
            p.grad = None
        return out

    def __call__(self, x, t, c, frozen=False):
        x = ad.as_tensor(x)
        n = x.shape[0]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"expected (n, {self.dim}) input, got {x.shape}")
        temb = sinusoidal_time_embedding(np.broadcast_to(t, (n,)), self.time_dim)
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        if ((c < 0) | (c > self.n_contexts)).any():
            raise ContractError("context index out of range")
        table = self.context_table.detach() if frozen else self.context_table
        h = ad.concat([x, Tensor(temb), ad.take_rows(table, c)], axis=1)
        return self.net(h, frozen=frozen)

    def guided(self, x, t, c, guidance=1.0, frozen=False):
        """Classifier-free mix; ``guidance == 1`` is the pure conditional prediction."""
        cond = self(x, t, c, frozen)
        if guidance == 1.0:
            return cond
        uncond = self(x, t, self.null_context, frozen)
        return uncond + guidance * (cond - uncond)


def forward_noising(x0, t, noise, sched):
    """Closed-form draw from q(x_t | x_0); t = 0 returns x0."""
    if not 0 <= t <= sched.T:
        raise ContractError(f"t={t} outside [0, {sched.T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise DimensionError("noise and x0 shapes differ")
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def noising_batch(x0, t, noise, sched):
    ab = sched.alpha_bar[np.asarray(t)][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def _shape(x):
    return x.shape if isinstance(x, Tensor) else np.shape(x)


def posterior_mean(x_t, t, eps_hat, sched):
    """mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)."""
    if not 1 <= t <= sched.T:
        raise ContractError(f"t={t} outside [1, {sched.T}]")
    if _shape(x_t) != _shape(eps_hat):
        raise DimensionError(f"x_t {_shape(x_t)} and eps {_shape(eps_hat)} differ")
    coef = sched.beta[t] / math.sqrt(1.0 - sched.alpha_bar[t])
    return (x_t - coef * eps_hat) * (1.0 / math.sqrt(sched.alpha[t]))


def reverse_step(model, x_t, t, c, sched, rng, noise=None, sigma=None, guidance=1.0,
                 frozen=False):
    """One ancestral step. Returns (x_{t-1}, mu) as tensors.

    The last step (t = 1) returns the mean without noise. ``sigma`` overrides
    the schedule's standard deviation.
    """
    try:
        eps = model.guided(x_t, t, c, guidance, frozen)
    except NonFiniteError as exc:
        raise SamplingError(f"denoiser produced non-finite output: {exc}", t) from None
    mu = posterior_mean(x_t, t, eps, sched)
    s = sched.sigma(t) if sigma is None else sigma
    if t == 1 or s == 0.0:
        return mu, mu
    z = rng.standard_normal(mu.shape) if noise is None else noise
    return mu + s * z, mu


def sample_chain(model, contexts, sched, rng, guidance=1.0, record_means=False):
    """Batched ancestral sampling. Returns states (T+1, n, d) ordered x_T ... x_0."""
    contexts = np.asarray(contexts, dtype=np.int64)
    n = contexts.shape[0]
    states = np.empty((sched.T + 1, n, model.dim))
    means = np.empty((sched.T, n, model.dim)) if record_means else None
    x = rng.standard_normal((n, model.dim))
    states[0] = x
    for k, t in enumerate(range(sched.T, 0, -1)):
        x_prev, mu = reverse_step(model, x, t, contexts, sched, rng, guidance=guidance)
        x = x_prev.data
        states[k + 1] = x
        if record_means:
            means[k] = mu.data
    return (states, means) if record_means else states


def sample(model, n, sched, rng, contexts=None, guidance=1.0):
    """Terminal samples only."""
    if contexts is None:
        contexts = rng.integers(0, model.n_contexts, n)
    return sample_chain(model, contexts, sched, rng, guidance)[-1]


def sample_trajectory(model, c, sched, rng):
    states, means = sample_chain(model, [c], sched, rng, record_means=True)
    return Trajectory.from_chain(states[:, 0], c, means[:, 0])


def chain_to_trajectories(states, contexts, means=None):
    return [Trajectory.from_chain(states[:, i], int(c), None if means is None else means[:, i])
            for i, c in enumerate(contexts)]


def noise_prediction_loss(model, x0, c, sched, rng, p_uncond=0.1):
    n = x0.shape[0]
    t = rng.integers(1, sched.T + 1, n)
    noise = rng.standard_normal(x0.shape)
    x_t = noising_batch(x0, t, noise, sched)
    c = np.where(rng.uniform(size=n) < p_uncond, model.null_context, c)
    eps = model(x_t, t, c)
    return ((eps - noise) ** 2).sum(axis=1).mean()


def pretrain(model, data, sched, steps, rng, batch_size=256, lr=2e-3, p_uncond=0.1,
             weight_decay=0.0, seed=None, callback=None):
    """Noise-prediction regression with random context dropout.

    Returns the per-step loss history. The learning rate decays on a cosine
    to 10% of ``lr``.
    """
    opt = Adam(model.parameters(), lr, weight_decay=weight_decay)
    losses = []
    for step in range(steps):
        opt.lr = lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / max(1, steps))))
        x0, c = sample_data(data, batch_size, rng)
        opt.zero_grad()
        try:
            with Tape() as tape:
                loss = noise_prediction_loss(model, x0, c, sched, rng, p_uncond)
            tape.backward(loss)
            opt.step()
        except NonFiniteError as exc:
            raise DivergenceError(f"pretraining diverged: {exc}", seed, step) from None
        losses.append(loss.item())
        if callback is not None:
            callback(step, losses[-1])
    return losses


def variational_kl(model, x0, c, sched, rng):
    """Diagnostic sum over t >= 2 of KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t)), batch mean."""
    n, d = x0.shape
    total = np.zeros(n)
    for t in range(2, sched.T + 1):
        x_t = forward_noising(x0, t, rng.standard_normal(x0.shape), sched)
        ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
        mu_q = (math.sqrt(ab_prev) * sched.beta[t] / (1 - ab) * x0
                + math.sqrt(sched.alpha[t]) * (1 - ab_prev) / (1 - ab) * x_t)
        var_q = sched.beta_tilde[t]
        mu_p = posterior_mean(x_t, t, model(x_t, t, c).data, sched)
        var_p = sched.sigma2[t]
        total += 0.5 * (d * var_q / var_p - d + np.sum((mu_q - mu_p) ** 2, axis=1) / var_p
                        + d * math.log(var_p / var_q))
    return float(total.mean())
