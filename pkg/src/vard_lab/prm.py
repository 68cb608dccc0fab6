"""Value function (process reward model) trained by Monte-Carlo regression.

V(x_t, t, c) approximates the expected terminal reward of a rollout that
passes through x_t at diffusion index t. With a sparse terminal reward the
sum of future rewards collapses to r(x_0, c), which is the regression target
for every state of a trajectory.
"""

from __future__ import annotations

import copy
import csv
import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Mlp, Tape, Tensor, sinusoidal_time_embedding
from .errors import (ContractError, DimensionError, DivergenceError, NonFiniteError,
                     ScoringError)
from .mdp import ChainBuffer, ReplayBuffer, attach_sparse_reward, minibatch, stack_pairs


class ValueNet:
    """MLP on x + time embedding + context embedding -> scalar.

    With ``normalize`` the net regresses standardised targets and predictions
    are mapped back with the stored mean/std.
    """

    def __init__(self, dim=2, n_contexts=1, T=50, hidden=(64, 64), time_dim=16, ctx_dim=4,
                 activation="tanh", normalize=False, seed=0, r_mean=0.0, r_std=1.0):
        rng = np.random.default_rng(seed)
        self.dim, self.n_contexts, self.T = dim, n_contexts, T
        self.hidden, self.time_dim, self.ctx_dim = tuple(hidden), time_dim, ctx_dim
        self.activation, self.seed = activation, seed
        self.normalize = normalize
        self.r_mean, self.r_std = float(r_mean), float(r_std)
        self.net = Mlp([dim + time_dim + ctx_dim, *hidden, 1], activation, rng=rng, name="value")
        self.context_table = Tensor(rng.normal(0.0, 1.0, (n_contexts, ctx_dim)), True,
                                    "value.context")
        self.train_log = []

    def parameters(self):
        return self.net.parameters() + [self.context_table]

    def config(self):
        return {"dim": self.dim, "n_contexts": self.n_contexts, "T": self.T,
                "hidden": list(self.hidden), "time_dim": self.time_dim, "ctx_dim": self.ctx_dim,
                "activation": self.activation, "normalize": self.normalize, "seed": self.seed,
                "r_mean": self.r_mean, "r_std": self.r_std}

    def copy(self):
        out = copy.deepcopy(self)
        for p in out.parameters():
            p.grad = None
        return out

    def fit_normalizer(self, rewards):
        if self.normalize:
            rewards = np.asarray(rewards, dtype=np.float64)
            self.r_mean = float(rewards.mean())
            self.r_std = float(max(rewards.std(), 1e-6))

    def raw(self, x, t, c, frozen=False):
        """Network output in normalised units, shape (n,)."""
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"expected (n, {self.dim}) input, got {x.shape}")
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        if np.any(t < 0) or np.any(t > self.T):
            raise ContractError(f"value step outside [0, {self.T}]")
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        if ((c < 0) | (c >= self.n_contexts)).any():
            raise ContractError("context index out of range")
        table = self.context_table.detach() if frozen else self.context_table
        temb = sinusoidal_time_embedding(t, self.time_dim)
        h = ad.concat([x, Tensor(temb), ad.take_rows(table, c)], axis=1)
        return self.net(h, frozen=frozen).reshape((n,))

    def __call__(self, x, t, c, frozen=False):
        out = self.raw(x, t, c, frozen)
        if self.normalize:
            out = out * self.r_std + self.r_mean
        return out

    def predict(self, x, t, c):
        return self(np.atleast_2d(x), t, c, frozen=True).data


@dataclass
class ValueTrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 2000
    convergence_tol: float = 1e-4
    window: int = 200
    rollouts_per_step: int = 32
    holdout_fraction: float = 0.1
    buffer_capacity: int = 2048
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    cosine_decay: bool = True
    lr_floor: float = 0.1

    def __post_init__(self):
        for name in ("lr", "batch_size", "steps", "convergence_tol", "window", "rollouts_per_step"):
            if not getattr(self, name) > 0:
                raise ContractError(f"value training {name} must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ContractError("holdout_fraction must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


def value_loss(vnet, batch):
    """Mean squared error between V(state) and the terminal reward.

    ``batch`` is a list of (MdpState, reward) pairs or an (x, t, c, r) tuple of
    arrays with diffusion indices. In normalised mode the error is measured in
    standardised units.
    """
    if isinstance(batch, tuple) and len(batch) == 4 and not isinstance(batch[0], tuple):
        x, t, c, r = batch
    else:
        if len(batch) == 0:
            raise ContractError("value_loss needs a non-empty batch")
        x, t, c, r = stack_pairs(batch, vnet.T)
    if len(r) == 0:
        raise ContractError("value_loss needs a non-empty batch")
    pred = vnet.raw(x, t, c)
    target = (np.asarray(r, dtype=np.float64) - vnet.r_mean) / vnet.r_std
    return ((pred - target) ** 2).mean()


def loss_slope(losses, window):
    """Per-step change between the means of the last two windows (None if too short)."""
    if len(losses) < 2 * window:
        return None
    last = float(np.mean(losses[-window:]))
    prev = float(np.mean(losses[-2 * window:-window]))
    return (last - prev) / window


def rollout_chains(model, reward_fn, n, sched, rng, contexts=None):
    """Batched rollouts plus terminal rewards: (states (T+1, n, d), contexts, rewards)."""
    from .ddpm import sample_chain

    if contexts is None:
        contexts = rng.integers(0, model.n_contexts, n)
    states = sample_chain(model, contexts, sched, rng)
    rewards = np.asarray(reward_fn(states[-1], contexts), dtype=np.float64).reshape(n)
    if not np.isfinite(rewards).all():
        raise ScoringError("reward function returned non-finite values")
    return states, contexts, rewards


def rollout_scored(model, reward_fn, n, sched, rng, contexts=None):
    """Sample ``n`` scored :class:`Trajectory` records from ``model``."""
    from .ddpm import chain_to_trajectories

    states, contexts, rewards = rollout_chains(model, reward_fn, n, sched, rng, contexts)
    trajs = chain_to_trajectories(states, contexts)
    return [attach_sparse_reward(tr, lambda x, c, r=r: r) for tr, r in zip(trajs, rewards)]


def _draw(buffer, batch_size, rng, T):
    if isinstance(buffer, ChainBuffer):
        return buffer.sample(batch_size, rng)
    return stack_pairs(minibatch(buffer, batch_size, rng), T)


def _regress(vnet, opt, buffer, rng, batch_size):
    batch = _draw(buffer, batch_size, rng, vnet.T)
    opt.zero_grad()
    with Tape() as tape:
        loss = value_loss(vnet, batch)
    tape.backward(loss)
    opt.step()
    return loss.item()


def lr_at(cfg, step):
    if not cfg.cosine_decay:
        return cfg.lr
    f = cfg.lr_floor
    return cfg.lr * (f + (1 - f) * 0.5 * (1 + math.cos(math.pi * step / cfg.steps)))


def pretrain_value(vnet, model, reward_fn, cfg, rng, sched=None, log=None):
    """Monte-Carlo value regression on rollouts of the frozen pretrained model.

    Each step samples fresh contexts and rollouts, scores them, routes every
    ``1/holdout_fraction``-th trajectory to a held-out buffer, and takes one
    Adam step on a uniform (trajectory, step) minibatch. Stops at
    ``cfg.steps`` or when the windowed loss slope falls below
    ``cfg.convergence_tol``. The (step, train_loss, holdout_loss) curve is kept
    on ``vnet.train_log``; ``vnet.rollouts`` counts scored rollouts.
    """
    from .ddpm import make_schedule

    sched = sched or make_schedule(vnet.T)
    if sched.T != vnet.T:
        raise ContractError("value net and schedule disagree on T")
    train = ChainBuffer(cfg.buffer_capacity, vnet.T, vnet.dim)
    holdout = ChainBuffer(cfg.buffer_capacity, vnet.T, vnet.dim)
    hold_rng = np.random.default_rng(rng.integers(2 ** 63))
    opt = Adam(vnet.parameters(), cfg.lr, weight_decay=cfg.weight_decay,
               max_grad_norm=cfg.max_grad_norm)
    every = int(round(1.0 / cfg.holdout_fraction)) if cfg.holdout_fraction > 0 else 0
    losses, seen = [], 0
    vnet.train_log = []
    for step in range(cfg.steps):
        opt.lr = lr_at(cfg, step)
        states, contexts, rewards = rollout_chains(model, reward_fn, cfg.rollouts_per_step,
                                                   sched, rng)
        ids = seen + 1 + np.arange(len(rewards))
        seen += len(rewards)
        hold = (ids % every == 0) if every else np.zeros(len(rewards), dtype=bool)
        if hold.any():
            holdout.add_chains(states[:, hold], contexts[hold], rewards[hold])
        train.add_chains(states[:, ~hold], contexts[~hold], rewards[~hold])
        if step == 0:
            vnet.fit_normalizer(rewards)
        try:
            loss = _regress(vnet, opt, train, rng, cfg.batch_size)
        except NonFiniteError as exc:
            raise DivergenceError(f"value pretraining diverged: {exc}", None, step) from None
        losses.append(loss)
        held = float("nan")
        if len(holdout):
            held = value_loss(vnet, holdout.sample(cfg.batch_size, hold_rng)).item()
        vnet.train_log.append((step, loss, held))
        if log is not None:
            log(step, loss, held)
        slope = loss_slope(losses, cfg.window)
        if slope is not None and abs(slope) < cfg.convergence_tol:
            break
    vnet.rollouts = seen
    vnet.holdout = holdout
    return vnet


def refresh_value(vnet, trajectories, k_steps, rng, lr=1e-4, batch_size=256, optimizer=None):
    """``k_steps`` regression steps on fresh trajectories only.

    ``trajectories`` is a list of scored :class:`Trajectory` or a
    :class:`ChainBuffer`. Pass a persistent ``optimizer`` to keep Adam moments
    across refreshes.
    """
    if k_steps <= 0:
        return vnet
    buf = trajectories
    if not isinstance(buf, ChainBuffer):
        buf = ReplayBuffer(max(1, len(trajectories)))
        buf.extend(trajectories)
    opt = optimizer or Adam(vnet.parameters(), lr, weight_decay=0.0)
    for _ in range(k_steps):
        _regress(vnet, opt, buf, rng, batch_size)
    return vnet


def write_loss_curve(path, log):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "holdout_loss"])
        for step, a, b in log:
            w.writerow([step, repr(float(a)), repr(float(b))])


# ---------------------------------------------------------------- enumerable toys

class DiscreteChain:
    """Finite-state chain x_T -> ... -> x_0 with explicit transition tables.

    ``init`` is the distribution of x_T over ``levels``; ``kernels[k]`` is the
    row-stochastic matrix for MDP step k (diffusion index T-k -> T-k-1);
    ``reward`` maps each terminal level to a scalar.
    """

    def __init__(self, levels, init, kernels, reward):
        self.levels = np.asarray(levels, dtype=np.float64)
        self.init = np.asarray(init, dtype=np.float64)
        self.kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
        self.reward = np.asarray(reward, dtype=np.float64)
        n = len(self.levels)
        if self.init.shape != (n,) or self.reward.shape != (n,):
            raise DimensionError("init/reward must match the number of levels")
        for k in self.kernels:
            if k.shape != (n, n) or np.any(k < 0) or not np.allclose(k.sum(axis=1), 1.0):
                raise ContractError("kernels must be row-stochastic")

    @property
    def T(self):
        return len(self.kernels)

    def exact_values(self):
        """values[k][i] = E[r(x_0) | state i at MDP step k], by backward recursion."""
        values = [None] * (self.T + 1)
        values[self.T] = self.reward.copy()
        for k in range(self.T - 1, -1, -1):
            values[k] = self.kernels[k] @ values[k + 1]
        return values

    def paths(self):
        """All (path, probability) pairs with non-zero probability."""
        n = len(self.levels)
        for path in itertools.product(range(n), repeat=self.T + 1):
            p = self.init[path[0]]
            for k in range(self.T):
                p *= self.kernels[k][path[k], path[k + 1]]
            if p > 0:
                yield path, p

    def least_squares_values(self, samples=None):
        """Tabular least-squares fit of the value loss.

        Without ``samples`` every path is weighted by its exact probability (the
        population optimum); otherwise ``samples`` is a list of sampled paths
        with unit weight. Each (step, state) gets a one-hot feature; states never
        visited come back as NaN.
        """
        n = len(self.levels)
        rows, targets, weights = [], [], []
        source = self.paths() if samples is None else ((p, 1.0) for p in samples)
        for path, w in source:
            r = self.reward[path[-1]]
            for k, i in enumerate(path):
                rows.append(k * n + i)
                targets.append(r)
                weights.append(w)
        m = (self.T + 1) * n
        A = np.zeros((len(rows), m))
        A[np.arange(len(rows)), rows] = 1.0
        sw = np.sqrt(np.asarray(weights))
        visited = A.T @ np.asarray(weights) > 0
        sol = np.full(m, np.nan)
        sol[visited] = np.linalg.lstsq(A[:, visited] * sw[:, None],
                                       np.asarray(targets) * sw, rcond=None)[0]
        return [sol[k * n:(k + 1) * n] for k in range(self.T + 1)]

    def residual_variances(self):
        """E[(r - V_k(x_k))^2] for each MDP step k, by enumeration."""
        values = self.exact_values()
        out = np.zeros(self.T + 1)
        for path, p in self.paths():
            r = self.reward[path[-1]]
            for k, i in enumerate(path):
                out[k] += p * (r - values[k][i]) ** 2
        return out

    def sample_paths(self, n, rng):
        paths = []
        for _ in range(n):
            i = int(rng.choice(len(self.levels), p=self.init))
            path = [i]
            for k in range(self.T):
                i = int(rng.choice(len(self.levels), p=self.kernels[k][i]))
                path.append(i)
            paths.append(tuple(path))
        return paths


def discretized_diffusion_chain(T=3, n_levels=5, spread=1.0, seed=0):
    """1-D diffusion on a grid: Gaussian-shaped shrink-and-noise kernels.

    Levels are evenly spaced in [-2, 2]; each step maps x to a Gaussian
    around ``0.8 x`` (plus a seeded drift) restricted to the grid and
    renormalised. The reward is a seeded random vector so the values are not
    symmetric by accident.
    """
    rng = np.random.default_rng(seed)
    levels = np.linspace(-2.0, 2.0, n_levels)
    kernels = []
    for _ in range(T):
        drift = rng.uniform(-0.3, 0.3)
        logits = -((levels[None, :] - (0.8 * levels[:, None] + drift)) ** 2) / (2 * spread ** 2)
        k = np.exp(logits)
        kernels.append(k / k.sum(axis=1, keepdims=True))
    init = np.exp(-levels ** 2 / 2)
    return DiscreteChain(levels, init / init.sum(), kernels, rng.normal(size=n_levels))


class ZeroNoisePredictor:
    """Denoiser stand-in that predicts eps = 0 for every input.

    The reverse mean is then x_t / sqrt(alpha_t), an odd function of x_t,
    so any rollout from x_t = 0 ends with a symmetric x_0 distribution.
    """

    def __init__(self, dim=1, n_contexts=1):
        self.dim, self.n_contexts = dim, n_contexts
        self.null_context = n_contexts

    def guided(self, x, t, c, guidance=1.0, frozen=False):
        return Tensor(np.zeros(ad.as_tensor(x).shape))

    __call__ = guided

    def parameters(self):
        return []


def two_branch_value(x_t, t, sched, coord=0):
    """Exact P(x_0[coord] > 0 | x_t) under :class:`ZeroNoisePredictor`.

    x_0 = x_t / sqrt(alpha_bar_t) + Gaussian with the accumulated variance of
    the scaled sigma_s noise terms (no noise at s = 1).
    """
    from scipy.stats import norm

    scale, var = 1.0, 0.0
    for s in range(t, 0, -1):
        scale /= math.sqrt(sched.alpha[s])
        var /= sched.alpha[s]
        if s > 1:
            var += sched.sigma2[s]
    x = np.atleast_2d(x_t)[:, coord] * scale
    if var == 0.0:
        return (x > 0).astype(np.float64)
    return norm.cdf(x / math.sqrt(var))
