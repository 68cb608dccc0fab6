"""Reproduction recipes shared by the acceptance suite and the CLI.

Each recipe is a plain function of its seed (and a few sizes) returning a
dict of measured quantities; expensive ones are memoised per process.
"""

from __future__ import annotations

import functools

import numpy as np

from .. import ddpm, prm, vard
from ..rewards import make_reward, reward_preset


@functools.lru_cache(maxsize=None)
def two_branch(seed=0, steps=1000, t=30):
    """Learned value at x_t = 0 under the zero-noise-prediction policy.

    The reverse chain is odd-symmetric, so from x_t = 0 the reward
    1(x_0 > 0) is 0 or 1 with probability 1/2 each.
    """
    sched = ddpm.make_schedule()
    policy = prm.ZeroNoisePredictor(dim=1)
    vnet = prm.ValueNet(dim=1, hidden=(64, 64), seed=seed)
    cfg = prm.ValueTrainConfig(lr=1e-2, steps=steps, batch_size=2048, rollouts_per_step=64,
                               buffer_capacity=16384, lr_floor=0.01, convergence_tol=1e-9)
    prm.pretrain_value(vnet, policy, lambda x, c: (x[:, 0] > 0).astype(np.float64), cfg,
                       np.random.default_rng(seed), sched)
    exact = float(prm.two_branch_value(np.zeros((1, 1)), t, sched)[0])
    return {"value": float(vnet.predict(np.zeros((1, 1)), t, 0)[0]), "exact": exact, "t": t,
            "rollouts": vnet.rollouts}


def tabular_toy(seed=0, T=3, n_levels=5):
    """Max |least squares - enumeration| over all (step, state) cells."""
    chain = prm.discretized_diffusion_chain(T=T, n_levels=n_levels, seed=seed)
    exact, fitted = chain.exact_values(), chain.least_squares_values()
    err = max(float(np.nanmax(np.abs(a - b))) for a, b in zip(exact, fitted))
    return {"max_abs_error": err, "residual_variance": chain.residual_variances().tolist()}


# ---------------------------------------------------------------- fine-tuning recipes

DDPM_STEPS = 2000
VALUE_CFG = dict(lr=3e-3, steps=600, batch_size=512, rollouts_per_step=32,
                 convergence_tol=1e-9, lr_floor=0.01)


@functools.lru_cache(maxsize=None)
def pretrained_ddpm(seed=0, steps=DDPM_STEPS):
    sched = ddpm.make_schedule()
    model = ddpm.Denoiser(seed=seed)
    ddpm.pretrain(model, ddpm.three_mode_mixture(), sched, steps, np.random.default_rng(seed),
                  lr=3e-3)
    return model, sched


def _reward(name, scale=None, group=None):
    spec = reward_preset(name)
    if scale is not None:
        spec.params["scale"] = scale
    if group is not None:
        spec.params["group"] = group
    return make_reward(spec)


@functools.lru_cache(maxsize=None)
def pretrained_value(seed=0, reward="mode-distance", scale=None, steps=None, group=None):
    model, sched = pretrained_ddpm(seed)
    vnet = prm.ValueNet(seed=seed, normalize=True)
    cfg = prm.ValueTrainConfig(**{**VALUE_CFG, **({"steps": steps} if steps else {})})
    prm.pretrain_value(vnet, model, _reward(reward, scale, group), cfg,
                       np.random.default_rng(seed + 1000), sched)
    return vnet


# shared fine-tuning settings: small steps, value refreshed after every update
FINETUNE_CFG = dict(base_lr=3e-4, value_lr=1e-3, refresh_every=1, refresh_steps=5)
MODE_SCALE = 0.02  # each step of the eta grid {0, 1, 10, 100} lands in a distinct regime
GRID_GROUP = 4


@functools.lru_cache(maxsize=None)
def finetune_run(seed=0, method="vard", reward="mode-distance", scale=MODE_SCALE, group=None,
                 k=10, **overrides):
    """One fine-tuning run from the shared pretrained model.

    ``method`` is vard, final-step or random-last-k; ``overrides`` are
    VardConfig fields. Returns (pair, metrics).
    """
    model, sched = pretrained_ddpm(seed)
    pair = vard.PolicyPair.from_pretrained(model, sched)
    reward_fn = _reward(reward, scale, group)
    cfg = vard.VardConfig(**{**FINETUNE_CFG, **overrides})
    rng = np.random.default_rng(seed + 2000)
    if method == "vard":
        vnet = pretrained_value(seed, reward, scale, None, group).copy()
        _, m = vard.finetune(pair, vnet, reward_fn, cfg, rng, seed=seed)
    elif method == "final-step":
        _, m = vard.baseline_final_step(pair, reward_fn, cfg, rng, seed=seed)
    elif method == "random-last-k":
        _, m = vard.baseline_random_last_k(pair, reward_fn, k, cfg, rng, seed=seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    return pair, m
