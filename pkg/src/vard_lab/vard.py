"""Value-guided fine-tuning with a pairwise-sample KL anchor, plus baselines.

At every reverse step inside the fine-tune window the current model and the
frozen reference each propose x_{t-1} from the same x_t. The loss is

    -V(x_{t-1}, t-1, c) + eta * ||x_{t-1} - x0_{t-1}||^2

with x_{t-1} reparameterised through the current model's mean. For Gaussian
kernels with a shared variance the gradient of E||x - x0||^2 is 2 sigma^2
times the gradient of KL(p_theta || p_theta0), which is what
:func:`check_lemma1` measures.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .ddpm import reverse_step, sample_chain
from .errors import ContractError, DivergenceError, NonFiniteError, SamplingError
from .harness.metrics import MetricsWriter, random_directions, sliced_wasserstein
from .mdp import ChainBuffer
from .prm import refresh_value

METRIC_COLUMNS = ["step", "scored_rollouts", "mean_reward", "mean_value", "kl_surrogate",
                  "param_drift", "prior_drift"]


@dataclass
class VardConfig:
    eta: float = 1.0
    finetune_window: tuple | None = None  # diffusion steps; None = last 10
    base_lr: float = 1e-3
    value_lr: float = 1e-4
    grad_accum: int = 1
    steps: int = 100
    batch_size: int = 64
    shared_noise: bool = True
    value_on_mean: bool = False
    refresh_every: int = 10
    refresh_steps: int = 5
    refresh_batch: int = 256
    refresh_capacity: int = 512
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    guidance: float = 1.0
    eval_every: int = 0
    eval_samples: int = 4096
    eval_seed: int = 0
    n_projections: int = 64
    target_reward: float | None = None

    def __post_init__(self):
        if not self.eta >= 0:
            raise ContractError(f"eta must be >= 0, got {self.eta}")
        if self.finetune_window is not None:
            self.finetune_window = tuple(sorted(int(t) for t in self.finetune_window))
            if not self.finetune_window or self.finetune_window[0] < 1:
                raise ContractError("finetune_window must be a non-empty subset of [1, T]")
        for name in ("base_lr", "grad_accum", "batch_size"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.steps < 0 or self.refresh_every < 0 or self.refresh_steps < 0:
            raise ContractError("step counts must be non-negative")
        self.betas = tuple(self.betas)

    def window(self, T):
        w = self.finetune_window or tuple(range(1, min(10, T) + 1))
        if w[-1] > T:
            raise ContractError(f"finetune_window reaches {w[-1]} > T={T}")
        return frozenset(w)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        if self.finetune_window is not None:
            d["finetune_window"] = list(self.finetune_window)
        return d


def fingerprint(params):
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


class PolicyPair:
    """Trainable model and a frozen copy of the pretrained reference."""

    def __init__(self, theta, theta0, sched):
        if theta is theta0:
            raise ContractError("theta and theta0 must be distinct objects")
        if theta.dim != theta0.dim or theta.n_contexts != theta0.n_contexts:
            raise ContractError("theta and theta0 differ in dimensions")
        self.theta, self.theta0, self.sched = theta, theta0, sched
        for p in theta0.parameters():
            p.requires_grad = False
        self.reference_hash = fingerprint(theta0.parameters())

    @classmethod
    def from_pretrained(cls, model, sched):
        return cls(model.copy(), model.copy(), sched)

    def reference_intact(self):
        return fingerprint(self.theta0.parameters()) == self.reference_hash

    def param_drift(self):
        return math.sqrt(sum(float(np.sum((p.data - q.data) ** 2))
                             for p, q in zip(self.theta.parameters(), self.theta0.parameters())))


def _paired_step(pair, x, t, c, rng, shared_noise=True, guidance=1.0):
    """Draw x ~ p_theta(.|x_t) (differentiable) and x0 ~ p_theta0(.|x_t).

    Returns (x, x0, mu, mu0). Noise is drawn once when shared, otherwise
    first for theta and then for theta0; no noise at t = 1.
    """
    sched = pair.sched
    if not 1 <= t <= sched.T:
        raise ContractError(f"t={t} outside [1, {sched.T}]")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    sigma = sched.sigma(t) if t > 1 else 0.0
    z = rng.standard_normal(x.shape) if sigma > 0 else None
    z0 = z if shared_noise or z is None else rng.standard_normal(x.shape)
    x_new, mu = reverse_step(pair.theta, x, t, c, pair.sched, rng, noise=z, sigma=sigma,
                             guidance=guidance)
    x_ref, mu0 = reverse_step(pair.theta0, x, t, c, pair.sched, rng, noise=z0, sigma=sigma,
                              guidance=guidance, frozen=True)
    return x_new, x_ref.data, mu, mu0.data


def _sq_dist(a, b):
    return ((a - b) ** 2).sum(axis=1).mean()


def kl_surrogate(pair, x, t, c, rng, shared_noise=True):
    """Batch mean of ||x - x0||^2 for paired draws from the two kernels."""
    x_new, x_ref, _, _ = _paired_step(pair, x, t, c, rng, shared_noise)
    return _sq_dist(x_new, x_ref)


def _vard_terms(pair, vnet, x, t, c, eta, rng, shared_noise=True, value_on_mean=False,
                guidance=1.0):
    x_new, x_ref, mu, _ = _paired_step(pair, x, t, c, rng, shared_noise, guidance)
    kl = _sq_dist(x_new, x_ref)
    v = vnet(mu if value_on_mean else x_new, t - 1, c, frozen=True)
    loss = -v.mean() + eta * kl if eta else -v.mean()
    return loss, x_new, kl.item(), float(np.mean(v.data))


def vard_loss(pair, vnet, x, t, c, eta, rng, shared_noise=True, value_on_mean=False):
    """-V(x_{t-1}) + eta * ||x_{t-1} - x0_{t-1}||^2 (batch mean).

    The value is queried at diffusion index t-1 with frozen parameters, so
    gradients reach only the trainable model.
    """
    return _vard_terms(pair, vnet, x, t, c, eta, rng, shared_noise, value_on_mean)[0]


# ---------------------------------------------------------------- KL-gradient identity

def gaussian_kl(mu, mu0, sigma):
    """KL(N(mu, s^2 I) || N(mu0, s^2 I)) for tensors or arrays."""
    return ((mu - mu0) ** 2).sum() * (1.0 / (2.0 * sigma ** 2))


def check_lemma1(d, sigma, family, psi0, mu0=None, n_samples=100_000, rng=None,
                 shared_noise=False):
    """Compare the Monte-Carlo gradient of E||x - x0||^2 with 2 sigma^2 grad KL.

    ``family(psi)`` maps a scalar tensor to the mean vector (tensor of length
    d); the reference mean ``mu0`` defaults to zero. x = mu(psi) + sigma z and
    x0 = mu0 + sigma z0 with independent z, z0 unless ``shared_noise``.
    """
    rng = np.random.default_rng(rng)
    mu0 = np.zeros(d) if mu0 is None else np.asarray(mu0, dtype=np.float64)
    z = rng.standard_normal((n_samples, d))
    z0 = z if shared_noise else rng.standard_normal((n_samples, d))
    psi = Tensor(np.asarray(psi0, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        mu = family(psi)
        x = mu.reshape((1, d)) + sigma * z
        mse = ((x - (mu0 + sigma * z0)) ** 2).sum(axis=1).mean()
    mc_grad = float(tape.backward(mse, [psi])[0])
    psi = Tensor(np.asarray(psi0, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        kl = gaussian_kl(family(psi), mu0, sigma)
    kl_grad = float(tape.backward(kl, [psi])[0])
    expected = 2.0 * sigma ** 2
    ratio = mc_grad / kl_grad if kl_grad != 0 else float("nan")
    return {"d": d, "sigma": sigma, "psi": float(psi0), "mc_grad": mc_grad, "kl_grad": kl_grad,
            "ratio": ratio, "expected_ratio": expected,
            "rel_error": abs(ratio / expected - 1.0) if kl_grad != 0 else float("nan"),
            "mse": mse.item(), "kl": kl.item()}


def random_gaussian_family(rng, d=None, sigma=None):
    """Quadratic mean family mu(psi) = a psi + b psi^2 + c with a reference mean
    placed at least one sigma away along the family's tangent, so that the
    KL gradient is well away from zero."""
    d = int(rng.integers(1, 6)) if d is None else d
    sigma = float(rng.uniform(0.3, 2.0)) if sigma is None else sigma
    a, b, c = rng.normal(size=d), rng.normal(size=d) * 0.5, rng.normal(size=d)
    psi0 = float(rng.uniform(-1, 1))
    mu_at = a * psi0 + b * psi0 ** 2 + c
    tangent = a + 2 * b * psi0
    tangent /= np.linalg.norm(tangent)
    offset = rng.uniform(1.0, 2.0) * sigma * tangent
    if d > 1:
        ortho = rng.normal(size=d)
        ortho -= ortho @ tangent * tangent
        offset = offset + 0.5 * sigma * ortho / max(np.linalg.norm(ortho), 1e-12)
    mu0 = mu_at - offset

    def family(psi):
        return psi * Tensor(a) + (psi * psi) * Tensor(b) + Tensor(c)

    return {"d": d, "sigma": sigma, "family": family, "psi0": psi0, "mu0": mu0}


# ---------------------------------------------------------------- fine-tuning loops

@dataclass
class FinetuneMetrics:
    rows: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (step, scored_rollouts, eval_reward, prior_drift)
    pretrained_reward: float = float("nan")

    def writer(self):
        w = MetricsWriter(METRIC_COLUMNS)
        for row in self.rows:
            w.add(**row)
        return w

    def to_csv(self):
        return self.writer().to_csv()

    def rollouts_to_reach(self, threshold):
        """Scored rollouts at the first evaluation whose reward reaches ``threshold``."""
        for _, scored, r, _ in self.evals:
            if r >= threshold:
                return scored
        return None


class _Evaluator:
    """Reward and prior drift on a fixed batch of common random numbers.

    Both models are sampled with identical initial noise and per-step noise,
    so the drift is exactly zero while theta == theta0.
    """

    def __init__(self, pair, reward_fn, cfg):
        self.pair, self.reward_fn, self.cfg = pair, reward_fn, cfg
        rng = np.random.default_rng(cfg.eval_seed)
        self.contexts = rng.integers(0, pair.theta.n_contexts, cfg.eval_samples)
        self.seed = int(rng.integers(2 ** 63))
        self.directions = random_directions(cfg.n_projections, pair.theta.dim, rng)
        self.ref = self._sample(pair.theta0)
        self.ref_reward = self.score(self.ref)
        self.last = (self.ref_reward, 0.0)

    def _sample(self, model):
        rng = np.random.default_rng(self.seed)
        return sample_chain(model, self.contexts, self.pair.sched, rng, self.cfg.guidance)[-1]

    def score(self, x):
        """Mean reward over chunks of the training batch size, so batch-level
        rewards see the same group size as during training."""
        b = self.cfg.batch_size
        return float(np.mean(np.concatenate([
            np.asarray(self.reward_fn(x[i:i + b], self.contexts[i:i + b]), dtype=np.float64)
            for i in range(0, len(x), b)])))

    def __call__(self):
        x = self._sample(self.pair.theta)
        r = self.score(x)
        drift = sliced_wasserstein(x, self.ref, directions=self.directions)
        self.last = (r, drift)
        return r, drift


def _require_differentiable(reward_fn):
    if not getattr(reward_fn, "differentiable", False) or not hasattr(reward_fn, "tensor"):
        kind = getattr(reward_fn, "kind", type(reward_fn).__name__)
        raise ContractError(
            f"reward {kind!r} is not differentiable; backpropagation baselines need a "
            "differentiable reward (use value-guided fine-tuning instead)")


def _loop(pair, reward_fn, cfg, rng, batch_loss, seed=None, after_update=None):
    """Shared optimiser / metrics loop.

    ``batch_loss(c, scale)`` accumulates gradients for one rollout batch and
    returns (rewards, mean_value, kl). ``after_update(step)`` runs after each
    optimiser step.
    """
    opt = Adam(pair.theta.parameters(), cfg.base_lr, cfg.betas, cfg.adam_eps,
               cfg.weight_decay, cfg.max_grad_norm)
    metrics = FinetuneMetrics()
    evaluator = _Evaluator(pair, reward_fn, cfg) if cfg.eval_every else None
    if evaluator is not None:
        metrics.pretrained_reward = evaluator.ref_reward
        metrics.evals.append((0, 0, evaluator.ref_reward, 0.0))
    scored = 0
    for step in range(1, cfg.steps + 1):
        opt.zero_grad()
        rewards, values, kls = [], [], []
        try:
            for _ in range(cfg.grad_accum):
                c = rng.integers(0, pair.theta.n_contexts, cfg.batch_size)
                r, v, kl = batch_loss(c, 1.0 / cfg.grad_accum)
                rewards.append(r)
                values.append(v)
                kls.append(kl)
                scored += len(r)
            opt.step()
        except (NonFiniteError, SamplingError) as exc:
            raise DivergenceError(f"fine-tuning diverged: {exc}", seed, step) from None
        if after_update is not None:
            after_update(step)
        if evaluator is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
            metrics.evals.append((step, scored, *evaluator()))
        metrics.rows.append({
            "step": step, "scored_rollouts": scored,
            "mean_reward": float(np.mean(np.concatenate(rewards))),
            "mean_value": float(np.mean(values)), "kl_surrogate": float(np.mean(kls)),
            "param_drift": pair.param_drift(),
            "prior_drift": evaluator.last[1] if evaluator is not None else 0.0})
        if (cfg.target_reward is not None and metrics.evals and metrics.evals[-1][0] == step
                and metrics.evals[-1][2] >= cfg.target_reward):
            break
    return pair.theta, metrics


def finetune(pair, vnet, reward_fn, cfg, rng, seed=None):
    """Value-guided fine-tuning. Mutates ``pair.theta`` and (through refreshes) ``vnet``.

    Each rollout runs under the current model; steps in the window add
    d(vard_loss)/d(theta) to the accumulated gradient, the other steps are
    plain samples. Terminal samples are scored, and after every
    ``refresh_every``-th optimiser step the value gets ``refresh_steps``
    updates on the freshest chains (a spawned generator keeps the rollout
    stream untouched).
    """
    if vnet is None:
        raise ContractError("value fine-tuning needs a pretrained value function; "
                            "run value pretraining first")
    sched = pair.sched
    window = cfg.window(sched.T)
    refreshing = cfg.refresh_every > 0 and cfg.refresh_steps > 0
    recent = ChainBuffer(cfg.refresh_capacity, sched.T, pair.theta.dim) if refreshing else None
    value_rng = rng.spawn(1)[0] if refreshing else None
    value_opt = Adam(vnet.parameters(), cfg.value_lr, weight_decay=0.0) if refreshing else None

    def batch_loss(c, scale):
        x = rng.standard_normal((len(c), pair.theta.dim))
        chain = [x]
        vals, kls = [], []
        for t in range(sched.T, 0, -1):
            if t in window:
                with Tape() as tape:
                    loss, x_new, kl, v = _vard_terms(pair, vnet, x, t, c, cfg.eta, rng,
                                                     cfg.shared_noise, cfg.value_on_mean,
                                                     cfg.guidance)
                tape.backward(loss, scale=scale)
                vals.append(v)
                kls.append(kl)
                x = x_new.data
            else:
                x = reverse_step(pair.theta, x, t, c, sched, rng, guidance=cfg.guidance)[0].data
            chain.append(x)
        r = np.asarray(reward_fn(x, c), dtype=np.float64).reshape(len(c))
        if recent is not None:
            recent.add_chains(np.stack(chain), c, r)
        return r, float(np.mean(vals)), float(np.mean(kls))

    def after_update(step):
        if refreshing and step % cfg.refresh_every == 0:
            refresh_value(vnet, recent, cfg.refresh_steps, value_rng, cfg.value_lr,
                          cfg.refresh_batch, value_opt)

    return _loop(pair, reward_fn, cfg, rng, batch_loss, seed, after_update)


def baseline_final_step(pair, reward_fn, cfg, rng, seed=None):
    """Reward backpropagation through the last reverse transition only."""
    return baseline_random_last_k(pair, reward_fn, 1, cfg, rng, seed)


def baseline_random_last_k(pair, reward_fn, k, cfg, rng, seed=None, variant="chain"):
    """Reward backpropagation from a random cut among the last ``k`` steps.

    Per batch a cut m ~ U{1..k} is drawn and the chain is sampled without
    gradient down to x_m. With ``variant="chain"`` the remaining transitions
    m, ..., 1 are taken under the tape and the reward of x_0 is
    differentiated through all of them. With ``variant="one_step"`` the
    model's clean estimate x0_hat = (x_m - sqrt(1 - abar_m) eps) / sqrt(abar_m)
    is scored instead. Either way m = 1 is the last reverse mean, so k = 1 is
    exactly the final-step baseline.
    """
    _require_differentiable(reward_fn)
    sched = pair.sched
    if not 1 <= k <= sched.T:
        raise ContractError(f"k={k} outside [1, {sched.T}]")
    if variant not in ("chain", "one_step"):
        raise ContractError(f"unknown variant {variant!r}")

    def batch_loss(c, scale):
        m = int(rng.integers(1, k + 1)) if k > 1 else 1
        x = rng.standard_normal((len(c), pair.theta.dim))
        for t in range(sched.T, m, -1):
            x = reverse_step(pair.theta, x, t, c, sched, rng, guidance=cfg.guidance)[0].data
        with Tape() as tape:
            if variant == "one_step" and m > 1:
                eps = pair.theta.guided(x, m, c, cfg.guidance)
                ab = sched.alpha_bar[m]
                x0 = (x - math.sqrt(1.0 - ab) * eps) * (1.0 / math.sqrt(ab))
                ref = (x - math.sqrt(1.0 - ab)
                       * pair.theta0.guided(x, m, c, cfg.guidance, frozen=True).data) / math.sqrt(ab)
            else:
                xt = Tensor(x)
                for t in range(m, 0, -1):
                    x_last = xt.data
                    xt = reverse_step(pair.theta, xt, t, c, sched, rng, guidance=cfg.guidance)[0]
                x0 = xt
                ref = reverse_step(pair.theta0, x_last, 1, c, sched, rng, guidance=cfg.guidance,
                                   frozen=True)[1].data
            r = reward_fn.tensor(x0, c)
            loss = -r.mean()
        tape.backward(loss, scale=scale)
        kl = float(np.mean(np.sum((x0.data - ref) ** 2, axis=1)))
        return r.data.copy(), float(np.mean(r.data)), kl

    return _loop(pair, reward_fn, cfg, rng, batch_loss, seed)


class RewardAsValue:
    """Use a differentiable reward as the value at every step (exact at t = 0)."""

    def __init__(self, reward_fn):
        _require_differentiable(reward_fn)
        self.reward_fn = reward_fn

    def __call__(self, x, t, c, frozen=False):
        return self.reward_fn.tensor(ad.as_tensor(x), c)

    def parameters(self):
        return []
