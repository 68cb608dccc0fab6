import numpy as np
import pytest
from scipy.stats import spearmanr

from vard_lab import ddpm, prm
from vard_lab.autodiff import Tape, Tensor
from vard_lab.errors import ContractError, DimensionError
from vard_lab.harness import experiments
from vard_lab.mdp import ChainBuffer, Trajectory, attach_sparse_reward
from vard_lab.rewards import make_reward, reward_preset

from oracles import central_difference, rel_error


def constant_value(m, **kw):
    v = prm.ValueNet(**kw)
    w, b, _ = v.net.layers[-1]
    w.data = np.zeros_like(w.data)
    b.data = np.full_like(b.data, m)
    return v


def pairs_with_rewards(rewards, T=4, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for r in rewards:
        traj = Trajectory.from_chain(rng.normal(size=(T + 1, dim)), 0)
        traj = attach_sparse_reward(traj, lambda x, c, r=r: r)
        out += [(s, traj.terminal_reward) for s in traj.states]
    return out


class TestValueLoss:
    def test_exact_predictor(self):
        v = constant_value(3.0, T=4)
        assert prm.value_loss(v, pairs_with_rewards([3.0, 3.0])).item() == 0.0

    @pytest.mark.parametrize("m", [0.0, 0.25, 0.5, 0.9])
    def test_constant_predictor_on_binary_targets(self, m):
        v = constant_value(m, T=4)
        loss = prm.value_loss(v, pairs_with_rewards([0.0, 1.0])).item()
        assert loss == pytest.approx(m ** 2 / 2 + (1 - m) ** 2 / 2, abs=1e-12)

    def test_minimised_at_mean(self):
        grid = np.linspace(0, 1, 101)
        losses = [prm.value_loss(constant_value(m, T=4), pairs_with_rewards([0.0, 1.0])).item()
                  for m in grid]
        assert grid[int(np.argmin(losses))] == pytest.approx(0.5)

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            prm.value_loss(prm.ValueNet(), [])

    def test_gradient_matches_finite_differences(self, rng):
        v = prm.ValueNet(T=4, hidden=(8,), seed=3)
        batch = prm.stack_pairs(pairs_with_rewards([0.3, -1.0, 2.0]), 4)
        params = v.parameters()
        with Tape() as tape:
            loss = prm.value_loss(v, batch)
        grads = tape.backward(loss, params)
        fd = central_difference(lambda: prm.value_loss(v, batch).item(), [p.data for p in params])
        assert max(rel_error(g, f) for g, f in zip(grads, fd)) < 1e-4


class TestValueNet:
    def test_input_gradient(self, rng):
        """dV/dx matches finite differences; fine-tuning backpropagates through it."""
        v = prm.ValueNet(hidden=(16, 16), seed=1, n_contexts=2)
        for _ in range(10):
            x = rng.normal(size=(3, 2))
            t, c = rng.integers(0, 51, 3), rng.integers(0, 2, 3)
            xt = Tensor(x.copy(), requires_grad=True)
            with Tape() as tape:
                out = v(xt, t, c, frozen=True).sum()
            tape.backward(out)
            [fd] = central_difference(lambda: v(x, t, c).data.sum(), [x])
            assert rel_error(xt.grad, fd) < 1e-4

    def test_every_step_accepted(self):
        v = prm.ValueNet(T=50)
        out = v.predict(np.zeros((51, 2)), np.arange(51), 0)
        assert out.shape == (51,) and np.isfinite(out).all()
        with pytest.raises(ContractError):
            v.predict(np.zeros((1, 2)), 51, 0)
        with pytest.raises(DimensionError):
            v.predict(np.zeros((1, 3)), 0, 0)

    def test_normalised_prediction(self):
        v = constant_value(0.0, normalize=True)
        v.fit_normalizer([10.0, 14.0])
        assert v.predict(np.zeros((1, 2)), 3, 0)[0] == pytest.approx(12.0)


class TestTabularToy:
    @pytest.mark.parametrize("seed", range(5))
    def test_least_squares_equals_enumeration(self, seed):
        assert experiments.tabular_toy(seed)["max_abs_error"] < 1e-6

    def test_sampled_least_squares_approaches_enumeration(self):
        chain = prm.discretized_diffusion_chain(seed=1)
        fitted = chain.least_squares_values(chain.sample_paths(20000, np.random.default_rng(0)))
        exact = chain.exact_values()
        # every cell visited often enough to be within a few standard errors
        assert max(np.nanmax(np.abs(a - b)) for a, b in zip(fitted, exact)) < 0.15

    def test_figure_one_shared_state(self):
        """Three rollouts share a state; its value is the mean of their rewards."""
        r = np.array([0.0, 0.7, -1.2, 3.1])
        kernels = [np.eye(4), np.array([[0, 1 / 3, 1 / 3, 1 / 3]] + [[0, 1, 0, 0]] * 3)]
        chain = prm.DiscreteChain(np.arange(4.0), [1, 0, 0, 0], kernels, r)
        paths = [(0, 0, 1), (0, 0, 2), (0, 0, 3)]
        fitted = chain.least_squares_values(paths)
        assert fitted[1][0] == pytest.approx(r[1:].mean(), abs=1e-12)
        assert chain.exact_values()[1][0] == pytest.approx(r[1:].mean(), abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_residual_variance_non_increasing(self, seed):
        var = prm.discretized_diffusion_chain(seed=seed).residual_variances()
        assert np.all(np.diff(var) <= 1e-12)
        assert var[-1] == pytest.approx(0.0, abs=1e-12)

    def test_invalid_kernel(self):
        with pytest.raises(ContractError):
            prm.DiscreteChain([0, 1], [0.5, 0.5], [np.ones((2, 2))], [0, 1])


def test_two_branch_exact_value():
    sched = ddpm.make_schedule()
    for t in (2, 10, 30, 50):
        assert prm.two_branch_value(np.zeros((1, 1)), t, sched)[0] == 0.5
    # Monte-Carlo check of the closed form away from zero
    rng = np.random.default_rng(0)
    policy = prm.ZeroNoisePredictor(dim=1)
    x, t = np.full((20000, 1), 0.4), 20
    for s in range(t, 0, -1):
        x = ddpm.reverse_step(policy, x, s, 0, sched, rng)[0].data
    p = prm.two_branch_value(np.array([[0.4]]), t, sched)[0]
    assert abs((x[:, 0] > 0).mean() - p) < 4 * np.sqrt(p * (1 - p) / 20000)


def test_two_branch_learned_value():
    out = experiments.two_branch(seed=0)
    assert out["exact"] == 0.5
    assert abs(out["value"] - 0.5) < 0.03


class TestPretrainValue:
    def test_constant_reward(self, pretrained):
        model, sched, _ = pretrained
        v = prm.ValueNet(hidden=(32,), seed=0)
        cfg = prm.ValueTrainConfig(lr=1e-2, steps=400, batch_size=256, rollouts_per_step=16,
                                   convergence_tol=1e-6, window=50)
        prm.pretrain_value(v, model, lambda x, c: np.full(len(x), 7.0),
                           cfg, np.random.default_rng(0), sched)
        x, t, c, _ = v.holdout.sample(2000, np.random.default_rng(1))
        assert np.max(np.abs(v.predict(x, t, c) - 7.0)) < 0.05
        # the loss curve flattens long before the step budget
        assert len(v.train_log) < 400

    def test_clean_sample_value_tracks_reward(self, pretrained):
        model, sched, _ = pretrained
        reward = make_reward(reward_preset("mode-distance"))
        v = prm.ValueNet(seed=0)
        cfg = prm.ValueTrainConfig(lr=3e-3, steps=600, batch_size=512, rollouts_per_step=32,
                                   convergence_tol=1e-9, lr_floor=0.01)
        prm.pretrain_value(v, model, reward, cfg, np.random.default_rng(0), sched)
        held = v.holdout
        r = held.rewards[:len(held)]
        x0 = held.states[:len(held), -1]
        err = np.abs(v.predict(x0, 0, held.contexts[:len(held)]) - r)
        assert np.median(err) < 0.1 * (r.max() - r.min())
        # later states predict better: residual variance falls with MDP step
        resid = [np.var(r - v.predict(held.states[:len(held), k], sched.T - k, 0))
                 for k in range(0, sched.T + 1, 5)]
        assert spearmanr(np.arange(len(resid)), resid).statistic < 0

    def test_loss_curve_csv(self, tmp_path):
        v = prm.ValueNet(hidden=(8,), seed=0)
        cfg = prm.ValueTrainConfig(steps=5, rollouts_per_step=10, batch_size=16)
        prm.pretrain_value(v, prm.ZeroNoisePredictor(dim=2), lambda x, c: x[:, 0], cfg,
                           np.random.default_rng(0))
        path = tmp_path / "value_loss.csv"
        prm.write_loss_curve(path, v.train_log)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,train_loss,holdout_loss" and len(lines) == 6
        assert v.rollouts == 50

    def test_schedule_mismatch(self):
        with pytest.raises(ContractError):
            prm.pretrain_value(prm.ValueNet(T=10), prm.ZeroNoisePredictor(), lambda x, c: x[:, 0],
                               prm.ValueTrainConfig(), np.random.default_rng(0),
                               ddpm.make_schedule())

    def test_config_validation(self):
        with pytest.raises(ContractError):
            prm.ValueTrainConfig(lr=0.0)


class TestRefresh:
    def _trajs(self, reward, n=64, seed=0):
        sched = ddpm.make_schedule()
        return prm.rollout_scored(prm.ZeroNoisePredictor(dim=2), lambda x, c: np.full(len(x), reward),
                                  n, sched, np.random.default_rng(seed))

    def test_zero_steps_is_noop(self):
        v = prm.ValueNet(hidden=(8,))
        before = [p.data.copy() for p in v.parameters()]
        prm.refresh_value(v, self._trajs(1.0), 0, np.random.default_rng(0))
        for a, p in zip(before, v.parameters()):
            np.testing.assert_array_equal(a, p.data)

    def test_converges_to_new_constant(self):
        v = constant_value(0.0, hidden=(16,))
        trajs = self._trajs(1.0)
        prm.refresh_value(v, trajs, 300, np.random.default_rng(0), lr=1e-2)
        x = np.stack([s.x for tr in trajs[:8] for s in tr.states])
        t = np.array([s.diffusion_index(50) for tr in trajs[:8] for s in tr.states])
        assert np.max(np.abs(v.predict(x, t, 0) - 1.0)) < 0.05

    def test_chain_buffer_source(self):
        buf = ChainBuffer(8, 50, 2)
        states = np.random.default_rng(0).normal(size=(51, 4, 2))
        buf.add_chains(states, np.zeros(4, dtype=int), np.ones(4))
        v = constant_value(0.0, hidden=(8,))
        prm.refresh_value(v, buf, 50, np.random.default_rng(0), lr=1e-2)
        assert abs(v.predict(states[10, :1], 40, 0)[0] - 1.0) < 0.2

    def test_refresh_lr_below_pretraining_lr(self):
        import inspect
        default = inspect.signature(prm.refresh_value).parameters["lr"].default
        assert default < prm.ValueTrainConfig().lr
