import zlib

import numpy as np
import pytest

from vard_lab import autodiff as ad
from vard_lab.autodiff import Adam, AdamState, Mlp, Tape, Tensor, adam_step
from vard_lab.errors import ContractError, DimensionError, NonFiniteError

from oracles import central_difference, mlp_forward_by_hand, rel_error


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


# name -> (input factories, function of tensors)
PRIMITIVE_CASES = {
    "add": ([lambda r: r.normal(size=(3, 4)), lambda r: r.normal(size=(4,))], lambda a, b: a + b),
    "sub": ([lambda r: r.normal(size=(3, 4)), lambda r: r.normal(size=(3, 1))], lambda a, b: a - b),
    "mul": ([lambda r: r.normal(size=(3, 4)), lambda r: r.normal(size=(3, 4))], lambda a, b: a * b),
    "div": ([lambda r: r.normal(size=(2, 3)), lambda r: _pos(r, (2, 3))], lambda a, b: a / b),
    "neg": ([lambda r: r.normal(size=(5,))], lambda a: -a),
    "power": ([lambda r: _pos(r, (4,))], lambda a: a ** 2.5),
    "matmul": ([lambda r: r.normal(size=(3, 4)), lambda r: r.normal(size=(4, 2))], lambda a, b: a @ b),
    "tanh": ([lambda r: r.normal(size=(3, 3))], ad.tanh),
    "relu": ([lambda r: _away_from_zero(r, (3, 3))], ad.relu),
    "silu": ([lambda r: r.normal(size=(3, 3))], ad.silu),
    "exp": ([lambda r: r.normal(size=(4,))], ad.exp),
    "log": ([lambda r: _pos(r, (4,))], ad.log),
    "sqrt": ([lambda r: _pos(r, (4,))], ad.sqrt),
    "sum": ([lambda r: r.normal(size=(3, 4))], lambda a: a.sum(axis=0)),
    "mean": ([lambda r: r.normal(size=(3, 4))], lambda a: a.mean(axis=1, keepdims=True)),
    "reshape": ([lambda r: r.normal(size=(3, 4))], lambda a: a.reshape(2, 6)),
    "transpose": ([lambda r: r.normal(size=(3, 4))], lambda a: a.T),
    "concat": ([lambda r: r.normal(size=(2, 3)), lambda r: r.normal(size=(2, 2))],
               lambda a, b: ad.concat([a, b], axis=1)),
    "take_rows": ([lambda r: r.normal(size=(4, 3))], lambda a: ad.take_rows(a, [0, 2, 2, 3])),
    "getitem": ([lambda r: r.normal(size=(4, 3))], lambda a: a[1:3, [0, 2]]),
}


def test_every_primitive_has_a_gradient_case():
    assert set(PRIMITIVE_CASES) == set(ad.PRIMITIVES)


def gradient_check(factories, fn, rng):
    arrays = [f(rng) for f in factories]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        weights = rng.normal(size=out.shape)
        loss = (out * weights).sum()
    tape.backward(loss)

    def scalar():
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

    numeric = central_difference(scalar, arrays)
    return max(rel_error(t.grad, n) for t, n in zip(tensors, numeric))


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    factories, fn = PRIMITIVE_CASES[name]
    worst = max(gradient_check(factories, fn, rng) for _ in range(100))
    assert worst < 1e-4


def test_square_gradient_and_constant():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    tape.backward(y)
    assert x.grad == pytest.approx(6.0)

    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = Tensor(5.0) + 0.0 * x.detach()
    [g] = tape.backward(y, params=[x])
    assert g == 0.0


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_unreachable_parameters_get_zero_grad():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = (a * 3.0).sum()
    ga, gb = tape.backward(loss, params=[a, b])
    np.testing.assert_array_equal(ga, [3.0, 3.0])
    np.testing.assert_array_equal(gb, [0.0, 0.0])


def test_tape_linearity():
    rng = np.random.default_rng(0)
    mlp = Mlp([3, 5, 1], rng=1)
    x = rng.normal(size=(4, 3))

    def grads_of(fn):
        for p in mlp.parameters():
            p.grad = None
        with Tape() as tape:
            loss = fn()
        return [g.copy() for g in tape.backward(loss, params=mlp.parameters())]

    f = lambda: (mlp(x) ** 2).sum()
    g = lambda: mlp(x).sum()
    combined = grads_of(lambda: 2.5 * f() - 0.75 * g())
    gf, gg = grads_of(f), grads_of(g)
    for c, a, b in zip(combined, gf, gg):
        np.testing.assert_allclose(c, 2.5 * a - 0.75 * b, rtol=1e-12, atol=1e-12)


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([-1.0]))


def test_identity_and_zero_weight_mlps():
    mlp = Mlp([3, 3], activation="linear")
    w, b, _ = mlp.layers[0]
    w.data = np.eye(3)
    b.data = np.zeros(3)
    np.testing.assert_array_equal(mlp(np.array([1.0, 2.0, 3.0])).data, [1.0, 2.0, 3.0])

    mlp = Mlp([2, 4, 3], rng=0)
    for w, b, _ in mlp.layers:
        w.data = np.zeros_like(w.data)
    bias = mlp.layers[-1][1].data
    out = mlp(np.random.default_rng(0).normal(size=(5, 2))).data
    np.testing.assert_allclose(out, np.broadcast_to(bias, (5, 3)))


def test_mlp_forward_matches_hand_rolled_arithmetic():
    mlp = Mlp([3, 6, 2], rng=42)
    x = np.random.default_rng(7).normal(size=(4, 3))
    raw = [(w.data, b.data, act) for w, b, act in mlp.layers]
    np.testing.assert_allclose(mlp(x).data, mlp_forward_by_hand(raw, x), rtol=1e-12)


def test_mlp_shape_mismatch():
    with pytest.raises(DimensionError):
        Mlp([3, 2])(np.ones((2, 4)))


def test_two_layer_mlp_gradient_check():
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(100):
        mlp = Mlp([3, 8, 2], rng=trial)
        x = rng.normal(size=(5, 3))
        y = rng.normal(size=(5, 2))
        params = mlp.parameters()
        with Tape() as tape:
            loss = ((mlp(x) - y) ** 2).mean()
        grads = tape.backward(loss, params=params)
        arrays = [p.data for p in params]
        numeric = central_difference(lambda: float(((mlp(x).data - y) ** 2).mean()), arrays)
        worst = max(worst, max(rel_error(g, n) for g, n in zip(grads, numeric)))
    assert worst < 1e-4


def test_frozen_forward_leaves_parameter_grads_untouched():
    mlp = Mlp([2, 4, 1], rng=0)
    x = Tensor(np.ones((1, 2)), requires_grad=True)
    with Tape() as tape:
        y = mlp(x, frozen=True).sum()
    tape.backward(y)
    assert x.grad is not None
    assert all(p.grad is None for p in mlp.parameters())


def test_forward_is_deterministic():
    x = np.random.default_rng(5).normal(size=(16, 4))
    a = Mlp([4, 16, 16, 2], rng=9)(x).data
    b = Mlp([4, 16, 16, 2], rng=9)(x).data
    assert a.tobytes() == b.tobytes()


class TestTimeEmbedding:
    def test_zero_alternates(self):
        np.testing.assert_array_equal(ad.sinusoidal_time_embedding(0, 8), [0, 1] * 4)

    def test_neighbouring_steps_differ(self):
        e0 = ad.sinusoidal_time_embedding(0, 16)
        e1 = ad.sinusoidal_time_embedding(1, 16)
        assert np.max(np.abs(e0 - e1)) > 1e-6

    def test_bounded(self):
        t = np.random.default_rng(0).integers(0, 1000, 200)
        assert np.all(np.abs(ad.sinusoidal_time_embedding(t, 32)) <= 1.0)

    def test_injective_over_schedule(self):
        emb = ad.sinusoidal_time_embedding(np.arange(51), 2)
        d = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
        assert np.all(d[~np.eye(51, dtype=bool)] > 1e-6)

    def test_odd_dimension(self):
        with pytest.raises(ContractError):
            ad.sinusoidal_time_embedding(3, 5)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        adam_step([p], [np.zeros(2)], AdamState(), lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_clipping_rescales_to_unit_norm(self):
        g, norm = ad.clip_grad_norm([np.array([6.0, 8.0])], 1.0)
        assert norm == pytest.approx(10.0)
        assert np.linalg.norm(g[0]) == pytest.approx(1.0)
        # first Adam moment sees the clipped gradient
        p = Tensor(np.zeros(2), requires_grad=True)
        state = adam_step([p], [np.array([6.0, 8.0])], AdamState(), lr=0.1, weight_decay=0.0)
        np.testing.assert_allclose(state.m[0], 0.1 * np.array([0.6, 0.8]))

    def test_two_steps_match_hand_recursion(self):
        lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.01
        p = Tensor(np.array([0.5]), requires_grad=True)
        state = AdamState()
        for _ in range(2):
            adam_step([p], [np.array([1.0])], state, lr, b1, b2, eps, wd)
        # hand recursion with constant gradient 1
        x, m, v = 0.5, 0.0, 0.0
        for k in (1, 2):
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            mhat, vhat = m / (1 - b1 ** k), v / (1 - b2 ** k)
            x = x * (1 - lr * wd) - lr * mhat / (vhat ** 0.5 + eps)
        assert p.data[0] == pytest.approx(x, abs=1e-15)

    def test_non_finite_gradient_names_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True, name="head.bias")
        with pytest.raises(NonFiniteError, match="head.bias"):
            adam_step([p], [np.array([np.nan, 0.0])], AdamState(), lr=0.1)

    def test_optimizer_reduces_loss(self):
        mlp = Mlp([1, 16, 1], rng=0)
        opt = Adam(mlp.parameters(), lr=1e-2, weight_decay=0.0)
        x = np.linspace(-1, 1, 32)[:, None]
        y = np.sin(3 * x)
        first = None
        for _ in range(300):
            opt.zero_grad()
            with Tape() as tape:
                loss = ((mlp(x) - y) ** 2).mean()
            tape.backward(loss)
            opt.step()
            first = first if first is not None else loss.item()
        assert loss.item() < 0.1 * first


def test_checkpoint_round_trip(tmp_path):
    mlp = Mlp([3, 5, 2], rng=11)
    ad.save_checkpoint(tmp_path / "net", mlp.parameters(), {"arch": mlp.config(), "seed": 11})
    other = Mlp([3, 5, 2], rng=99)
    meta = ad.load_checkpoint(tmp_path / "net", other.parameters())
    assert meta["arch"]["sizes"] == [3, 5, 2]
    for a, b in zip(mlp.parameters(), other.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    blob = (tmp_path / "net.bin").read_bytes()
    assert len(blob) == 8 * sum(p.size for p in mlp.parameters())
    with pytest.raises(DimensionError):
        ad.load_checkpoint(tmp_path / "net", Mlp([3, 4, 2]).parameters())
