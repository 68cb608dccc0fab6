"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient, so sampling code paths pay nothing for the
machinery. A typical training step::

    with Tape() as tape:
        loss = ((mlp(x) - y) ** 2).mean()
    tape.backward(loss)
    opt.step()
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_TAPES: list["Tape"] = []


class Tensor:
    __array_priority__ = 1000  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    out: Tensor
    parents: tuple
    vjp: object


class Tape:
    """Append-only record of differentiable operations.

    ``backward`` walks the nodes in strict reverse append order, so gradient
    accumulation order (and therefore every floating point result) is fixed.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, loss, params=None, scale=1.0):
        """Accumulate d(scale*loss)/d(leaf) into ``.grad`` of every reachable leaf.

        When ``params`` is given, return their gradients in order; parameters
        the loss does not depend on report zeros.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.full_like(loss.data, scale)
        if loss._leaf:
            if loss.requires_grad:
                _accumulate(loss, seed)
        else:
            pending = {id(loss): seed}
            for node in reversed(self.nodes):
                g = pending.pop(id(node.out), None)
                if g is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if parent._leaf:
                        _accumulate(parent, pg)
                    elif id(parent) in pending:
                        pending[id(parent)] = pending[id(parent)] + pg
                    else:
                        pending[id(parent)] = pg
        if params is None:
            return None
        out = []
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            out.append(p.grad)
        return out


def backward(tape, loss, params=None):
    return tape.backward(loss, params)


def _accumulate(t, g):
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _make(data, parents, vjp, op):
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"operation {op!r} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    out._leaf = False
    if needs and _TAPES:
        _TAPES[-1].nodes.append(Node(op, out, tuple(parents), vjp))
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)),
                 "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    if isinstance(p, Tensor):
        raise ContractError("power supports a constant exponent only")
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def tanh(a):
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def silu(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def exp(a):
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.log(a.data)
    return _make(y, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g * 0.5 / y,), "sqrt")


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a):
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take_rows(table, idx):
    """Embedding lookup: rows of a 2-D table; gradient scatters back by index."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(table.data[idx], (table,), vjp, "take_rows")


def getitem(a, index):
    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(a.data[index], (a,), vjp, "getitem")


PRIMITIVES = ("add", "sub", "mul", "div", "neg", "power", "matmul", "tanh", "relu", "silu",
              "exp", "log", "sqrt", "sum", "mean", "reshape", "transpose", "concat",
              "take_rows", "getitem")

ACTIVATIONS = {"tanh": tanh, "relu": relu, "silu": silu, "linear": lambda x: x}


# ---------------------------------------------------------------- layers

class Mlp:
    """Fully connected network with weights stored as (fan_in, fan_out)."""

    def __init__(self, sizes, activation="tanh", out_activation="linear", rng=None, name="mlp"):
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise ContractError(f"bad layer sizes {sizes}")
        if activation not in ACTIVATIONS or out_activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}/{out_activation!r}")
        rng = np.random.default_rng(rng)
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.out_activation = out_activation
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            w = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True, f"{name}.{i}.weight")
            b = Tensor(rng.uniform(-bound, bound, fan_out), True, f"{name}.{i}.bias")
            act = out_activation if i == len(self.sizes) - 2 else activation
            self.layers.append((w, b, act))

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def output_dim(self):
        return self.sizes[-1]

    def parameters(self):
        return [p for w, b, _ in self.layers for p in (w, b)]

    def __call__(self, x, frozen=False):
        return forward(self, x, frozen)

    def config(self):
        return {"sizes": self.sizes, "activation": self.activation,
                "out_activation": self.out_activation}


def forward(mlp, x, frozen=False):
    """Apply ``mlp`` to a (n, input_dim) batch or a single input vector.

    ``frozen`` evaluates with detached parameters, so gradients can reach the
    input without touching the network's own ``.grad`` buffers.
    """
    x = as_tensor(x)
    if x.shape[-1] != mlp.input_dim:
        raise DimensionError(f"expected last dimension {mlp.input_dim}, got {x.shape}")
    single = x.ndim == 1
    h = reshape(x, (1, -1)) if single else x
    for w, b, act in mlp.layers:
        if frozen:
            w, b = w.detach(), b.detach()
        h = ACTIVATIONS[act](add(matmul(h, w), b))
    return reshape(h, (-1,)) if single else h


def sinusoidal_time_embedding(t, dim):
    """Interleaved (sin, cos) features of a timestep; vectorised over arrays of t."""
    if dim <= 0 or dim % 2:
        raise ContractError(f"embedding dimension must be positive and even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if (t < 0).any():
        raise ContractError("timestep must be non-negative")
    freqs = 10000.0 ** (-np.arange(dim // 2) * 2.0 / dim)
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def global_norm(grads):
    """L2 norm over all arrays, rescaled by the max entry so huge gradients do not overflow."""
    peak = max((float(np.abs(g).max()) for g in grads if g.size), default=0.0)
    if peak == 0.0 or not math.isfinite(peak):
        return peak
    return peak * math.sqrt(sum(float(np.sum((g / peak) ** 2)) for g in grads))


def clip_grad_norm(grads, max_norm):
    total = global_norm(grads)
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads, total


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.01, max_grad_norm=1.0):
    """AdamW update with global-norm clipping applied before the moments.

    Parameters are rebound to fresh arrays, so detached views taken earlier
    keep their old values.
    """
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or i}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    grads, _ = clip_grad_norm(grads, max_grad_norm)
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        p.data = p.data * (1.0 - lr * weight_decay) - lr * update
    return state


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
                 max_grad_norm=1.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def grads(self):
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]

    def grad_norm(self):
        return global_norm(self.grads())

    def step(self):
        adam_step(self.params, self.grads(), self.state, self.lr, self.betas[0], self.betas[1],
                  self.eps, self.weight_decay, self.max_grad_norm)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params, manifest):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".bin")
    meta = dict(manifest)
    meta["parameters"] = [{"name": p.name, "shape": list(p.shape)} for p in params]
    meta["dtype"] = "<f8"
    meta["blob"] = blob.name
    flat = np.concatenate([p.data.ravel() for p in params]) if params else np.zeros(0)
    blob.write_bytes(flat.astype("<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".json")


def read_manifest(path):
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_checkpoint(path, params):
    """Fill ``params`` in place from a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    meta = read_manifest(path)
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    specs = meta["parameters"]
    if len(specs) != len(params):
        raise DimensionError(f"checkpoint has {len(specs)} parameters, model has {len(params)}")
    offset = 0
    for spec, p in zip(specs, params):
        if tuple(spec["shape"]) != p.shape:
            raise DimensionError(f"{spec['name']}: checkpoint shape {spec['shape']} != {p.shape}")
        n = p.data.size
        p.data = flat[offset:offset + n].reshape(p.shape).astype(np.float64)
        offset += n
    if offset != flat.size:
        raise DimensionError("checkpoint blob has trailing values")
    return meta
