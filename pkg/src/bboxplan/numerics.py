"""Dense float64 arrays with reverse-mode differentiation and Adam.

Every learnable piece of the planner is composed from the operations in this
module.  A :class:`Node` wraps a numpy value and remembers how it was made;
:func:`backward` walks the recorded graph in reverse topological order and
accumulates ``dL/dnode`` into each leaf's ``grad``.

Elementwise broadcasting is deliberately narrow: operands must have the same
shape, or one of them must be a scalar (size-1, rank <= 1).  Row-wise bias
addition and row masking have their own explicit operations.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ContractError, DimensionError, TrainingError

__all__ = [
    "Node", "AdamState", "leaf", "constant", "backward", "zero_grad",
    "add", "sub", "mul", "scale", "matmul", "add_bias", "relu", "absolute",
    "softmax_rows", "layer_norm", "sum_rows", "sum_all", "mean_all", "abs_mean", "reshape",
    "transpose", "take", "concat", "wrap_angle", "mask_rows", "norm_rows",
    "adam_step", "numerical_grad", "corrupted_backward",
]


class Node:
    """A value in the computation graph.

    ``grad`` has the same shape as ``value``.  Leaves keep accumulating across
    :func:`backward` calls until :func:`zero_grad` resets them.
    """

    __slots__ = ("value", "_grad", "parents", "_backward", "op", "name", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", name=None,
                 requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.op = op
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    def _accumulate(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            g = _reduce_to_shape(g, self.value.shape)
        if self._grad is None:
            self._grad = g.copy()
        else:
            self._grad += g

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"


def leaf(value, name=None):
    """A differentiable input (parameter or variable)."""
    node = Node(np.array(value, dtype=np.float64), name=name, requires_grad=True)
    node._grad = np.zeros_like(node.value)
    return node


def constant(value):
    return Node(value, requires_grad=False, op="const")


def _as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _is_scalar(arr):
    return arr.size == 1 and arr.ndim <= 1


def _reduce_to_shape(g, shape):
    """Sum ``g`` down to ``shape`` over broadcast dimensions."""
    if g.shape == shape:
        return g
    if len(shape) == 0 or (len(shape) == 1 and shape[0] == 1 and g.ndim != 1):
        return np.asarray(g.sum()).reshape(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_elementwise(a, b, op):
    if a.shape == b.shape or _is_scalar(a.value) or _is_scalar(b.value):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- traversal

def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        if node.parents:
            node._grad = None
    loss._accumulate(np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


def zero_grad(nodes: Iterable[Node]):
    for n in nodes:
        n._grad = np.zeros_like(n.value)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_node(a), _as_node(b)
    _check_elementwise(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Node(a.value + b.value, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    _check_elementwise(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return Node(a.value - b.value, (a, b), bw, "sub")


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    _check_elementwise(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.value)
        if b.requires_grad:
            b._accumulate(g * a.value)

    return Node(a.value * b.value, (a, b), bw, "mul")


def scale(a, c: float):
    a = _as_node(a)
    c = float(c)

    def bw(g):
        a._accumulate(g * c)

    return Node(a.value * c, (a,), bw, "scale")


def relu(a):
    a = _as_node(a)
    on = a.value > 0

    def bw(g):
        a._accumulate(g * on)

    return Node(np.where(on, a.value, 0.0), (a,), bw, "relu")


def absolute(a):
    a = _as_node(a)
    sign = np.sign(a.value)

    def bw(g):
        a._accumulate(g * sign)

    return Node(np.abs(a.value), (a,), bw, "abs")


def wrap_angle(a):
    """Wrap to [-pi, pi); the derivative is 1 away from the cut."""
    a = _as_node(a)
    out = np.mod(a.value + np.pi, 2.0 * np.pi) - np.pi

    def bw(g):
        a._accumulate(g)

    return Node(out, (a,), bw, "wrap")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast as in numpy."""
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            if a.value.ndim > 2 and b.value.ndim == 2:
                k = a.shape[-1]
                gb = a.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _reduce_to_shape(np.swapaxes(a.value, -1, -2) @ g, b.shape)
            b._accumulate(gb)

    return Node(a.value @ b.value, (a, b), bw, "matmul")


def add_bias(x, b):
    """Add a vector ``b`` [n] to every row of ``x`` [..., n]."""
    x, b = _as_node(x), _as_node(b)
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))

    return Node(x.value + b.value, (x, b), bw, "add_bias")


def mask_rows(x, mask):
    """Zero the rows of ``x`` [..., P, n] where boolean ``mask`` [..., P] is False."""
    x = _as_node(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise DimensionError(f"mask_rows: mask {m.shape} does not fit {x.shape}")
    keep = m[..., None].astype(np.float64)

    def bw(g):
        x._accumulate(g * keep)

    return Node(x.value * keep, (x,), bw, "mask_rows")


def softmax_rows(a, mask=None):
    """Softmax along the last axis, stabilized by subtracting the row max.

    Entries where ``mask`` is False get probability exactly 0.  Every row must
    keep at least one unmasked entry.
    """
    a = _as_node(a)
    z = a.value
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not m.any(axis=-1).all():
            raise ContractError("softmax_rows: a row has every entry masked")
        z = np.where(m, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        a._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return Node(s, (a,), bw, "softmax")


def norm_rows(a):
    """Euclidean norm over the last axis; subgradient 0 at the origin."""
    a = _as_node(a)
    n = np.sqrt((a.value ** 2).sum(axis=-1))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        unit = np.where((n > 0)[..., None], a.value / safe[..., None], 0.0)
        a._accumulate(g[..., None] * unit)

    return Node(n, (a,), bw, "norm")


def layer_norm(a, eps: float = 1e-5):
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    a = _as_node(a)
    mu = a.value.mean(axis=-1, keepdims=True)
    xc = a.value - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - y * gy))

    return Node(y, (a,), bw, "layer_norm")


# ---------------------------------------------------------------- reductions

def sum_rows(a):
    """Sum over the row axis (-2): [..., m, n] -> [..., n]."""
    a = _as_node(a)
    if a.value.ndim < 2:
        raise DimensionError(f"sum_rows needs rank >= 2, got {a.shape}")
    m = a.shape[-2]

    def bw(g):
        a._accumulate(np.repeat(np.expand_dims(g, -2), m, axis=-2))

    return Node(a.value.sum(axis=-2), (a,), bw, "sum_rows")


def sum_all(a):
    a = _as_node(a)

    def bw(g):
        a._accumulate(np.full_like(a.value, g.reshape(-1)[0]))

    return Node(np.array([a.value.sum()]), (a,), bw, "sum_all")


def mean_all(a):
    a = _as_node(a)
    n = a.value.size
    if n == 0:
        raise ContractError("mean_all of an empty array")

    def bw(g):
        a._accumulate(np.full_like(a.value, g.reshape(-1)[0] / n))

    return Node(np.array([a.value.mean()]), (a,), bw, "mean_all")


def abs_mean(a, b):
    """Mean absolute difference (the L1 loss)."""
    return mean_all(absolute(sub(a, b)))


# ---------------------------------------------------------------- shape plumbing

def reshape(a, shape):
    a = _as_node(a)
    old = a.shape

    def bw(g):
        a._accumulate(g.reshape(old))

    return Node(a.value.reshape(shape), (a,), bw, "reshape")


def transpose(a):
    """Swap the last two axes."""
    a = _as_node(a)

    def bw(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return Node(np.swapaxes(a.value, -1, -2), (a,), bw, "transpose")


def take(a, key):
    """``a[key]`` for any numpy index; gradient scatters back with ``np.add.at``."""
    a = _as_node(a)

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        a._accumulate(full)

    return Node(a.value[key], (a,), bw, "take")


def concat(nodes, axis=0):
    nodes = [_as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            if n.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                n._accumulate(g[tuple(idx)])

    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes, bw, "concat")


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> dict:
    """One bias-corrected Adam update.  Moments in ``state`` are updated in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: grad {g.shape} vs param {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------- checking

def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


@contextlib.contextmanager
def corrupted_backward(op_name: str):
    """Fault-injection hook: temporarily break one op's backward rule.

    Used to prove that the gradient check actually detects bad derivatives.
    """
    import sys

    module = sys.modules[__name__]
    original = getattr(module, op_name)

    def broken(*args, **kwargs):
        node = original(*args, **kwargs)
        inner = node._backward

        def bw(g):
            inner(g * 1.5)

        node._backward = bw
        return node

    setattr(module, op_name, broken)
    try:
        yield
    finally:
        setattr(module, op_name, original)
