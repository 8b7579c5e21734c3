"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Graphs are dynamic: every op returns a new :class:`Node` holding its value,
references to its parents and a closure that maps the output gradient to
the gradient contributions of each parent. ``backward`` walks the graph in
reverse topological order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node", "Parameter", "ShapeError", "as_node", "constant", "backward", "zero_grad",
    "add", "sub", "mul", "div", "neg", "matmul", "dot", "conv2d", "relu", "tanh",
    "sigmoid", "exp", "log", "abs_", "sign", "power", "abs_power", "sum_", "mean",
    "concat", "stack", "reshape", "transpose", "maxpool2d", "softmax_cross_entropy",
    "l2_normalize", "getitem", "detach", "grad_check",
]


class ShapeError(ValueError):
    pass


class Node:
    """A value in the computation graph.

    ``value`` is a float64 array treated as immutable. ``grad`` is allocated
    lazily by :func:`backward` and accumulates across calls until reset.
    """

    __array_priority__ = 100  # make ndarray <op> Node dispatch to Node

    def __init__(self, value, parents: tuple["Node", ...] = (),
                 rule: Callable | None = None, op: str = "", requires_grad: bool | None = None):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by op {op or 'leaf'!r}")
        self.value = value
        self.grad: np.ndarray | None = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        # constants need no history
        self.parents = parents if requires_grad else ()
        self.rule = rule if requires_grad else None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Node(shape={self.shape}, op={self.op!r})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, k): return power(self, k)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self) -> "Node":
        return transpose(self)


@dataclass
class Parameter:
    node: Node
    name: str
    trainable: bool = True


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, requires_grad=False)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def detach(x: Node) -> Node:
    return constant(as_node(x).value)


def _topo_order(root: Node) -> list[Node]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Populate ``grad`` on every node reachable from the scalar ``root``."""
    if root.value.shape != ():
        raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in reversed(_topo_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node.rule is None:
            continue
        for parent, pg in zip(node.parents, node.rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Node, b: Node, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")
    return Node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "sub")
    return Node(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "mul")
    return Node(a.value * b.value, (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape),
                           _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "div")
    out = a.value / b.value
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g / b.value, a.shape),
                           _unbroadcast(-g * out / b.value, b.shape)), "div")


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,), "neg")


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = _sigmoid(a.value)
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)  # non-positive inputs are rejected by Node
    return Node(out, (a,), lambda g: (g / a.value,), "log")


def abs_(a) -> Node:
    a = as_node(a)
    return Node(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def sign(a) -> Node:
    """Elementwise sign. The gradient is zero everywhere, including at 0."""
    a = as_node(a)
    return Node(np.sign(a.value), (a,), lambda g: (np.zeros_like(a.value),), "sign")


def power(a, k: float) -> Node:
    a = as_node(a)
    out = a.value ** k
    return Node(out, (a,), lambda g: (g * k * a.value ** (k - 1),), f"pow{k}")


def abs_power(a, gamma: float) -> Node:
    """``|a|**gamma``; requires ``gamma >= 1`` so the derivative exists at 0."""
    if gamma < 1:
        raise ValueError(f"abs_power needs gamma >= 1, got {gamma}")
    a = as_node(a)
    mag = np.abs(a.value)
    return Node(mag ** gamma, (a,),
                lambda g: (g * gamma * mag ** (gamma - 1) * np.sign(a.value),), "abs_power")


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return Node(out, (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Node:
    a = as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from None
    return Node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Node:
    a = as_node(a)
    inv = None if axes is None else np.argsort(axes)
    return Node(np.transpose(a.value, axes), (a,),
                lambda g: (np.transpose(g, inv),), "transpose")


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes "
                         + ", ".join(str(n.shape) for n in nodes)) from None
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return Node(out, tuple(nodes), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ: {sorted(shapes)}")
    out = np.stack([n.value for n in nodes], axis=axis)
    return Node(out, tuple(nodes),
                lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


def getitem(a, idx) -> Node:
    a = as_node(a)
    out = a.value[idx]

    def rule(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)
    return Node(out, (a,), rule, "getitem")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def rule(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb
    return Node(a.value @ b.value, (a, b), rule, "matmul")


def dot(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    return Node(a.value @ b.value, (a, b), lambda g: (g * b.value, g * a.value), "dot")


def l2_normalize(a, eps: float = 1e-12) -> Node:
    """Scale every vector along the last axis to unit Euclidean norm."""
    a = as_node(a)
    norm = np.sqrt((a.value ** 2).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = a.value / norm

    def rule(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)
    return Node(out, (a,), rule, "l2_normalize")


def softmax_cross_entropy(logits, labels) -> Node:
    """Mean cross-entropy of ``logits`` (B, C) against integer ``labels`` (B,)."""
    logits = as_node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def rule(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d / len(labels),)
    return Node(loss, (logits,), rule, "softmax_cross_entropy")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation. ``x`` is (B, C, H, W), ``w`` is (F, C, kh, kw).

    Lowered to one matmul per kernel offset, accumulating into the output.
    """
    x, w = as_node(x), as_node(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Hp, Wp = H + 2 * padding, W + 2 * padding
    oh, ow = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # B, Hp, Wp, C
    out = np.zeros((B, oh, ow, F))

    def window(i, j):
        return (slice(None), slice(i, i + stride * (oh - 1) + 1, stride),
                slice(j, j + stride * (ow - 1) + 1, stride), slice(None))

    for i in range(kh):
        for j in range(kw):
            out += xh[window(i, j)] @ w.value[:, :, i, j].T
    parents = (x, w)
    if b is not None:
        b = as_node(b)
        out += b.value
        parents = (x, w, b)

    def rule(g):
        gh = g.transpose(0, 2, 3, 1)  # B, oh, ow, F
        gw = np.zeros_like(w.value) if w.requires_grad else None
        gx = np.zeros_like(xh) if x.requires_grad else None
        g2 = gh.reshape(-1, F)
        for i in range(kh):
            for j in range(kw):
                if gw is not None:
                    gw[:, :, i, j] = g2.T @ xh[window(i, j)].reshape(-1, C)
                if gx is not None:
                    gx[window(i, j)] += gh @ w.value[:, :, i, j]
        if gx is not None:
            gx = gx.transpose(0, 3, 1, 2)[:, :, padding:padding + H, padding:padding + W]
        grads = (gx, gw)
        if b is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return Node(out.transpose(0, 3, 1, 2), parents, rule, "conv2d")


def maxpool2d(x, k: int = 2) -> Node:
    """Non-overlapping k x k max pooling over (B, C, H, W); trailing rows/cols are dropped."""
    x = as_node(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    oh, ow = H // k, W // k
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool2d: window {k} larger than input {x.shape}")
    blocks = x.value[:, :, :oh * k, :ow * k].reshape(B, C, oh, k, ow, k)
    out = blocks.max(axis=(3, 5))
    # route the gradient to the first maximum of each window only
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, oh, ow, k * k)
    arg = flat.argmax(axis=-1)

    def rule(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(B, C, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
        full = np.zeros_like(x.value)
        full[:, :, :oh * k, :ow * k] = gb.reshape(B, C, oh * k, ow * k)
        return (full,)
    return Node(out, (x,), rule, "maxpool2d")


# ---------------------------------------------------------------- gradient checking

def grad_check(f: Callable[[], Node], params: Sequence[Node], eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar output from ``params`` on every call.
    """
    zero_grad(params)
    out = f()
    backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        base = p.value
        for idx in np.ndindex(base.shape):
            vals = []
            for step in (eps, -eps):
                bumped = base.copy()
                bumped[idx] += step
                p.value = bumped
                vals.append(f().item())
            p.value = base
            fd = (vals[0] - vals[1]) / (2 * eps)
            a = ga[idx]
            if not (np.isfinite(fd) and np.isfinite(a)):
                raise FloatingPointError(f"non-finite gradient at {idx}")
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    zero_grad(params)
    return worst
