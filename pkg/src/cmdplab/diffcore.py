"""Reverse-mode automatic differentiation over float64 arrays, plus the
tanh-MLP forward pass and an adaptive-moment (Adam) optimizer.

The engine is deliberately small: a ``Node`` wraps a numpy float64 array
(scalars are 0-d arrays), remembers its parents and how to push its
gradient to them, and ``backward`` walks the graph once in reverse
topological order.  Everything is single-threaded and deterministic:
identical inputs produce bit-identical gradients.

Subgradient convention at kinks (clip boundaries, min/max ties, the
origin of relu/elu/celu): the gradient follows the branch the forward
pass selects, with ties resolved toward the first / unclipped / identity
branch.  Concretely ``clip`` has gradient 1 on the closed interval
[lo, hi], ``maximum(a, b)`` routes the gradient to ``a`` where
``a >= b``, and relu/elu/celu all have gradient 1 at exactly 0.  The one
exception is ``celu_clamped``, whose gradient is exactly 0 on the closed
clamped region (ties go to the clamp) so that updates stop completely
once the clamp engages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericOverflowError, ShapeError

Array = np.ndarray


def _value(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _check_finite(v: Array, op: str) -> None:
    # sum-based probe: any nan/inf element makes the sum non-finite, and a
    # spuriously overflowing sum of huge finite values only errs toward
    # raising, never toward silence
    if not np.isfinite(v.sum()):
        raise NumericOverflowError(f"non-finite value produced by op '{op}'")


class Node:
    """One vertex of the computation graph.

    ``value`` is the forward result, ``grad`` the gradient accumulated by
    the most recent backward pass (zeroed at the start of each pass),
    ``parents`` the input nodes, and ``op`` a tag naming the primitive.
    """

    __slots__ = ("value", "grad", "parents", "op", "_push")

    def __init__(self, value, parents: tuple = (), op: str = "leaf",
                 push: Callable[[], None] | None = None):
        self.value = _value(value)
        _check_finite(self.value, op)
        self.grad: Array | None = None
        self.parents = parents
        self.op = op
        self._push = push

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return rdiv(other, self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def backward(self) -> None:
        """Run a backward pass from this (scalar) node."""
        backward(self)


def constant(x) -> Node:
    """Leaf node that never receives gradient pushes of its own."""
    return Node(x, (), "const")


def param(x) -> Node:
    """Leaf node intended to be optimized; identical to a const leaf
    except for its tag."""
    return Node(x, (), "param")


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- binary primitives ---------------------------------------------------


def add(a: Node, b) -> Node:
    if isinstance(b, Node):
        out = Node(a.value + b.value, (a, b), "add")

        def push():
            out_g = out.grad
            a.grad += _unbroadcast(out_g, a.value.shape)
            b.grad += _unbroadcast(out_g, b.value.shape)
    else:
        out = Node(a.value + _value(b), (a,), "add")

        def push():
            a.grad += _unbroadcast(out.grad, a.value.shape)

    out._push = push
    return out


def sub(a: Node, b) -> Node:
    if isinstance(b, Node):
        out = Node(a.value - b.value, (a, b), "sub")

        def push():
            out_g = out.grad
            a.grad += _unbroadcast(out_g, a.value.shape)
            b.grad -= _unbroadcast(out_g, b.value.shape)
    else:
        out = Node(a.value - _value(b), (a,), "sub")

        def push():
            a.grad += _unbroadcast(out.grad, a.value.shape)

    out._push = push
    return out


def mul(a: Node, b) -> Node:
    if isinstance(b, Node):
        out = Node(a.value * b.value, (a, b), "mul")

        def push():
            out_g = out.grad
            a.grad += _unbroadcast(out_g * b.value, a.value.shape)
            b.grad += _unbroadcast(out_g * a.value, b.value.shape)
    else:
        c = _value(b)
        out = Node(a.value * c, (a,), "mul")

        def push():
            a.grad += _unbroadcast(out.grad * c, a.value.shape)

    out._push = push
    return out


def div(a: Node, b) -> Node:
    if isinstance(b, Node):
        out = Node(a.value / b.value, (a, b), "div")

        def push():
            out_g = out.grad
            a.grad += _unbroadcast(out_g / b.value, a.value.shape)
            b.grad -= _unbroadcast(out_g * a.value / (b.value * b.value),
                                   b.value.shape)
    else:
        c = _value(b)
        out = Node(a.value / c, (a,), "div")

        def push():
            a.grad += _unbroadcast(out.grad / c, a.value.shape)

    out._push = push
    return out


def rdiv(a, b: Node) -> Node:
    c = _value(a)
    out = Node(c / b.value, (b,), "rdiv")

    def push():
        b.grad -= _unbroadcast(out.grad * c / (b.value * b.value),
                               b.value.shape)

    out._push = push
    return out


def matmul(a: Node, b: Node) -> Node:
    """Matrix product; supports (B, I) @ (I, O) and (I,) @ (I, O)."""
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul inner dims disagree: {a.value.shape} @ {b.value.shape}")
    out = Node(a.value @ b.value, (a, b), "matmul")

    def push():
        out_g = out.grad
        if a.value.ndim == 1:
            a.grad += out_g @ b.value.T
            b.grad += np.outer(a.value, out_g)
        else:
            a.grad += out_g @ b.value.T
            b.grad += a.value.T @ out_g

    out._push = push
    return out


def affine(x, w: Node, b: Node) -> Node:
    """Fused x @ w + b; ``x`` may be a Node or a constant array."""
    xv = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    if xv.shape[-1] != w.value.shape[0]:
        raise ShapeError(
            f"affine inner dims disagree: {xv.shape} @ {w.value.shape}")
    parents = (x, w, b) if isinstance(x, Node) else (w, b)
    out = Node(xv @ w.value + b.value, parents, "affine")

    def push():
        out_g = out.grad
        if xv.ndim == 1:
            w.grad += np.outer(xv, out_g)
            b.grad += out_g
            if isinstance(x, Node):
                x.grad += out_g @ w.value.T
        else:
            w.grad += xv.T @ out_g
            b.grad += out_g.sum(axis=0)
            if isinstance(x, Node):
                x.grad += out_g @ w.value.T

    out._push = push
    return out


# -- unary primitives ----------------------------------------------------


def neg(a: Node) -> Node:
    out = Node(-a.value, (a,), "neg")

    def push():
        a.grad -= out.grad

    out._push = push
    return out


def exp(a: Node) -> Node:
    out = Node(np.exp(a.value), (a,), "exp")

    def push():
        a.grad += out.grad * out.value

    out._push = push
    return out


def log(a: Node) -> Node:
    out = Node(np.log(a.value), (a,), "log")

    def push():
        a.grad += out.grad / a.value

    out._push = push
    return out


def tanh(a: Node) -> Node:
    out = Node(np.tanh(a.value), (a,), "tanh")

    def push():
        a.grad += out.grad * (1.0 - out.value * out.value)

    out._push = push
    return out


def pow_const(a: Node, exponent) -> Node:
    p = float(exponent)
    out = Node(a.value ** p, (a,), "pow")

    def push():
        a.grad += out.grad * p * a.value ** (p - 1.0)

    out._push = push
    return out


def vsum(a: Node, axis: int | None = None) -> Node:
    out = Node(a.value.sum(axis=axis), (a,), "sum")

    def push():
        out_g = out.grad
        if axis is None:
            a.grad += out_g
        else:
            a.grad += np.expand_dims(out_g, axis)

    out._push = push
    return out


def vmean(a: Node, axis: int | None = None) -> Node:
    n = a.value.size if axis is None else a.value.shape[axis]
    out = Node(a.value.mean(axis=axis), (a,), "mean")

    def push():
        out_g = out.grad
        if axis is None:
            a.grad += out_g / n
        else:
            a.grad += np.expand_dims(out_g, axis) / n

    out._push = push
    return out


def mse(pred: Node, target) -> Node:
    """Fused mean squared error against a constant target."""
    t = np.asarray(target, dtype=np.float64)
    if pred.value.shape != t.shape:
        raise ShapeError(f"mse shapes disagree: {pred.value.shape} vs "
                         f"{t.shape}")
    diff = pred.value - t
    out = Node(np.mean(diff * diff), (pred,), "mse")

    def push():
        pred.grad += out.grad * (2.0 / diff.size) * diff

    out._push = push
    return out


def gaussian_logp(mean: Node, log_std: Node, actions) -> Node:
    """Fused diagonal-Gaussian log-density of constant ``actions`` (B, D)
    under mean (B, D) and state-independent log-std (D,)."""
    a = np.asarray(actions, dtype=np.float64)
    if a.shape != mean.value.shape:
        raise ShapeError(f"actions shape {a.shape} != mean shape "
                         f"{mean.value.shape}")
    ls = log_std.value
    std = np.exp(ls)
    z = (a - mean.value) / std
    d = a.shape[-1]
    val = (-0.5 * (z * z).sum(axis=-1) - ls.sum()
           - 0.5 * d * np.log(2.0 * np.pi))
    out = Node(val, (mean, log_std), "gaussian_logp")

    def push():
        out_g = out.grad
        mean.grad += out_g[..., None] * (z / std)
        log_std.grad += (out_g[..., None] * (z * z - 1.0)).reshape(-1, d) \
            .sum(axis=0)

    out._push = push
    return out


def pick(a: Node, idx) -> Node:
    """Row-wise gather: out[i] = a[i, idx[i]] for a 2-d node."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.value.shape[0])
    out = Node(a.value[rows, idx], (a,), "pick")

    def push():
        np.add.at(a.grad, (rows, idx), out.grad)

    out._push = push
    return out


# -- kinked primitives (see module docstring for the tie convention) -----


def clip(a: Node, lo: float, hi: float) -> Node:
    out = Node(np.clip(a.value, lo, hi), (a,), "clip")
    mask = (a.value >= lo) & (a.value <= hi)

    def push():
        a.grad += out.grad * mask

    out._push = push
    return out


def maximum(a: Node, b) -> Node:
    bv = b.value if isinstance(b, Node) else _value(b)
    take_a = a.value >= bv
    out = Node(np.where(take_a, a.value, bv),
               (a, b) if isinstance(b, Node) else (a,), "maximum")

    def push():
        out_g = out.grad
        a.grad += _unbroadcast(out_g * take_a, a.value.shape)
        if isinstance(b, Node):
            b.grad += _unbroadcast(out_g * ~take_a, b.value.shape)

    out._push = push
    return out


def minimum(a: Node, b) -> Node:
    bv = b.value if isinstance(b, Node) else _value(b)
    take_a = a.value <= bv
    out = Node(np.where(take_a, a.value, bv),
               (a, b) if isinstance(b, Node) else (a,), "minimum")

    def push():
        out_g = out.grad
        a.grad += _unbroadcast(out_g * take_a, a.value.shape)
        if isinstance(b, Node):
            b.grad += _unbroadcast(out_g * ~take_a, b.value.shape)

    out._push = push
    return out


def relu(a: Node) -> Node:
    nonneg = a.value >= 0.0
    out = Node(np.where(nonneg, a.value, 0.0), (a,), "relu")

    def push():
        a.grad += out.grad * nonneg

    out._push = push
    return out


def leaky_relu(a: Node, slope: float = 0.01) -> Node:
    nonneg = a.value >= 0.0
    out = Node(np.where(nonneg, a.value, slope * a.value), (a,), "leaky_relu")

    def push():
        a.grad += out.grad * np.where(nonneg, 1.0, slope)

    out._push = push
    return out


def _elu_like(v: Array, alpha: float, celu_form: bool) -> tuple[Array, Array]:
    """Shared value/grad computation; branches evaluated only where
    selected so large positive inputs cannot overflow the exp."""
    out = v.copy()
    grad = np.ones_like(v)
    negm = v < 0.0
    if np.any(negm):
        z = v[negm] / alpha if celu_form else v[negm]
        e = np.exp(z)
        out[negm] = alpha * (e - 1.0)
        grad[negm] = e if celu_form else alpha * e
    return out, grad


def elu(a: Node, alpha: float = 1.0) -> Node:
    val, g = _elu_like(np.atleast_1d(a.value), alpha, celu_form=False)
    out = Node(val.reshape(a.value.shape), (a,), "elu")
    g = g.reshape(a.value.shape)

    def push():
        a.grad += out.grad * g

    out._push = push
    return out


def celu(a: Node, alpha: float = 1.0) -> Node:
    val, g = _elu_like(np.atleast_1d(a.value), alpha, celu_form=True)
    out = Node(val.reshape(a.value.shape), (a,), "celu")
    g = g.reshape(a.value.shape)

    def push():
        a.grad += out.grad * g

    out._push = push
    return out


def celu_clamped(a: Node, alpha: float, h: float) -> Node:
    """max(celu(x, alpha), -alpha*(1-h)) with gradient exactly 0 on the
    closed clamped region, so updates stop once the clamp engages."""
    val, g = _elu_like(np.atleast_1d(a.value), alpha, celu_form=True)
    floor = -alpha * (1.0 - h)
    clamped = val <= floor
    val = np.where(clamped, floor, val)
    g = np.where(clamped, 0.0, g)
    out = Node(val.reshape(a.value.shape), (a,), "celu_clamped")
    g = g.reshape(a.value.shape)

    def push():
        a.grad += out.grad * g

    out._push = push
    return out


# -- backward ------------------------------------------------------------


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in visited:
                continue
            visited.add(id(node))
        if i < len(node.parents):
            stack.append((node, i + 1))
            stack.append((node.parents[i], 0))
        else:
            order.append(node)
    return order


def backward(loss: Node, params: Sequence[Node] | None = None):
    """Backward pass from a scalar loss.

    Gradients of every node reachable from ``loss`` are zeroed and then
    accumulated exactly once in reverse topological order.  When
    ``params`` is given, returns a map id(param) -> gradient array, with
    zeros for parameters the loss does not depend on.
    """
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value):
        raise NumericOverflowError("loss value is not finite")

    topo = _toposort(loss)
    for node in topo:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._push is not None:
            node._push()

    if params is None:
        return None
    reached = {id(n) for n in topo}
    out = {}
    for p in params:
        g = p.grad if id(p) in reached else np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError("non-finite gradient for a parameter")
        out[id(p)] = g
    return out


def gradients(loss: Node, params: Sequence[Node]) -> list[Array]:
    """Convenience wrapper: gradient arrays in the order of ``params``."""
    gmap = backward(loss, params)
    return [gmap[id(p)] for p in params]


# -- MLP -----------------------------------------------------------------


@dataclass
class MlpParams:
    """Weights and biases of a fully connected net.

    ``weights[l]`` has shape (layer_sizes[l], layer_sizes[l+1]); hidden
    activations are tanh, the output layer is linear.
    """

    layer_sizes: list[int]
    weights: list[Node]
    biases: list[Node]

    def __post_init__(self):
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[l], self.layer_sizes[l + 1])
            if w.value.shape != want:
                raise ShapeError(f"layer {l} weight shape {w.value.shape}, "
                                 f"expected {want}")
            if b.value.shape != (self.layer_sizes[l + 1],):
                raise ShapeError(f"layer {l} bias shape {b.value.shape}")

    def nodes(self) -> list[Node]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def n_params(self) -> int:
        return sum(n.value.size for n in self.nodes())


def orthogonal(rng: np.random.Generator, rows: int, cols: int,
               gain: float = 1.0) -> Array:
    """Orthogonal-ish init: QR of a Gaussian matrix, sign-fixed."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator,
             out_gain: float = 1.0) -> MlpParams:
    """Tanh MLP with orthogonal init: gain 1 on hidden layers, ``out_gain``
    on the output layer; biases zero."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ShapeError(f"invalid layer sizes {sizes}")
    weights, biases = [], []
    for l in range(len(sizes) - 1):
        gain = out_gain if l == len(sizes) - 2 else 1.0
        weights.append(param(orthogonal(rng, sizes[l], sizes[l + 1], gain)))
        biases.append(param(np.zeros(sizes[l + 1])))
    return MlpParams(sizes, weights, biases)


def mlp_forward(params: MlpParams, x, hidden_activation=tanh) -> Node:
    """Forward pass; accepts a Node, a 1-d input, or a (B, in) batch."""
    xv = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    width = xv.shape[-1] if xv.ndim > 0 else None
    if width != params.layer_sizes[0]:
        raise ShapeError(f"input width {width} != first layer size "
                         f"{params.layer_sizes[0]}")
    h = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = affine(h, w, b)
        if l != last and hidden_activation is not None:
            h = hidden_activation(h)
    return h


def mlp_forward_np(params: MlpParams, x: Array,
                   hidden_activation=np.tanh) -> Array:
    """Plain-numpy twin of mlp_forward; same operation order, so results
    are bit-identical to the graph path."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.layer_sizes[0]:
        raise ShapeError(f"input width {x.shape[-1]} != first layer size "
                         f"{params.layer_sizes[0]}")
    h = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.value + b.value
        if l != last and hidden_activation is not None:
            h = hidden_activation(h)
    return h


# -- flat parameter vectors and checkpoints -------------------------------


def flatten_nodes(nodes: Sequence[Node]) -> Array:
    """Independent flat copy of the node values, concatenated in order."""
    return np.concatenate([n.value.ravel() for n in nodes])


def assign_flat(nodes: Sequence[Node], vec: Array) -> None:
    """Write a flat vector back into the nodes (inverse of flatten_nodes)."""
    total = sum(n.value.size for n in nodes)
    if vec.shape != (total,):
        raise ShapeError(f"flat vector length {vec.shape} != {total}")
    i = 0
    for n in nodes:
        k = n.value.size
        np.copyto(n.value, vec[i:i + k].reshape(n.value.shape))
        i += k


def save_flat(path, header: dict, vec: Array) -> None:
    """Checkpoint format: one JSON header line, then the raw little-endian
    float64 bytes of the flat parameter vector."""
    vec = np.asarray(vec, dtype="<f8")
    header = dict(header)
    header["count"] = int(vec.size)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(vec.tobytes())


def load_flat(path) -> tuple[dict, Array]:
    with open(path, "rb") as f:
        header_line = f.readline()
        header = json.loads(header_line.decode("utf-8"))
        vec = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    if vec.size != header.get("count"):
        raise ShapeError(f"checkpoint payload has {vec.size} floats, header "
                         f"says {header.get('count')}")
    return header, vec


# -- Adam ----------------------------------------------------------------


@dataclass
class AdamState:
    """Adaptive-moment state; arrays match the flat parameter vector."""

    m: Array
    v: Array
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(params: Array, grads: Array, state: AdamState,
              lr: float = 3e-4) -> tuple[Array, AdamState]:
    """One bias-corrected Adam update; functional, returns fresh arrays."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(f"adam shapes disagree: params {params.shape}, "
                         f"grads {grads.shape}, moments {state.m.shape}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m, v, t, state.beta1, state.beta2, state.eps)
