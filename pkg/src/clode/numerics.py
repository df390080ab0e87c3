"""Dense tensors with reverse-mode automatic differentiation.

Every :class:`Tensor` wraps a float64 numpy array. Operations on tensors that
require gradients record a node (parents + local backward rule) so that
:func:`backward` can replay the graph in reverse topological order.

Elementwise ops follow numpy broadcasting; gradients are summed back over
broadcast axes.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericsError",
    "Tensor",
    "GradMap",
    "backward",
    "no_grad",
    "finite_diff_grad",
    "tensor",
    "add",
    "subtract",
    "multiply",
    "divide",
    "matmul",
    "linear",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "square",
    "sqrt",
    "tsum",
    "mean",
    "concat",
    "stack",
    "MlpParams",
    "GruParams",
    "init_mlp",
    "init_gru",
    "mlp_forward",
    "gru_cell",
]


class NumericsError(ValueError):
    """Shape mismatch, non-finite result or misuse of the gradient tape."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _Node:
    __slots__ = ("parents", "backward_fn", "op")

    def __init__(self, parents, backward_fn, op):
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """A float64 array, optionally tracked on the gradient tape."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*ts: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _finish(op: str, data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericsError(f"{op}: non-finite result")
    out = Tensor(data)
    if _tracked(*parents):
        out.requires_grad = True
        out.node = _Node(parents, backward_fn, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead > 0:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise NumericsError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", a.data + b.data, (a, b), bw)


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("subtract", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish("subtract", a.data - b.data, (a, b), bw)


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("multiply", a.data * b.data, (a, b), bw)


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("divide", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish("divide", out, (a, b), bw)


def negate(a) -> Tensor:
    a = _as_tensor(a)
    return _finish("negate", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product; a may carry leading batch axes, b must be 2-d."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise NumericsError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        ga = g @ b.data.T
        if a.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _finish("matmul", a.data @ b.data, (a, b), bw)


def linear(x, w, b, activation: str | None = None) -> Tensor:
    """Fused ``act(x @ w + b)`` with ``activation`` in ``{None, "tanh"}``."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise NumericsError(f"linear: shapes {x.shape}, {w.shape}, {b.shape} do not conform")
    out = x.data @ w.data + b.data
    if activation == "tanh":
        out = np.tanh(out)
    elif activation is not None:
        raise NumericsError(f"linear: unknown activation {activation!r}")

    def bw(g):
        if activation == "tanh":
            g = g * (1.0 - out * out)
        g2 = g.reshape(-1, w.shape[1])
        x2 = x.data.reshape(-1, w.shape[0])
        return g @ w.data.T, x2.T @ g2, g2.sum(axis=0)

    return _finish("linear", out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# elementwise unary ops


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _finish("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _finish("log", out, (a,), lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish("softplus", out, (a,), lambda g: (g * sig,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _finish("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        return _finish("sqrt", out, (a,), lambda g: (0.5 * g / out,))


# ---------------------------------------------------------------------------
# reductions and structural ops


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _finish("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise NumericsError("mean: empty reduction")
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise NumericsError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _finish("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing (the slice op)."""
    a = _as_tensor(a)
    out = a.data[index]

    basic = _is_basic(index)

    def bw(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _finish("slice", np.array(out), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise NumericsError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise NumericsError(f"concat: shapes {[t.shape for t in ts]} do not conform") from None
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _finish("concat", out, tuple(ts), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise NumericsError("stack: no inputs")
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise NumericsError(f"stack: shapes {[t.shape for t in ts]} do not conform")
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _finish("stack", out, tuple(ts), bw)


# ---------------------------------------------------------------------------
# backward pass


class GradMap:
    """Gradients keyed by tensor identity.

    Lookup of a leaf that the loss does not depend on yields zeros of the
    leaf's shape.
    """

    def __init__(self):
        self._grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _set(self, t: Tensor, g: np.ndarray) -> None:
        self._grads[id(t)] = (t, g)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __getitem__(self, t: Tensor) -> Tensor:
        hit = self._grads.get(id(t))
        if hit is None:
            return Tensor(np.zeros(t.shape))
        return Tensor(hit[1])

    def array(self, t: Tensor) -> np.ndarray:
        hit = self._grads.get(id(t))
        return np.zeros(t.shape) if hit is None else hit[1]

    def __len__(self) -> int:
        return len(self._grads)

    def tensors(self) -> list[Tensor]:
        return [t for t, _ in self._grads.values()]


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
    return order


def backward(loss: Tensor) -> GradMap:
    """Gradients of a scalar ``loss`` with respect to every reachable leaf."""
    if loss.size != 1:
        raise NumericsError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = GradMap()
    if not loss.requires_grad:
        return grads
    order = _topological_order(loss)
    acc: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    # accumulators we allocated ourselves may be updated in place
    owned: set[int] = set()
    for t in reversed(order):
        g = acc.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            grads._set(t, g)
            continue
        for p, gp in zip(t.node.parents, t.node.backward_fn(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            prev = acc.get(key)
            if prev is None:
                acc[key] = gp
            elif key in owned:
                prev += gp
            else:
                acc[key] = prev + gp
                owned.add(key)
    return grads


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-6) -> Tensor:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise NumericsError("finite_diff_grad: eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)

    def value(arr):
        r = f(Tensor(arr.reshape(base.shape)))
        return float(r.data) if isinstance(r, Tensor) else float(r)

    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xm = flat.copy()
            xp[i] += eps
            xm[i] -= eps
            out[i] = (value(xp) - value(xm)) / (2.0 * eps)
    return Tensor(out.reshape(base.shape))


# ---------------------------------------------------------------------------
# neural building blocks


@dataclass
class MlpParams:
    """Weights ``(in, out)`` and biases per layer; tanh between layers, linear output."""

    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise NumericsError("MlpParams: weights and biases differ in count")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise NumericsError(f"MlpParams: layer {i} has weight {w.shape}, bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise NumericsError(
                    f"MlpParams: layer {i - 1} out-dim {self.weights[i - 1].shape[1]} "
                    f"!= layer {i} in-dim {w.shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}.{i}.weight", w))
            out.append((f"{prefix}.{i}.bias", b))
        return out


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    s = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if len(sizes) < 2:
        raise NumericsError("init_mlp: need at least input and output sizes")
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(_uniform(rng, n_in, (n_in, n_out)))
        biases.append(Tensor(np.zeros(n_out), requires_grad=True))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x) -> Tensor:
    x = _as_tensor(x)
    if x.shape[-1] != params.in_dim:
        raise NumericsError(f"mlp_forward: input dim {x.shape[-1]} != layer in-dim {params.in_dim}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = linear(x, w, b, activation="tanh" if i < last else None)
    return x


@dataclass
class GruParams:
    """GRU gates; input matrices ``(input, hidden)``, hidden matrices ``(hidden, hidden)``."""

    w_update: Tensor
    u_update: Tensor
    b_update: Tensor
    w_reset: Tensor
    u_reset: Tensor
    b_reset: Tensor
    w_cand: Tensor
    u_cand: Tensor
    b_cand: Tensor

    def __post_init__(self):
        n_in, h = self.w_update.shape
        for name in ("w_update", "w_reset", "w_cand"):
            if getattr(self, name).shape != (n_in, h):
                raise NumericsError(f"GruParams: {name} has shape {getattr(self, name).shape}")
        for name in ("u_update", "u_reset", "u_cand"):
            if getattr(self, name).shape != (h, h):
                raise NumericsError(f"GruParams: {name} has shape {getattr(self, name).shape}")
        for name in ("b_update", "b_reset", "b_cand"):
            if getattr(self, name).shape != (h,):
                raise NumericsError(f"GruParams: {name} has shape {getattr(self, name).shape}")

    @property
    def input_size(self) -> int:
        return self.w_update.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_update.shape[1]

    _FIELDS = (
        "w_update", "u_update", "b_update",
        "w_reset", "u_reset", "b_reset",
        "w_cand", "u_cand", "b_cand",
    )

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{n}", getattr(self, n)) for n in self._FIELDS]


def init_gru(input_size: int, hidden_size: int, rng: np.random.Generator) -> GruParams:
    def w():
        return _uniform(rng, input_size, (input_size, hidden_size))

    def u():
        return _uniform(rng, hidden_size, (hidden_size, hidden_size))

    def b():
        return Tensor(np.zeros(hidden_size), requires_grad=True)

    return GruParams(w(), u(), b(), w(), u(), b(), w(), u(), b())


def gru_cell(params: GruParams, hidden, x) -> Tensor:
    """One GRU update ``h' = (1 - u) * h + u * candidate``."""
    hidden, x = _as_tensor(hidden), _as_tensor(x)
    if hidden.shape[-1] != params.hidden_size:
        raise NumericsError(f"gru_cell: hidden dim {hidden.shape[-1]} != {params.hidden_size}")
    if x.shape[-1] != params.input_size:
        raise NumericsError(f"gru_cell: input dim {x.shape[-1]} != {params.input_size}")
    u = sigmoid(matmul(x, params.w_update) + matmul(hidden, params.u_update) + params.b_update)
    r = sigmoid(matmul(x, params.w_reset) + matmul(hidden, params.u_reset) + params.b_reset)
    cand = tanh(matmul(x, params.w_cand) + matmul(r * hidden, params.u_cand) + params.b_cand)
    return (1.0 - u) * hidden + u * cand
