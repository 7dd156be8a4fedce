"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive returns a new :class:`Tensor` that remembers its inputs and a
closure mapping the output gradient to input gradients. Node ids come from a
process-wide counter, so sorting reachable nodes by id gives the execution
order and :func:`backward` walks it strictly in reverse.

Conventions fixed for exact tests: relu has gradient 0 at 0, ``clip`` has
gradient 0 on and outside its bounds, ``minimum`` routes ties to its first
argument, ``abs`` has gradient 0 at 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_node_ids = itertools.count()

DTYPE = np.float64


class Tensor:
    """A node in a dynamically recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

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

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out.op = op
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# binary elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _node("subtract", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return _node("multiply", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    ad, bd = a.data, b.data
    take_a = ad <= bd

    def backward(g):
        return (_unbroadcast(np.where(take_a, g, 0.0), ad.shape),
                _unbroadcast(np.where(take_a, 0.0, g), bd.shape))

    return _node("minimum", np.where(take_a, ad, bd), (a, b), backward)


def broadcast_scalar(s, x) -> Tensor:
    """Multiply tensor ``x`` by a scalar (constant or 0-d tensor)."""
    s, x = as_tensor(s), as_tensor(x)
    if s.size != 1:
        raise ValueError(f"broadcast_scalar: expected scalar, got shape {s.shape}")
    return multiply(s, x)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node("matmul", ad @ bd, (a, b), backward)


# ---------------------------------------------------------------------------
# unary elementwise
# ---------------------------------------------------------------------------

def negate(x) -> Tensor:
    x = as_tensor(x)
    return _node("negate", -x.data, (x,), lambda g: (-g,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _node("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _node("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (np.where(mask, g, 0.0),))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _node("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _node("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _node("log", y, (x,), lambda g: (g / xd,))


def clip(x, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clip: lower bound {lo} exceeds upper bound {hi}")
    x = as_tensor(x)
    xd = x.data
    inside = (xd > lo) & (xd < hi)
    return _node("clip", np.clip(xd, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


def elu(x) -> Tensor:
    # relu(x) + exp(min(x, 0)) - 1
    x = as_tensor(x)
    return subtract(add(relu(x), exp(minimum(x, 0.0))), 1.0)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.size if axis is None else shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _node("mean", np.mean(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _node("reshape", y, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the last one by default)."""
    ts = [as_tensor(t) for t in tensors]
    ndim = ts[0].ndim
    ax = axis % ndim if ndim else 0
    for t in ts[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ValueError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node("concat", np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node("softmax", p, (x,), backward)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node("log_softmax", y, (x,), backward)


def gather(x, index) -> Tensor:
    """Pick ``x[..., index[...]]`` along the last axis."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ValueError(f"gather: index shape {idx.shape} does not match {x.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise IndexError(f"gather: index out of range for last axis of size {x.shape[-1]}")
    shape = x.shape
    expanded = idx[..., None]

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, expanded, g[..., None], axis=-1)
        return (out,)

    return _node("gather", np.take_along_axis(x.data, expanded, axis=-1)[..., 0], (x,), backward)


def forward_primitive(op: str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "subtract": subtract,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "square": square,
    "negate": negate,
    "sum": sum,
    "mean": mean,
    "concat": concat,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "gather": gather,
    "clip": clip,
    "minimum": minimum,
    "broadcast_scalar": broadcast_scalar,
    "sigmoid": sigmoid,
    "abs": absolute,
    "reshape": reshape,
}


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _reachable(loss: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t.node_id, reverse=True)


def backward(loss: Tensor, params: Iterable[Tensor] | Mapping[str, Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    When ``params`` is given, returns their gradients (zeros for leaves the
    loss does not reach) as a list, or a dict when ``params`` is a mapping.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    if params is None:
        return None
    if isinstance(params, Mapping):
        return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grad(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    items = params.values() if isinstance(params, Mapping) else params
    for p in items:
        p.grad = None


def grad(fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``fn`` and return (value, gradients w.r.t. ``params``)."""
    zero_grad(params)
    loss = fn()
    grads = backward(loss, params)
    zero_grad(params)
    return loss.item(), grads


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(err < self.tolerance for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_difference_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                            h: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` closes over ``params`` and is re-evaluated after in-place
    perturbation of each coordinate. The per-coordinate error is
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")
    value, analytic = grad(fn, params)
    if not np.isfinite(value):
        raise FloatingPointError(f"finite_difference_check: non-finite function value {value}")
    errors = {}
    for name, p in params.items():
        data = p.data  # perturbed through its own index so non-contiguous arrays work
        g_ad = analytic[name]
        worst = 0.0
        for k in np.ndindex(data.shape):
            orig = data[k]
            data[k] = orig + h
            f_plus = fn().item()
            data[k] = orig - h
            f_minus = fn().item()
            data[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"finite_difference_check: non-finite value perturbing {name}[{k}]")
            g_fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(g_ad[k] - g_fd) / max(1.0, abs(g_ad[k]), abs(g_fd))
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, tolerance)
