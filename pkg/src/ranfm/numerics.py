"""Dense tensors with reverse-mode differentiation over a recorded graph.

Values live in numpy arrays. Every differentiable op returns a new
``Tensor`` that remembers its parents and a closure mapping the output
gradient to parent gradients; ``backward`` walks that graph in reverse
topological order.

Precision defaults to float32. Verification code switches to float64 with
``precision(64)``.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationGraph",
    "DimensionError",
    "NumericError",
    "GraphError",
    "precision",
    "set_precision",
    "get_dtype",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "activation",
    "relu",
    "gelu",
    "concat",
    "backward",
    "finite_difference_check",
    "gradient_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class GraphError(RuntimeError):
    """The computation graph is malformed (cycle, non-scalar loss)."""


_state = {"dtype": np.dtype(np.float32), "grad": True}


def get_dtype() -> np.dtype:
    return _state["dtype"]


def set_precision(bits: int) -> None:
    if bits == 32:
        _state["dtype"] = np.dtype(np.float32)
    elif bits == 64:
        _state["dtype"] = np.dtype(np.float64)
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextlib.contextmanager
def precision(bits: int):
    previous = _state["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return plain constant tensors."""
    previous = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = previous


def grad_enabled() -> bool:
    return _state["grad"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _add(self, as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other, like=self))

    def __rsub__(self, other):
        return _add(as_tensor(other, like=self), -self)

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        return _mul(self, as_tensor(other, like=self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant scalar")
        inv = 1.0 / float(other)
        return _record(self.data * self.data.dtype.type(inv), (self,),
                       lambda g: (g * inv,), "scale")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        out = self.data.reshape(shape)
        return _record(out, (self,), lambda g: (g.reshape(original),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(range(self.ndim))[::-1]
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return _record(self.data.transpose(axes), (self,),
                       lambda g: (g.transpose(inverse),), "transpose")

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.swap_last()

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _record(out, (self,), grad_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) / count

    def square(self) -> "Tensor":
        x = self.data
        return _record(x * x, (self,), lambda g: (2.0 * g * x,), "square")


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _record(out: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(out)
    t.grad = None
    t.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = grad_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    x, y = a.data, b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)), "mul")


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    dtype = a.data.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), grad_fn, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    try:
        out = np.matmul(x, y)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(x, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, x.shape),
                None if gb is None else _unbroadcast(gb, y.shape))

    return _record(out, (a, b), grad_fn, "matmul")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with row-max subtraction."""
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax received NaN input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), grad_fn, "softmax")


def log_softmax_rows(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("log_softmax received NaN input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _record(out, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit (population) variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm width {d} does not match gain {gain.shape} / bias {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx = None
        if a.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (a, gain, bias), grad_fn, "layer_norm")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _record(np.where(on, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * on,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), grad_fn, "gelu")


_ACTIVATIONS = {"relu": relu, "gelu": gelu}


def activation(a: Tensor, kind: str = "relu") -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(a)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, grad_fn, "concat")


class ComputationGraph:
    """Topologically ordered view of every recorded node feeding ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = self._toposort(output)

    @staticmethod
    def _toposort(output: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack = [(output, iter(output._parents))]
        state[id(output)] = 1
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                mark = state.get(id(p))
                if mark == 1:
                    raise GraphError("cycle detected in computation graph")
                if mark is None and p.requires_grad:
                    state[id(p)] = 1
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
                state[id(node)] = 2
                order.append(node)
        return order

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients are assigned, not accumulated. Leaves listed in ``leaves``
    that the loss does not depend on receive zero gradients.
    Returns a map from ``id(leaf)`` to its gradient.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    extra = list(leaves) if leaves is not None else []
    for leaf in extra:
        leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return {id(leaf): leaf.grad for leaf in extra}

    graph = ComputationGraph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[int, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            node.grad = g if g is not None else np.zeros_like(node.data)
            result[id(node)] = node.grad
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in extra:
        result.setdefault(id(leaf), leaf.grad)
    return result


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` closes over ``params`` and returns a scalar tensor. Every
    coordinate of every parameter is perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params:
        if p.data.dtype != np.float64:
            raise NumericError("gradient checks require 64-bit tensors")
        p.requires_grad = True
    loss = f()
    backward(loss, leaves=params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
            worst = max(worst, _rel_err(a.reshape(-1), numeric))
    return worst


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Single-input form of :func:`gradient_check`."""
    return gradient_check(lambda: f(x), [x], h)
