"""Dense float64 tensors with a reverse-mode tape.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block). Outside a tape nothing is recorded, which is the inference
path. The tape is held in a context variable, so each thread has its own.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w @ w).sum()
    ...     tape.backward(loss)
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

MASK_VALUE = -1e30

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "rankforge_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GraphError(RuntimeError):
    """Misuse of the tape, e.g. a repeated backward pass."""


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records operations in construction order for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._used = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, node: _Node) -> None:
        if self._used:
            raise GraphError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []
        self._used = False

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every requires-grad tensor that feeds ``loss``.

        Leaf gradients accumulate into any existing ``.grad``; intermediate
        tensors receive a fresh gradient.
        """
        if self._used:
            raise GraphError("backward() already ran on this tape; call reset() first")
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            node.output.grad = g_out
            for inp, g_in in zip(node.inputs, node.backward(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                if inp._node is None:
                    leaves[key] = inp
        if loss._node is None and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        # drop the tensor <-> node cycles so saved activations free promptly
        for node in self.nodes:
            node.output._node = None
        self.nodes = []


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _emit(op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    tape = _active_tape.get()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = _Node(op, inputs, out, backward)
        out._node = node
        tape.record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    ex = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + _GELU_A * xd * xd * xd))
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        x2 = xd * xd
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit("gelu", y, (x,), backward)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _emit("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("transpose", y, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def getitem(x: Tensor, index) -> Tensor:
    y = np.ascontiguousarray(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", y, (x,), backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the first axis; repeated rows accumulate on backward."""
    index = np.ascontiguousarray(index, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"take_rows: index out of range for {x.shape[0]} rows")
    y = x.data[index]
    out_shape = (index.size,) + x.shape[1:]

    def backward(g):
        full = np.zeros_like(x.data)
        width = int(np.prod(x.shape[1:], dtype=np.int64))
        kernels.scatter_add_rows(
            full.reshape(x.shape[0], width), index, np.ascontiguousarray(g).reshape(index.size, width)
        )
        return (full,)

    return _emit("take_rows", y.reshape(out_shape), (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``table`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = take_rows(table, ids.reshape(-1))
    return reshape(rows, ids.shape + table.shape[1:])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(lo, hi), axis=axis))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None) -> Tensor:
    y = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", y, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis), 1.0 / count)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_(mul(a, b))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading dimensions.

    A right operand with two dimensions is applied as one flat GEMM over all
    leading rows of ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    if b.ndim == 2:
        a2 = a.data.reshape(-1, a.shape[-1])
        y = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, b.shape[1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _emit("matmul", y, (a, b), backward)
    try:
        y = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot batch {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", y, (a, b), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax_lastdim: empty last dimension in shape {x.shape}")
    flat = np.ascontiguousarray(x.data).reshape(-1, x.shape[-1])
    y = kernels.softmax_forward(flat)

    def backward(g):
        dx = kernels.softmax_backward(y, np.ascontiguousarray(g).reshape(y.shape))
        return (dx.reshape(x.shape),)

    return _emit("softmax", y.reshape(x.shape), (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} must match last dim of {x.shape}"
        )
    flat = np.ascontiguousarray(x.data).reshape(-1, n)
    y, xhat, rstd = kernels.layernorm_forward(flat, gain.data, bias.data, float(eps))

    def backward(g):
        dx, dg, db = kernels.layernorm_backward(
            np.ascontiguousarray(g).reshape(flat.shape), xhat, rstd, gain.data
        )
        return dx.reshape(x.shape), dg, db

    return _emit("layernorm", y.reshape(x.shape), (x, gain, bias), backward)


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Per-head softmax(q k^T / sqrt(dh) + mask) v on projected ``(n, l, dim)`` inputs."""
    n, lq, dim = q.shape
    if k.shape != v.shape or k.shape[0] != n or k.shape[2] != dim:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    if dim % heads:
        raise ValueError(f"model dim {dim} is not divisible by {heads} heads")
    lk = k.shape[1]
    if mask is None:
        bias = np.zeros((n, lk))
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n, lk):
            raise ShapeError(f"attention: mask shape {mask.shape} != {(n, lk)}")
        bias = np.where(mask, 0.0, MASK_VALUE)
    out, weights = kernels.attention_forward(q.data, k.data, v.data, bias, int(heads))

    def backward(g):
        return kernels.attention_backward(np.ascontiguousarray(g), q.data, k.data, v.data, weights, int(heads))

    return _emit("attention", out, (q, k, v), backward)


def multihead_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads, then the output projection.

    ``query`` is ``(batch, lq, dim)``; ``key`` and ``value`` are
    ``(batch, lk, dim)``. ``mask`` marks valid key positions as
    ``(batch, lk)`` booleans; invalid keys get an additive ``-1e30``.
    """
    if query.shape[-1] % heads:
        raise ValueError(f"model dim {query.shape[-1]} is not divisible by {heads} heads")
    context = attention_core(query @ wq, key @ wk, value @ wv, heads, mask)
    return context @ wo


# ---------------------------------------------------------------- external terms


def external_loss(x: Tensor, value: float, grad: np.ndarray) -> Tensor:
    """Scalar node whose gradient w.r.t. ``x`` was computed outside the tape."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ShapeError(f"external_loss: grad shape {grad.shape} != input shape {x.shape}")
    return _emit("external_loss", np.asarray(float(value)), (x,), lambda g: (grad * g,))
