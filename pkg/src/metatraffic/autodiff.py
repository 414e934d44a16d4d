"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a fresh :class:`Tensor`; when any input requires a
gradient the output keeps references to its parents and a closure mapping the
output adjoint to input adjoints. :class:`Tape` orders the recorded graph so
adjoints are replayed in reverse topological order, each node exactly once.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    """Input outside the domain of an operation (log/sqrt of non-positive values)."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; all dispatch to the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Record a custom primitive: ``backward(g)`` returns one adjoint (or None) per parent."""
    return _node(np.asarray(data, dtype=np.float64), tuple(parents), backward, op)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
    out.requires_grad = False
    out.parents = ()
    out.backward_fn = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.3g})")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"sqrt: non-positive input (min {a.data.min():.3g})")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    """Hinge ``[x]_+``; subgradient 0 at the kink."""
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only where the input lies strictly inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data > lo
    if hi is not None:
        mask &= a.data < hi
    return _node(out, (a,), lambda g: (g * mask,), "clamp")


def straight_through(soft, threshold: float = 0.5) -> Tensor:
    """Forward: indicator(soft > threshold). Backward: identity."""
    soft = as_tensor(soft)
    hard = (soft.data > threshold).astype(np.float64)
    return _node(hard, (soft,), lambda g: (g,), "straight_through")


# -------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else unbroadcast(ga, a.shape),
            None if gb is None else unbroadcast(gb, b.shape),
        )

    return _node(out, (a, b), backward, "matmul")


def vecmat(u, W) -> Tensor:
    """Batched row-vector times matrix: (..., k) x (..., k, m) -> (..., m).

    Each leading index uses its own matrix (per-node generated weights).
    """
    u, W = as_tensor(u), as_tensor(W)
    if W.ndim < 2 or u.shape[-1] != W.shape[-2] or u.shape[:-1] != W.shape[:-2]:
        raise ShapeError("vecmat", u.shape, W.shape)
    out = np.einsum("...k,...km->...m", u.data, W.data)

    def backward(g):
        gu = np.einsum("...m,...km->...k", g, W.data) if u.requires_grad else None
        gW = u.data[..., :, None] * g[..., None, :] if W.requires_grad else None
        return gu, gW

    return _node(out, (u, W), backward, "vecmat")


def swapaxes(a, ax1: int = -1, ax2: int = -2) -> Tensor:
    a = as_tensor(a)
    return _node(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def transpose(a) -> Tensor:
    return swapaxes(a, -1, -2)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    return _node(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts), detail=f"axis={axis}") from None
    ax = axis % out.ndim
    edges = np.concatenate([[0], np.cumsum([t.shape[axis] for t in ts])])

    def backward(g):
        lead = (slice(None),) * ax
        return tuple(g[lead + (slice(edges[i], edges[i + 1]),)] for i in range(len(ts)))

    return _node(out, ts, backward, "concat")


def take(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (no gradient to indices)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _node(out, (a,), backward, "take")


def index(a, key) -> Tensor:
    """Basic slicing (ints/slices/Ellipsis)."""
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _node(np.array(out), (a,), backward, "index")


# ------------------------------------------------------------------ reductions


def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def backward(g):
        return (_expand(g, a.shape, axis, keepdims) / count,)

    return _node(out, (a,), backward, "mean")


def norm(a, axis: int = -1, keepdims: bool = True, floor: float = 0.0) -> Tensor:
    """L2 norm along ``axis``; values below ``floor`` are replaced by ``floor``
    (zero gradient there)."""
    a = as_tensor(a)
    raw = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    active = raw > floor
    out = np.where(active, raw, floor)
    safe = np.where(active, raw, 1.0)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * active * a.data / safe,)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return _node(res, (a,), backward, "norm")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


# ------------------------------------------------------------------- backward


class Tape:
    """Topologically ordered record of the operations behind an output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, out: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Accumulate adjoints from ``out`` back to every recorded node."""
        adj: dict[int, np.ndarray] = {
            id(out): np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=np.float64)
        }
        for node in reversed(self.nodes):
            g = adj.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = np.asarray(pg, dtype=np.float64)
        return adj


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` w.r.t. every tensor in ``params``.

    Parameters not on the path to ``loss`` receive zeros of their own shape.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, (), detail="loss must be a scalar")
    grads = {name: np.zeros_like(p.data) for name, p in params.items()}
    if not loss.requires_grad:
        return grads
    adj = Tape.from_output(loss).replay(loss)
    for name, p in params.items():
        g = adj.get(id(p))
        if g is not None:
            grads[name] = np.array(g, dtype=np.float64).reshape(p.shape)
    return grads


def parameters(arrays: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> dict[str, Tensor]:
    """Wrap arrays as leaf tensors; those in ``names`` (default: all) require grad."""
    chosen = set(arrays) if names is None else set(names)
    return {k: Tensor(v, requires_grad=k in chosen) for k, v in arrays.items()}
