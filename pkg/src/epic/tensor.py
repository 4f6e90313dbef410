"""Dense float64 tensors with tape-style reverse-mode differentiation.

Only tensors flagged ``requires_grad`` (and anything computed from them) are
recorded.  Frozen parameters take part in the forward pass like plain arrays
and never receive gradient buffers, which is what keeps the trainable graph
small.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = (
        "data",
        "requires_grad",
        "grad",
        "is_param",
        "name",
        "op",
        "_parents",
        "_backward",
        "saved_floats",
    )

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 is_param: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_param = is_param
        self.name = name
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.saved_floats = 0

    @classmethod
    def param(cls, data, requires_grad: bool = True, name: str | None = None) -> "Tensor":
        return cls(data, requires_grad=requires_grad, name=name, is_param=True)

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
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        op = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}{op}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _activation_floats(*tensors: Tensor) -> int:
    # parameters are stored anyway; only activations cost extra memory
    return sum(t.data.size for t in tensors if not t.is_param)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor],
            backward_fn: Callable, saved: int = 0) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_param = False
    out.name = None
    out.requires_grad = False
    out.op = None
    out._parents = ()
    out._backward = None
    out.saved_floats = 0
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.saved_floats = int(saved)
    return out


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError("matmul", a.shape, b.shape, detail=str(exc)) from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    saved = (_activation_floats(b) if a.requires_grad else 0) + (
        _activation_floats(a) if b.requires_grad else 0)
    return _result(out, "matmul", (a, b), bw, saved)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    for x, y in zip(reversed(sa), reversed(sb)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(op, sa, sb)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("elementwise_mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    saved = (_activation_floats(b) if a.requires_grad else 0) + (
        _activation_floats(a) if b.requires_grad else 0)
    return _result(a.data * b.data, "elementwise_mul", (a, b), bw, saved)


elementwise_mul = mul


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g / b.data, a.shape)
        if b.requires_grad:
            gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _result(out, "div", (a, b), bw, _activation_floats(a, b))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def concat_rows(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
                p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat_rows", *(q.shape for q in parts))
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bw(g):
        grads = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return tuple(grads)

    return _result(out, "concat_rows", parts, bw)


def slice_rows(a: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    a = _as_tensor(a)
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError("split_rows", a.shape, detail=f"rows [{start}:{stop})")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _result(a.data[idx], "split_rows", (a,), bw)


def split_rows(a: Tensor, sizes: Sequence[int], axis: int = -2) -> tuple[Tensor, ...]:
    a = _as_tensor(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax] or any(s < 1 for s in sizes):
        raise ShapeError("split_rows", a.shape, detail=f"sizes {list(sizes)}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_rows(a, start, start + s, axis=ax))
        start += s
    return tuple(out)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _result(np.maximum(a.data, 0.0), "relu", (a,),
                   lambda g: (g * mask,), a.size)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,), out.size)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,),
                   _activation_floats(a))


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,), out.size)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),), out.size)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    keep = out == a.data
    return _result(out, "clamp", (a,), lambda g: (g * keep,), a.size)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("softmax_over_axis", a.shape, detail=f"axis {axis}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax_over_axis", (a,), bw, out.size)


softmax_over_axis = softmax


def layer_norm(a: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, "layer_norm", (a,), bw, xhat.size + inv.size)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"axes {axes}")
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,),
                   lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return _result(out, "broadcast_to", (a,), lambda g: (_unbroadcast(g, a.shape),))


def sum_over_axis(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.atleast_1d(out), "sum", (a,), bw)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(np.atleast_1d(out), "mean_over_axis", (a,), bw)


mean_over_axis = mean


def take_along_axis(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    a = _as_tensor(a)
    out = np.take_along_axis(a.data, np.asarray(idx), axis=axis)
    idx = np.broadcast_to(idx, out.shape)

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, _expand_index(idx, axis, a.ndim), g)
        return (full,)

    return _result(out, "take_along_axis", (a,), bw, idx.size)


def _expand_index(idx: np.ndarray, axis: int, ndim: int):
    axis %= ndim
    grids = np.indices(idx.shape, sparse=True)
    return tuple(idx if i == axis else grids[i] for i in range(ndim))


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of a 2-D table indexed by integer ids."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("gather_rows", table.shape, ids.shape, detail="id out of range")

    def bw(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], "gather_rows", (table,), bw, ids.size)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "concat_rows": concat_rows,
    "split_rows": split_rows,
    "relu": relu,
    "softmax_over_axis": softmax,
    "layer_norm": layer_norm,
    "transpose": transpose,
    "mean_over_axis": mean,
    "elementwise_mul": mul,
}


def primitive_forward(op: str, inputs: Sequence[Tensor], **kwargs):
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if op == "concat_rows":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every trainable leaf."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no trainable leaf participates")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def gradients(loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Run backward and return each leaf's gradient, zeros where loss ignores it."""
    for leaf in leaves:
        leaf.grad = None
    backward(loss)
    return [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad for leaf in leaves]


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Recorded (non-leaf) nodes reachable from ``root``, inputs first."""
    return [n for n in topological_order(root) if not n.is_leaf]


def saved_activation_floats(root: Tensor) -> int:
    return int(np.sum([n.saved_floats for n in graph_nodes(root)])) if root.requires_grad else 0


def first_nonfinite(root: Tensor) -> Tensor | None:
    for node in graph_nodes(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def parameters_with_grad(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.grad is not None]
