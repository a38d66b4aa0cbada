"""Dense tensors with reverse-mode gradient accumulation.

A :class:`Tensor` wraps a NumPy array.  Every operation returns a fresh
tensor; when at least one input requires a gradient the result remembers its
parents and a backward closure.  :func:`backward` linearises the graph that
hangs off a scalar root (the *tape*, in recording order) and replays the
closures in reverse, accumulating into the ``grad`` of every leaf that
requires one.

Broadcasting rules
------------------
Elementwise binary ops (``add``, ``sub``, ``mul``, ``div``) follow NumPy
broadcasting; the backward pass sums the incoming gradient over every
broadcast axis so each operand receives a gradient of its own shape.  Python
scalars and NumPy arrays are lifted to constant tensors with the dtype of the
tensor operand.  ``matmul`` is strictly 2-D by 2-D.  Reductions take an
``axis`` (int or None).

Precision
---------
The default dtype is float32.  Pass ``dtype=np.float64`` to the leaves to run
a whole graph in double precision (used by the gradient oracles).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

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

    def __getitem__(self, index):
        return gather(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_reduce(self, axis)

    def mean(self, axis=None):
        return mean_reduce(self, axis)


def _scalar_error(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Return ``x`` unchanged if it is a tensor, else a constant tensor."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    return Tensor(x, dtype=dtype or DEFAULT_DTYPE)


def _lift_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_finite(name: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{name} produced a non-finite value")


def _make(name: str, out: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    _check_finite(name, out)
    parents = tuple(parents)
    res = Tensor(out, dtype=out.dtype)
    res.op = name
    if any(p.requires_grad for p in parents):
        res.requires_grad = True
        res._parents = parents
        res._backward = backward_fn
    return res


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make("relu", np.where(on, a.data, 0).astype(a.dtype), (a,), lambda g: (g * on,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0)
        return (g * d,)

    return _make("sqrt", out, (a,), bw)


def tps_kernel(sq_dist: Tensor) -> Tensor:
    """Thin-plate radial basis ``U = r^2 log(r^2)`` evaluated on ``r^2``.

    ``U(0) = 0`` by continuity.  The derivative ``log(r^2) + 1`` diverges at
    0 but is always chained with ``d(r^2)/dx = 2x = 0`` there, so it is
    reported as 0 to keep the composite gradient exact.
    """
    s = as_tensor(sq_dist)
    pos = s.data > 0
    safe = np.where(pos, s.data, 1)
    out = np.where(pos, s.data * np.log(safe), 0).astype(s.dtype)
    return _make("tps_kernel", out, (s,), lambda g: (g * np.where(pos, np.log(safe) + 1, 0),))


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def gather(a: Tensor, index) -> Tensor:
    """NumPy-style indexing (slices, integer arrays); gradients scatter-add back."""
    a = as_tensor(a)
    out = np.array(a.data[index], dtype=a.dtype)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("gather", out, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ref = next((t for t in tensors if isinstance(t, Tensor)), None)
    ts = [as_tensor(t, like=ref) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = []
    for t in ts:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), bw)


def mean_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_reduce(a, axis), 1.0 / n)


def max_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    """Maximum along ``axis``; gradient goes to the first maximal index."""
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        k = int(np.argmax(flat))

        def bw_all(g):
            full = np.zeros(flat.shape, dtype=a.dtype)
            full[k] = g
            return (full.reshape(a.shape),)

        return _make("max", np.asarray(flat[k], dtype=a.dtype), (a,), bw_all)

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make("max", out, (a,), bw)


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; subgradient 0 where the norm vanishes."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def bw(g):
        n = np.expand_dims(out, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(n > 0, a.data / np.where(n > 0, n, 1), 0)
        return (np.expand_dims(g, axis) * unit,)

    return _make("norm", out, (a,), bw)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale vectors along ``axis`` to unit length; all-zero vectors stay zero."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)) + eps
    nz = n > 0
    safe = np.where(nz, n, 1)
    out = np.where(nz, a.data / safe, 0).astype(a.dtype)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(nz, (g - out * dot) / safe, 0),)

    return _make("l2_normalize", out, (a,), bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in recording (topological) order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``root``.

    Gradients accumulate into existing ``grad`` buffers, so clear them between
    steps (see :meth:`Tensor.zero_grad`).
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(_tape(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
