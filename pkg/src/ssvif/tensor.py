"""Dense n-dimensional arrays with eager reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that has at least one input requiring
gradients records a backward closure. :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and accumulates gradients into
the ``grad`` buffer of every reachable leaf.

Storage is a numpy array. Training paths run in float32; passing float64
data gives a 64-bit graph suitable for finite-difference checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / validation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy-style broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible") from None


class Tensor:
    """A value in the autodiff graph.

    ``grad`` is allocated (zero-filled) for leaves created with
    ``requires_grad=True``. Intermediate results only hold a gradient while a
    backward pass is running.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward -------------------------------------------------------------

    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Repeated calls accumulate; reset with ``zero_grad`` between steps.
        With ``retain_graph=False`` the recorded graph is released afterwards.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")

        order = _topo_order(self)
        seed = np.ones_like(self.data)
        if self.is_leaf:
            self.grad += seed
            return
        self.grad = seed
        for node in reversed(order):
            g = node.grad
            if node.is_leaf or g is None:
                continue
            grads = node._backward(g)
            seen: set[int] = set()
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                if parent.grad is None:
                    # buffers handed to a parent must be private and writable
                    if id(pg) in seen or not pg.flags.writeable:
                        pg = pg.copy()
                    parent.grad = pg
                else:
                    parent.grad += pg
                seen.add(id(pg))
        for node in order:
            if not node.is_leaf:
                node.grad = None
                if not retain_graph:
                    node._parents = ()
                    node._backward = None

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __pow__(self, exponent):
        if exponent == 2:
            return mul(self, self)
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self, eps: float = 0.0):
        return log(self, eps)

    def abs(self):
        return tabs(self)

    def sqrt(self):
        return sqrt(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float32))
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap python scalars using the dtype of the tensor operand."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        gq = g / bd
        ga = unbroadcast(gq, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-gq * out, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "div")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)

    def backward(g):
        return (g * c,)

    return Tensor._result(a.data * c, (a,), backward, "scalar_mul")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def backward(g):
        return (g * p * ad ** (p - 1),)

    return Tensor._result(ad ** p, (a,), backward, "pow")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * (out > 0),)

    return Tensor._result(out, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)

    def backward(g):
        return (g * out * (1 - out),)

    return Tensor._result(out, (a,), backward, "sigmoid")


def tabs(a: Tensor) -> Tensor:
    x = a.data

    def backward(g):
        return (g * np.sign(x),)

    return Tensor._result(np.abs(x), (a,), backward, "abs")


def maximum(a, b) -> Tensor:
    """Elementwise max. At ties the gradient goes to ``a``."""
    a, b = _coerce_pair(a, b)
    broadcast_shape(a.shape, b.shape)
    take_a = a.data >= b.data

    def backward(g):
        ga = unbroadcast(g * take_a, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * ~take_a, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._result(out, (a,), backward, "exp")


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``a + eps``."""
    shifted = a.data + a.dtype.type(eps) if eps else a.data

    def backward(g):
        return (g / shifted,)

    return Tensor._result(np.log(shifted), (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor._result(out, (a,), backward, "sqrt")


# -- reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple | None:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def _expand_grad(g: np.ndarray, shape: tuple, axes, keepdims: bool) -> np.ndarray:
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    elif axes is None and not keepdims:
        g = g.reshape((1,) * len(shape))
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        return (_expand_grad(g, shape, axes, keepdims),)

    return Tensor._result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise DimensionError("mean over an empty axis")
    shape = a.shape
    scale = a.dtype.type(1.0 / count)

    def backward(g):
        return (_expand_grad(g * scale, shape, axes, keepdims),)

    return Tensor._result(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), backward, "mean")


def l1_norm(a: Tensor, axis=None) -> Tensor:
    return tsum(tabs(a), axis)


def l2_norm_sq(a: Tensor, axis=None) -> Tensor:
    return tsum(mul(a, a), axis)


# -- shape manipulation ----------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        return (g.reshape(orig),)

    return Tensor._result(out, (a,), backward, "reshape")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _needs_add_at(index) else full.__setitem__(index, g)
        return (full,)

    return Tensor._result(np.array(out, copy=True), (a,), backward, "getitem")


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"cannot concat shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack_batch(tensors: Sequence[Tensor]) -> Tensor:
    """Stack [C,H,W] tensors into one [N,C,H,W] tensor."""
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def pad2d(a: Tensor, pad: int, mode: str = "constant") -> Tensor:
    """Pad the two trailing (spatial) axes by ``pad`` on every side.

    ``mode`` is ``constant`` (zeros), ``edge`` (replicate) or ``reflect``.
    """
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, widths, mode=mode)
    h, w = a.shape[-2:]

    if mode == "constant":
        def backward(g):
            return (g[..., pad:pad + h, pad:pad + w],)
    elif mode == "edge":
        def backward(g):
            g = g.copy()
            g[..., pad, :] += g[..., :pad, :].sum(axis=-2)
            g[..., pad + h - 1, :] += g[..., pad + h:, :].sum(axis=-2)
            g[..., :, pad] += g[..., :, :pad].sum(axis=-1)
            g[..., :, pad + w - 1] += g[..., :, pad + w:].sum(axis=-1)
            return (g[..., pad:pad + h, pad:pad + w],)
    elif mode == "reflect":
        def backward(g):
            g = g.copy()
            for k in range(1, pad + 1):
                g[..., pad + k, :] += g[..., pad - k, :]
                g[..., pad + h - 1 - k, :] += g[..., pad + h - 1 + k, :]
            for k in range(1, pad + 1):
                g[..., :, pad + k] += g[..., :, pad - k]
                g[..., :, pad + w - 1 - k] += g[..., :, pad + w - 1 + k]
            return (g[..., pad:pad + h, pad:pad + w],)
    else:
        raise ValueError(f"unknown pad mode {mode!r}")

    return Tensor._result(out, (a,), backward, f"pad_{mode}")
