"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its operands and a vector-Jacobian
product (VJP) rule.  VJP rules are themselves written with ``Tensor``
operations, so running :func:`grad` with ``create_graph=True`` yields
gradients that can be differentiated again.  This is what lets a loss defined
on an input-gradient or LRP heatmap be trained by gradient descent.

Broadcasting follows numpy's rules restricted to size-1 dimensions; gradients
are summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DimensionError, NumericFaultError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericFaultError(f"non-finite value produced by {op}")


class Tensor:
    """A node of the computation graph holding an immutable numpy array.

    ``requires_grad`` marks leaves whose gradient is wanted (parameters,
    inputs).  Results of operations require grad when any operand does and
    recording is enabled.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out.op = "detach"
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method forms --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def abs(self):
        return tabs(self)

    def sqrt(self):
        return sqrt(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap constants; floats adopt ``like``'s dtype so float32 graphs stay float32."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype)
    out = Tensor.__new__(Tensor)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64 if dtype is None else dtype)
    _check_finite(arr, "constant")
    out.data = arr
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    out.op = "const"
    return out


def _result(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    data = np.asarray(data)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"shapes {a} and {b} do not broadcast") from exc


def sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and g.shape[lead + i] != 1
    )
    out = tsum(g, axis=axes, keepdims=True) if axes else g
    if lead:
        out = reshape(out, shape)
    return out


def _binary(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _broadcast_shape(a.shape, b.shape)
    return a, b


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary(a, b)

    def vjp(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)

    def vjp(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)

    def vjp(g, needs):
        return (sum_to(g * b, a.shape) if needs[0] else None,
                sum_to(g * a, b.shape) if needs[1] else None)

    return _result(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    if np.any(b.data == 0):
        raise NumericFaultError("division by a denominator containing exact zero")

    def vjp(g, needs):
        ga = sum_to(g / b, a.shape) if needs[0] else None
        gb = sum_to(neg(g * a) / (b * b), b.shape) if needs[1] else None
        return ga, gb

    return _result(a.data / b.data, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise ContractError("power() supports constant exponents only")
    p = float(p)
    if p == 0:
        return as_tensor(np.ones_like(a.data))

    def vjp(g, needs):
        return (g * (p * power(a, p - 1)) if p != 1 else g,)

    return _result(a.data ** p, (a,), vjp, "pow")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _result(data, (a,), lambda g, needs: (g * exp(a),), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericFaultError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g, needs: (g / a,), "log")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericFaultError("sqrt of a negative value")

    def vjp(g, needs):
        return (g / (2.0 * sqrt(a)),)

    return _result(np.sqrt(a.data), (a,), vjp, "sqrt")


def sign(a) -> Tensor:
    """Elementwise sign as a constant (zero derivative almost everywhere)."""
    a = as_tensor(a)
    return as_tensor(np.sign(a.data))


def tabs(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)

    def vjp(g, needs):
        return (g * as_tensor(s, like=g),)

    return _result(np.abs(a.data), (a,), vjp, "abs")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(a.dtype)

    def vjp(g, needs):
        return (g * as_tensor(mask, like=g),)

    return _result(a.data * mask, (a,), vjp, "relu")


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = _binary(a, b)
    shape = _broadcast_shape(_broadcast_shape(a.shape, b.shape), cond.shape)
    fa = cond.astype(a.dtype)

    def vjp(g, needs):
        m = as_tensor(np.broadcast_to(fa, shape), like=g)
        ga = sum_to(g * m, a.shape) if needs[0] else None
        gb = sum_to(g * (1.0 - m), b.shape) if needs[1] else None
        return ga, gb

    return _result(np.where(cond, a.data, b.data), (a, b), vjp, "where")


# -- shape ops -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _result(out, (a,), lambda g, needs: (reshape(g, a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g, needs: (transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _result(out, (a,), lambda g, needs: (sum_to(g, a.shape),), "broadcast_to")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum over one axis (or all); gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if axis is None:
        flat = reshape(a, (-1,))
        out = tmax(flat, axis=0)
        return reshape(out, (1,) * a.ndim) if keepdims else out
    if not isinstance(axis, int):
        raise ContractError("max supports a single axis")
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    mask = np.zeros_like(a.data)
    np.put_along_axis(mask, np.expand_dims(idx, ax), 1.0, axis=ax)
    kept = tuple(1 if i == ax else n for i, n in enumerate(a.shape))

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept), a.shape) * as_tensor(mask, like=g),)

    return _result(np.max(a.data, axis=ax, keepdims=keepdims), (a,), vjp, "max")


def getitem(a: Tensor, key) -> Tensor:
    a = as_tensor(a)
    return _result(np.array(a.data[key]), (a,),
                   lambda g, needs: (scatter(g, key, a.shape),), "getitem")


def scatter(g: Tensor, key, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``key``; adjoint of getitem."""
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, key, g.data)
    return _result(out, (g,), lambda gg, needs: (getitem(gg, key),), "scatter")


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n, k) and a 2-D ``b`` of shape (k, m)."""
    a, b = (as_tensor(a), as_tensor(b))
    if b.ndim != 2 or a.ndim < 1:
        raise DimensionError("matmul expects a (..., k) @ (k, m)")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    k, m = b.shape
    lead = a.shape[:-1]
    out = (a.data.reshape(-1, k) @ b.data).reshape(lead + (m,))

    def vjp(g, needs):
        ga = matmul(g, transpose(b)) if needs[0] else None
        gb = None
        if needs[1]:
            gb = matmul(transpose(reshape(a, (-1, k))), reshape(g, (-1, m)))
        return ga, gb

    return _result(out, (a, b), vjp, "matmul")


# -- convolution support -------------------------------------------------

def _conv_out(n, k, stride, pad):
    out = (n + 2 * pad - k) // stride + 1
    if out <= 0:
        raise DimensionError(f"kernel {k} larger than padded extent {n + 2 * pad}")
    return out


def unfold(x: Tensor, kernel: tuple[int, int], stride: int = 1, padding: int = 0) -> Tensor:
    """im2col: (B, C, H, W) -> (B, Ho, Wo, C*kh*kw) patches."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"unfold expects a 4-D input, got shape {x.shape}")
    kh, kw = kernel
    B, C, H, W = x.shape
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho, Wo, C * kh * kw)
    shape = x.shape

    def vjp(g, needs):
        return (fold(g, shape, kernel, stride, padding),)

    return _result(cols, (x,), vjp, "unfold")


def fold(cols: Tensor, x_shape, kernel: tuple[int, int], stride: int = 1, padding: int = 0) -> Tensor:
    """col2im: sums overlapping patches back into a (B, C, H, W) array."""
    cols = as_tensor(cols)
    kh, kw = kernel
    B, C, H, W = x_shape
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if cols.shape != (B, Ho, Wo, C * kh * kw):
        raise DimensionError(f"fold got {cols.shape}, expected {(B, Ho, Wo, C * kh * kw)}")
    p6 = cols.data.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += p6[..., i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]

    def vjp(g, needs):
        return (unfold(g, kernel, stride, padding),)

    return _result(np.ascontiguousarray(out), (cols,), vjp, "fold")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B, C, H, W) input with (O, C, kh, kw) weights."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 4 or x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d input {x.shape} incompatible with weights {w.shape}")
    O = w.shape[0]
    cols = unfold(x, w.shape[2:], stride, padding)
    out = matmul(cols, transpose(reshape(w, (O, -1))))
    if b is not None:
        out = out + b
    return transpose(out, (0, 3, 1, 2))


def conv2d_transpose(s, w, x_shape, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` in its input: maps (B, O, Ho, Wo) to ``x_shape``."""
    s, w = as_tensor(s), as_tensor(w)
    O = w.shape[0]
    cols = matmul(transpose(s, (0, 2, 3, 1)), reshape(w, (O, -1)))
    return fold(cols, x_shape, w.shape[2:], stride, padding)


def avg_pool2d(t, kernel: int, truncate: bool = False) -> Tensor:
    """Non-overlapping mean pooling over the last two axes (stride = kernel)."""
    t = as_tensor(t)
    if kernel < 1:
        raise ContractError("pooling kernel must be positive")
    if t.ndim < 2:
        raise DimensionError("avg_pool2d needs at least two axes")
    H, W = t.shape[-2:]
    if H % kernel or W % kernel:
        if not truncate:
            raise DimensionError(f"kernel {kernel} does not divide extents {(H, W)}")
        t = getitem(t, (Ellipsis, slice(0, H // kernel * kernel), slice(0, W // kernel * kernel)))
        H, W = t.shape[-2:]
    if kernel == 1:
        return t
    lead = t.shape[:-2]
    r = reshape(t, lead + (H // kernel, kernel, W // kernel, kernel))
    n = len(lead)
    return mean(r, axis=(n + 1, n + 3))


def upsample_nearest(t, factor: int) -> Tensor:
    t = as_tensor(t)
    h, w = t.shape[-2:]
    lead = t.shape[:-2]
    r = reshape(t, lead + (h, 1, w, 1))
    r = broadcast_to(r, lead + (h, factor, w, factor))
    return reshape(r, lead + (h * factor, w * factor))


def log_softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    shift = as_tensor(np.max(t.data, axis=axis, keepdims=True))
    z = t - shift
    return z - log(tsum(exp(z), axis=axis, keepdims=True))


def softmax(t, axis: int = -1) -> Tensor:
    return exp(log_softmax(t, axis=axis))


def one_hot(k, n_classes: int, dtype=np.float64) -> np.ndarray:
    k = np.atleast_1d(np.asarray(k))
    out = np.zeros((k.shape[0], n_classes), dtype=dtype)
    out[np.arange(k.shape[0]), k] = 1
    return out


# -- backward pass -------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    """Post-order of the requires-grad subgraph (operands before results)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _backprop(root: Tensor, targets: Iterable[Tensor] | None, create_graph: bool):
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return [], {}
    order = _topo(root)
    keep = None
    needed = None
    if targets is not None:
        keep = {id(t) for t in targets}
        needed = set()
        for node in order:
            if id(node) in keep or any(id(p) in needed for p in node._parents):
                needed.add(id(node))
    ctx = enable_grad() if create_graph else no_grad()
    grads: dict[int, Tensor] = {}
    with ctx:
        grads[id(root)] = as_tensor(np.ones_like(root.data))
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            needs = tuple(
                p.requires_grad and (needed is None or id(p) in needed) for p in node._parents
            )
            if any(needs):
                for p, pg, need in zip(node._parents, node._vjp(g, needs), needs):
                    if not need or pg is None:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else prev + pg
            if keep is not None and id(node) not in keep:
                del grads[id(node)]
    return order, grads


def backward(root: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Gradients of scalar ``root`` with respect to every requires-grad node.

    Returns a mapping node -> gradient.  A root with no requires-grad
    ancestors yields an empty mapping.
    """
    order, grads = _backprop(root, None, create_graph)
    return {node: grads[id(node)] for node in order if id(node) in grads}


def grad(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``.

    Unreachable inputs get zero gradients.  With ``create_graph=True`` the
    returned tensors are differentiable graph nodes.
    """
    wrt = list(wrt)
    _, grads = _backprop(root, wrt, create_graph)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(g if g is not None else as_tensor(np.zeros_like(t.data)))
    return out
