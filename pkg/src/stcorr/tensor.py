"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every op that touches a tensor with
``requires_grad`` records its inputs and a backward rule on the output; calling
:func:`backpropagate` on a scalar root walks that record in reverse
topological order and accumulates ``grad`` on every leaf that asks for it.

Shape rules (NHWC for images throughout):

* ``add``/``sub``/``mul``/``div`` follow numpy broadcasting; gradients are
  summed back to the operand shape.
* ``matmul`` follows ``np.matmul`` (batched over leading axes, same leading
  shape on both sides).
* ``conv2d``: input ``(B, H, W, Cin)``, weight ``(kh, kw, Cin, Cout)``,
  optional bias ``(Cout,)``.
* ``softmax``/``logsumexp``/``l2_normalize`` act on the last axis.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "NumericFault", "ShapeError", "GraphError",
    "tensor", "as_tensor", "add", "sub", "mul", "div", "neg", "matmul",
    "conv2d", "relu", "exp", "log", "sqrt", "abs_", "square", "softmax",
    "masked_softmax", "logsumexp", "l2_normalize", "sum_", "mean", "l1_diff",
    "sq_diff", "concat", "reshape", "transpose", "backpropagate",
    "computation_record", "finite_difference_check", "no_grad_enabled",
]

DEFAULT_DTYPE = np.float64


class NumericFault(ArithmeticError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # ------------------------------------------------------------------ basics
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ------------------------------------------------------------- operators
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


# ------------------------------------------------------------------ recording
_GRAD_ENABLED = [True]


class no_grad_enabled:
    """Context manager that disables recording (used for teacher passes)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericFault(f"{op}: non-finite values in output of shape {out.shape}")


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result and record it if any parent requires a gradient.

    ``backward`` maps the output gradient to one gradient (or None) per parent.
    """
    _check_finite(op, out)
    t = Tensor(out)
    t.op = op
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def custom_op(op: str, out: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Public hook for fused ops defined outside this module."""
    return _make(op, np.asarray(out), [as_tensor(p) for p in parents], backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ------------------------------------------------------------------ reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if count else np.zeros(())

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make("mean", np.asarray(out), (a,), backward)


def l1_diff(a, b) -> Tensor:
    """Elementwise ``|a - b|`` (reduce with ``sum_``/``mean``)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_diff: shapes differ {a.shape} vs {b.shape}")
    d = a.data - b.data
    s = np.sign(d)
    return _make("l1_diff", np.abs(d), (a, b), lambda g: (g * s, -g * s))


def sq_diff(a, b) -> Tensor:
    """Elementwise ``(a - b)**2``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sq_diff: shapes differ {a.shape} vs {b.shape}")
    d = a.data - b.data
    return _make("sq_diff", d * d, (a, b), lambda g: (2.0 * g * d, -2.0 * g * d))


# ----------------------------------------------------------------- last axis
def softmax(a) -> Tensor:
    """Max-subtracted softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), backward)


def masked_softmax(a, valid) -> Tensor:
    """Softmax over the last axis restricted to ``valid`` cells.

    Invalid cells come out as exact zeros and receive no gradient. ``valid``
    broadcasts against ``a``; every row needs at least one valid cell.
    """
    a = as_tensor(a)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), a.shape)
    if not valid.any(axis=-1).all():
        raise ShapeError("masked_softmax: a row has no valid cells")
    masked = np.where(valid, a.data, -np.inf)
    z = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("masked_softmax", out, (a,), backward)


def logsumexp(a) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    p = e / s
    return _make("logsumexp", out, (a,), lambda g: (g[..., None] * p,))


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit length; all-zero vectors stay zero."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * proj) / denom,)

    return _make("l2_normalize", out, (a,), backward)


# ------------------------------------------------------------------ linear alg
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _make("matmul", a.data @ b.data, (a, b), backward)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NHWC layout."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    B, H, W, C = x.shape
    kh, kw, _, cout = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    cols = _im2col(x.data, kh, kw, stride, pad)  # (B, Ho, Wo, kh, kw, C)
    flat = cols.reshape(B * Ho * Wo, kh * kw * C)
    wmat = w.data.reshape(kh * kw * C, cout)
    out = (flat @ wmat).reshape(B, Ho, Wo, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} output channels")
        out = out + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gw = (flat.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, i, j]
            gx = gxp[:, pad:pad + H, pad:pad + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make("conv2d", out, parents, backward)


# ------------------------------------------------------------------- structure
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return np.split(g, sizes, axis=axis)

    return _make("concat", out, ts, backward)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("slice", np.array(out), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


# ------------------------------------------------------------------- backward
def computation_record(root: Tensor) -> list[Tensor]:
    """Recorded ops reaching ``root`` in topological order (inputs first)."""
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backpropagate(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every requires-grad leaf."""
    if root.size != 1:
        raise ShapeError(f"backpropagate: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backpropagate: root is detached from any requires-grad input")
    order = computation_record(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
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
                grads[key] = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
                            coords: Iterable[int] | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps ``x`` to a scalar tensor. ``coords`` restricts the check to a
    subset of flat indices (all by default).
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    x = as_tensor(x)
    probe = Tensor(x.data.astype(np.float64).copy(), requires_grad=True)
    out = f(probe)
    backpropagate(out)
    analytic = probe.grad.reshape(-1) if probe.grad is not None else np.zeros(probe.size)
    flat = probe.data.reshape(-1)
    worst = 0.0
    for k in (range(flat.size) if coords is None else coords):
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(f(Tensor(probe.data)).data)
        flat[k] = orig - eps
        fm = float(f(Tensor(probe.data)).data)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericFault(f"finite_difference_check: f non-finite at coordinate {k}")
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic[k] - numeric) / max(1.0, abs(analytic[k]))
        worst = max(worst, err)
    return worst
