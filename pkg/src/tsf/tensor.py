"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the calling thread's active :class:`GradTape`
whenever one of their inputs requires a gradient.  ``backward(loss)`` replays
that tape once, in reverse, and closes it; a second ``backward`` on the same
graph raises :class:`TapeError`.
"""
from __future__ import annotations

import logging
import os
import threading
import warnings
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEBUG = os.environ.get("TSF_LOG", "").lower() == "debug"


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class OracleInvalidError(RuntimeError):
    pass


_local = threading.local()


class GradTape:
    """Ordered record of differentiable operations for one graph."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self):
        return len(self.records)


def _active_tape() -> GradTape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = GradTape()
        _local.tape = tape
    return tape


def _grad_enabled() -> bool:
    return not getattr(_local, "no_grad", False)


class no_grad:
    def __enter__(self):
        self._prev = getattr(_local, "no_grad", False)
        _local.no_grad = True

    def __exit__(self, *exc):
        _local.no_grad = self._prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"extents must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: GradTape | None = None
        self._is_leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        t._is_leaf = True
        return t

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
        return self._is_leaf

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Wrap an op result and record it when any input needs a gradient."""
    t = Tensor._wrap(out)
    if DEBUG and not np.all(np.isfinite(out)):
        logger.error("non-finite values produced by %s", getattr(backward, "__qualname__", "op"))
        raise NonFiniteError("op produced NaN or Inf")
    if _grad_enabled() and any(i.requires_grad for i in inputs):
        tape = _active_tape()
        t.requires_grad = True
        t._is_leaf = False
        t._tape = tape
        tape.records.append((t, inputs, backward))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate into existing ``.grad`` buffers; callers zero
    them explicitly.  Returns a map from leaf tensor to the gradient produced
    by this call.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._tape is None:
        if loss.requires_grad and loss.is_leaf:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return {loss: g}
        warnings.warn("backward() on a tensor with no gradient history; nothing to do", stacklevel=2)
        return {}
    tape = loss._tape
    if tape.consumed:
        raise TapeError("backward() already ran on this graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, ig in zip(inputs, fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                prev = leaves.get(id(inp))
                leaves[id(inp)] = (inp, ig if prev is None else prev[1] + ig)
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
    tape.consumed = True
    tape.records.clear()
    if getattr(_local, "tape", None) is tape:
        _local.tape = None
    result = {}
    for leaf, g in leaves.values():
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(x.data * s, (x,), lambda g: (g * s,))


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _make(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- structural


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the first axis."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop], (x,), bw)


def gather_last(x: Tensor, idx) -> Tensor:
    """Select ``x[..., idx[...]]`` along the last axis; ``idx`` has x.shape[:-1]."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} does not match {x.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise ContractError(f"label out of range for {x.shape[-1]} classes")
    ix = idx[..., None]
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, ix, g[..., None], axis=-1)
        return (full,)

    return _make(np.take_along_axis(x.data, ix, axis=-1)[..., 0], (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
                _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _make(ad @ bd, (a, b), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax_rows needs a non-empty last axis")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, labels, reduction: str = "sum") -> Tensor:
    """Cross-entropy from logits over the last axis with integer labels."""
    nll = scale(gather_last(log_softmax(logits), labels), -1.0)
    if reduction == "none":
        return nll
    total = sum_(nll)
    return total if reduction == "sum" else scale(total, 1.0 / nll.size)


def l2_normalize(x: Tensor, axis: int = -1, floor: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    if DEBUG and np.any(norm < floor):
        logger.debug("l2_normalize: %d vectors below norm floor", int((norm < floor).sum()))
    clipped = norm < floor
    n = np.maximum(norm, floor)
    y = x.data / n

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g / n, (g - y * proj) / n),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-channel gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    c = x.shape[-1]

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red).reshape(gain.shape), g.sum(axis=red).reshape(bias.shape)

    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({c},)")
    return _make(xhat * gd + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------- vision ops


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.  x: (B,C,H,W), w: (O,C,3,3)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    B, C, H, W = x.shape
    O = w.shape[0]
    # channels-last internally so the im2col columns are (ki, kj, c) ordered
    xp = np.zeros((B, H + 2, W + 2, C))
    xp[:, 1:-1, 1:-1, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((B, H, W, 3, 3, C))
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + H, j:j + W, :]
    cols = cols.reshape(B * H * W, 9 * C)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(O, 9 * C)
    out = cols @ wmat.T
    if b is not None:
        out += b.data

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gw = (gm.T @ cols).reshape(O, 3, 3, C).transpose(0, 3, 1, 2)
        gcols = (gm @ wmat).reshape(B, H, W, 3, 3, C)
        gxp = np.zeros((B, H + 2, W + 2, C))
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + H, j:j + W, :] += gcols[:, :, :, i, j, :]
        grads = [gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2), gw]
        if b is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out.reshape(B, H, W, O).transpose(0, 3, 1, 2)), inputs, bw)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties route the gradient to the first maximum."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2d needs even spatial dims, got {H}x{W}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(B, C, H, W),)

    return _make(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the two trailing spatial axes: (..., C, H, W) -> (..., C)."""
    return mean(x, axis=(-2, -1))


# ---------------------------------------------------------------- checking


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      indices=None) -> float:
    """Max relative error between ``backward`` and central differences of ``fn``.

    ``indices`` optionally restricts the comparison to a subset of flat
    coordinates of ``x`` (useful for large parameter tensors).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x0 = np.array(x.data, dtype=np.float64)

    def value(arr):
        with no_grad():
            out = fn(Tensor._wrap(arr))
        if out.size != 1:
            raise ContractError("finite_diff_check needs a scalar-valued fn")
        return float(out.data.reshape(-1)[0])

    if value(x0.copy()) != value(x0.copy()):
        raise OracleInvalidError("fn is not deterministic; finite differences are meaningless")

    xt = Tensor._wrap(x0.copy())
    xt.requires_grad = True
    out = fn(xt)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        backward(out)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad

    flat = x0.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        numeric = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
