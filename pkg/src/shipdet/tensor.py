"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op returns a new :class:`Tensor`. When grad mode is on and any input
requires a gradient, the result keeps references to its inputs plus a
closure mapping the output gradient to input gradients. ``backward`` walks
that graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

_grad_enabled = True


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


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic protocol -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------
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
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _raise_non_scalar():
    raise ValueError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        )

    return _result(ad / bd, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    return expit(z)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_np(xd)
    return _result(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _result(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _result(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy in the overflow-free logit form."""
    z = logits.data
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return _result(loss, (logits,), lambda g: (g * (_sigmoid_np(z) - t),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(out)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing (basic or advanced) with scatter-add backward."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.asarray(x.data[index]), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ValueError("concat needs at least one tensor")
    ndim = xs[0].ndim
    (axis,) = _norm_axis(axis, ndim)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise ValueError(f"concat shape mismatch: {ref} vs {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _result(
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (axis,) = _norm_axis(axis, x.ndim)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(y, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def rot90(x: Tensor, k: int) -> Tensor:
    """Rotate every trailing H x W plane counterclockwise by ``k`` quarter turns."""
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"rot90 needs square planes, got {x.shape[-2:]}")
    k %= 4
    y = np.ascontiguousarray(np.rot90(x.data, k, axes=(-2, -1)))
    return _result(y, (x,), lambda g: (np.ascontiguousarray(np.rot90(g, -k, axes=(-2, -1))),))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
def _conv_out(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dil: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=DTYPE)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * dil:i * dil + hspan:stride, j * dil:j * dil + wspan:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, dil: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=DTYPE)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i * dil:i * dil + hspan:stride, j * dil:j * dil + wspan:stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           dilation: int = 1) -> Tensor:
    """Cross-correlation of NCHW ``x`` with OIkk ``w``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if ic != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ic}")
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1, dilation >= 1, pad >= 0")
    if b is not None and b.shape != (oc,):
        raise ValueError(f"conv2d bias shape {b.shape} != ({oc},)")
    ho = _conv_out(h, kh, stride, pad, dilation)
    wo = _conv_out(wd, kw, stride, pad, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty ({ho}x{wo}) for input {h}x{wd}")

    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
    if pointwise:
        cols = x.data.reshape(n, c, h * wd)
    else:
        cols = _im2col(_pad(x.data, pad), kh, kw, stride, dilation, ho, wo)
    w2 = w.data.reshape(oc, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, oc, ho, wo)
    padded_shape = (n, c, h + 2 * pad, wd + 2 * pad)

    def bw(g):
        g = g.reshape(n, oc, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gx = _col2im(gcols, padded_shape, kh, kw, stride, dilation, ho, wo)
                if pad:
                    gx = gx[:, :, pad:pad + h, pad:pad + wd]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, bw)


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
             output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``w`` is laid out (in, out, kH, kW).

    This is the exact adjoint of :func:`conv2d` with the same weight array.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"deconv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    ic, oc, kh, kw = w.shape
    if ic != c:
        raise ValueError(f"deconv2d channel mismatch: input has {c}, weight expects {ic}")
    if stride < 1 or pad < 0 or output_padding < 0:
        raise ValueError("deconv2d needs stride >= 1, pad >= 0, output_padding >= 0")
    ho = (h - 1) * stride - 2 * pad + kh + output_padding
    wo = (wd - 1) * stride - 2 * pad + kw + output_padding
    if ho <= 0 or wo <= 0:
        raise ValueError(f"deconv2d output size would be {ho}x{wo}")

    xf = x.data.reshape(n, c, h * wd)
    w2 = w.data.reshape(ic, -1)
    full_shape = (n, oc, ho + 2 * pad, wo + 2 * pad)
    # the scatter reaches (h-1)*stride + kh rows; output_padding rows stay zero
    scat_h, scat_w = (h - 1) * stride + kh, (wd - 1) * stride + kw
    full = np.zeros(full_shape, dtype=DTYPE)
    full[:, :, :scat_h, :scat_w] = _col2im(np.matmul(w2.T, xf), (n, oc, scat_h, scat_w), kh, kw, stride, 1, h, wd)
    out = np.ascontiguousarray(full[:, :, pad:pad + ho, pad:pad + wo])
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        gp = np.zeros(full_shape, dtype=DTYPE)
        gp[:, :, pad:pad + ho, pad:pad + wo] = g
        cols = _im2col(gp[:, :, :scat_h, :scat_w], kh, kw, stride, 1, h, wd)
        if x.requires_grad:
            gx = np.matmul(w2, cols).reshape(x.shape)
        if w.requires_grad:
            gw = np.matmul(xf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, bw)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batchnorm parameters must have length {c}")
    bshape = (1, c, 1, 1)
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu.reshape(bshape)
        var = np.mean(xc * xc, axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        xc = x.data - running_mean.reshape(bshape)
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        ggamma = np.sum(g * xhat, axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                gx = (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                      - xhat * np.mean(gxhat * xhat, axis=(0, 2, 3), keepdims=True)) * inv.reshape(bshape)
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------
def _pair_scores(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, H, W, W + H): sum_c a[:, c, h, w] * b at every row then column partner."""
    row = np.matmul(a.transpose(0, 2, 3, 1), b.transpose(0, 2, 1, 3))
    col = np.matmul(a.transpose(0, 3, 2, 1), b.transpose(0, 3, 1, 2)).transpose(0, 2, 1, 3)
    return np.concatenate([row, col], axis=-1)


def _aggregate(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """out[:, c, h, w] = sum over the criss-cross partners of a-weighted v."""
    w = v.shape[3]
    row = np.matmul(a[..., :w], v.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
    col = np.matmul(a[..., w:].transpose(0, 2, 1, 3), v.transpose(0, 3, 2, 1)).transpose(0, 3, 2, 1)
    return row + col


def _scatter(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_aggregate` with respect to its value argument."""
    w = x.shape[3]
    row = np.matmul(a[..., :w].transpose(0, 1, 3, 2), x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
    col = np.matmul(a[..., w:].transpose(0, 2, 3, 1), x.transpose(0, 3, 2, 1)).transpose(0, 3, 2, 1)
    return row + col


def _criss_cross_affinity(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    h, w = q.shape[2:]
    e = _pair_scores(q, k)
    # the position itself already sits in the row part
    idx = np.arange(h)
    e[:, idx, :, w + idx] = -np.inf
    e -= e.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def criss_cross_affinity(q: Tensor, k: Tensor) -> np.ndarray:
    """Softmax weights, shape (N, H, W, W + H); the last H columns cover the column path.

    The diagonal column entry (the position itself) is exactly zero so the
    position is counted once, in the row part.
    """
    return _criss_cross_affinity(q.data, k.data)


def criss_cross_attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Aggregate ``v`` over each position's row and column with softmaxed q.k weights."""
    if q.shape != k.shape:
        raise ValueError(f"query/key shape mismatch: {q.shape} vs {k.shape}")
    if q.ndim != 4 or v.ndim != 4 or q.shape[0] != v.shape[0] or q.shape[2:] != v.shape[2:]:
        raise ValueError(f"criss-cross spatial mismatch: q {q.shape}, v {v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    a = _criss_cross_affinity(qd, kd)

    def bw(g):
        gv = _scatter(a, g) if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            ga = _pair_scores(g, vd)
            ge = a * (ga - np.sum(ga * a, axis=-1, keepdims=True))
            if q.requires_grad:
                gq = _aggregate(ge, kd)
            if k.requires_grad:
                gk = _scatter(ge, qd)
        return gq, gk, gv

    return _result(_aggregate(a, vd), (q, k, v), bw)


def full_attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Dense HW x HW attention; a reference mode for tiny maps."""
    if q.shape != k.shape or q.shape[2:] != v.shape[2:]:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    n, c, h, w = q.shape
    cv = v.shape[1]
    qf = transpose(reshape(q, (n, c, h * w)), (0, 2, 1))
    kf = reshape(k, (n, c, h * w))
    a = softmax(matmul(qf, kf), axis=-1)
    vf = transpose(reshape(v, (n, cv, h * w)), (0, 2, 1))
    return reshape(transpose(matmul(a, vf), (0, 2, 1)), (n, cv, h, w))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), bw)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------
def gradcheck(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over elements of |analytic - central difference| / max(1, |analytic|).

    ``f`` is called with the input tensors and must return a scalar tensor.
    Inputs are perturbed in place and restored afterwards.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    saved = [(x.requires_grad, x.grad) for x in xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    try:
        out = f(*xs)
        if out.data.size != 1:
            raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
        backward(out)
        worst = 0.0
        for x in xs:
            analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
            flat = x.data.reshape(-1)
            an = analytic.reshape(-1)
            with no_grad():
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = f(*xs).item()
                    flat[i] = orig - h
                    fm = f(*xs).item()
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * h)
                    worst = max(worst, abs(an[i] - num) / max(1.0, abs(an[i])))
        return worst
    finally:
        for x, (rg, g) in zip(xs, saved):
            x.requires_grad = rg
            x.grad = g


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------
MAGIC = b"CASTEN1"


def tensor_to_bytes(x: Tensor | np.ndarray) -> bytes:
    # asarray keeps 0-d arrays 0-d, unlike ascontiguousarray
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8", order="C")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one serialized tensor; returns the array and the offset just past it."""
    if buf[offset:offset + len(MAGIC)] != MAGIC:
        raise ValueError("bad tensor magic")
    offset += len(MAGIC)
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(dims).astype(DTYPE)
    return arr, offset + 8 * count
