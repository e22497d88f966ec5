"""Dense float32 tensors with tape-ordered reverse-mode differentiation.

Every tensor produced by a differentiable op records its parents and a
backward rule. Nodes carry a creation counter, so :meth:`Tensor.backward`
can walk the reachable subgraph in exact reverse construction order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
BN_MOMENTUM = 0.1

_counter = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-d float32 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._id = next(_counter)

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators -------------------------------------------------------
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
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation -------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        The graph is retained, so a second call adds the same contribution
        again unless the leaves were reset with :func:`zero_grad` first.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")

        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=DTYPE)}
        for node in nodes:  # already sorted newest first
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg


def _not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _reachable(root: Tensor) -> list:
    seen = {root._id: root}
    stack = [root]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if p.requires_grad and p._id not in seen:
                seen[p._id] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log; with ``eps`` > 0 the input is clamped below at ``eps``.

    Clamped entries receive zero gradient.
    """
    if eps > 0:
        keep = x.data >= eps
        safe = np.where(keep, x.data, DTYPE(eps))
        return _make(np.log(safe), (x,), lambda g: (np.where(keep, g / safe, 0).astype(DTYPE),))
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(DTYPE)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return _make(out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# convolution, pooling, upsampling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,Cin,H,W) with ``w`` (Cout,Cin,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, kcin, kh, kw = w.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid conv2d geometry: stride={stride}, padding={padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (Cin, kh, kw, N, Ho, Wo): keeps the innermost copy axis contiguous
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * kh * kw, n * ho * wo)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.data.reshape(-1, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3), dtype=DTYPE)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _conv_input_grad(g, w.data, (n, cin, h, wd), stride, padding)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, xshape: tuple, stride: int, padding: int) -> np.ndarray:
    n, cin, h, wd = xshape
    cout, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    ph, pw = kh - 1 - padding, kw - 1 - padding
    if stride == 1 and ph >= 0 and pw >= 0:
        # full correlation with the flipped, channel-swapped kernel
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(gp, (kh, kw), axis=(2, 3))[:, :, :h, :wd]
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cout * kh * kw, n * h * wd)
        wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
        return np.ascontiguousarray((wf @ cols).reshape(cin, n, h, wd).transpose(1, 0, 2, 3))
    hp, wp = h + 2 * padding, wd + 2 * padding
    gcols = (w.reshape(cout, -1).T @ g.transpose(1, 0, 2, 3).reshape(cout, -1)).reshape(cin, kh, kw, n, ho, wo)
    gxp = np.zeros((cin, n, hp, wp), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
    gx = gxp.transpose(1, 0, 2, 3)
    if padding:
        gx = gx[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gx)


def maxpool2d(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"maxpool2d: spatial size {h}x{w} not divisible by {factor}")
    blocks = x.data.reshape(n, c, h // factor, factor, w // factor, factor)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // factor, w // factor, factor * factor)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // factor, w // factor, factor, factor).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _make(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# regularisation and normalisation
# ---------------------------------------------------------------------------

def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= rate).astype(DTYPE) / DTYPE(1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the running buffers are updated in place by an
    exponential moving average; evaluation mode leaves them untouched.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        m = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(DTYPE)
        running_var *= 1 - momentum
        running_var += momentum * (var * m / max(m - 1, 1)).astype(DTYPE)
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = (x.data - mean.astype(DTYPE).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                gx = (gxhat - gxhat.mean(axis=axes, keepdims=True)
                      - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
                gx = gx * inv.reshape(1, c, 1, 1)
            else:
                gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx, gg, gbeta

    return _make(out.astype(DTYPE, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(logits: Tensor, axis: int = 1) -> Tensor:
    """Numerically stable softmax along ``axis`` (channels by default)."""
    if logits.shape[axis] < 2:
        raise ShapeError(f"softmax needs at least 2 classes along axis {axis}, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("softmax input contains non-finite values")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pixel-averaged cross-entropy of channel softmax against integer labels.

    ``logits`` is (N,C,H,W); ``labels`` is an integer array (N,H,W).
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, labels[:, None].astype(np.intp), axis=1)
    count = n * h * w
    loss = -picked.sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[:, None].astype(np.intp), np.take_along_axis(grad, labels[:, None].astype(np.intp), axis=1) - 1.0, axis=1)
        return ((grad * (float(g) / count)).astype(DTYPE),)

    return _make(np.array(loss, dtype=DTYPE), (logits,), backward)
