"""Array-valued reverse-mode differentiation.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients.  :func:`backward` walks the
recorded graph in reverse topological order.  Only the ops the networks and
losses in this package need are provided.
"""
from __future__ import annotations

from collections.abc import Mapping
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class UnrecordedParameterError(KeyError):
    """Gradient requested for a parameter that did not take part in the loss."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
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

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def param(data, name: str) -> Tensor:
    """Leaf tensor whose gradient is reported by :func:`backward`."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).data)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


_relu_watchers: list = []


class _ReluWatch:
    def __enter__(self) -> list:
        self.seen: list = []
        _relu_watchers.append(self)
        return self.seen

    def __exit__(self, *exc):
        _relu_watchers.remove(self)
        return False


class relu_margin(_ReluWatch):
    """Context manager collecting min |pre-activation| of every ReLU evaluated inside it."""

    def record(self, pre: np.ndarray, on: np.ndarray) -> None:
        self.seen.append(float(np.min(np.abs(pre))) if pre.size else np.inf)


class relu_pattern(_ReluWatch):
    """Context manager collecting the on/off mask of every ReLU evaluated inside it."""

    def record(self, pre: np.ndarray, on: np.ndarray) -> None:
        self.seen.append(on)


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    for watcher in _relu_watchers:
        watcher.record(a.data, on)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * on,))


def logaddexp(a, b) -> Tensor:
    """Stable ``log(exp(a) + exp(b))`` with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.logaddexp(a.data, b.data)

    def bw(g):
        return (_unbroadcast(g * np.exp(a.data - out), a.shape),
                _unbroadcast(g * np.exp(b.data - out), b.shape))

    return _make(out, (a, b), bw)


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a, axis: int = -1, keepdims: bool = False, where: np.ndarray | None = None) -> Tensor:
    """Stable log-sum-exp; entries with ``where == False`` are excluded.

    Rows whose mask is entirely False yield ``-inf``.
    """
    a = as_tensor(a)
    x = a.data if where is None else np.where(where, a.data, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(x - out_k)
        w = np.where(np.isfinite(out_k), w, 0.0)
        return (g * w,)

    return _make(out, (a,), bw)


def l2_normalize(a, axis: int = -1, eps: float | None = 1e-12) -> Tensor:
    """``a / max(||a||, eps)`` along ``axis``.

    With ``eps=None`` a zero-norm slice raises instead of being clamped.
    """
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    if eps is None:
        if np.any(norm == 0):
            raise ZeroDivisionError("zero-norm vector cannot be normalized")
        clamped = np.zeros_like(norm, dtype=bool)
        denom = norm
    else:
        clamped = norm < eps
        denom = np.where(clamped, eps, norm)
    out = a.data / denom

    def bw(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(clamped, g, g - out * proj) / denom,)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- linear algebra / shape

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if a.ndim > 1 else np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, idx) -> Tensor:
    """Indexing (basic or advanced); gradients scatter-add back."""
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------- image ops (NHWC)

def _colsum(m: np.ndarray) -> np.ndarray:
    # BLAS mat-vec is several times faster than ndarray.sum over tall arrays
    return np.ones(m.shape[0]) @ m


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, ho, wo, k*k*C) patches of an already padded NHWC array."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    n, c = xp.shape[0], xp.shape[3]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.shape[0]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    n, h, wd, _ = x.shape
    return (_im2col(xp, k, 1, h, wd) @ w.reshape(-1, w.shape[3])).reshape(n, h, wd, w.shape[3])


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Same-padded square convolution. ``w`` has shape ``(k, k, c_in, c_out)``."""
    x, w = as_tensor(x), as_tensor(w)
    n, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.data.reshape(k * k * cin, cout)
    out = (cols @ w2).reshape(n, ho, wo, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            if stride == 1:
                # transposed convolution: flip spatially, swap channel roles
                gx = _conv_same(g, w.data[::-1, ::-1].transpose(0, 1, 3, 2))
            else:
                gcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, cin)
                gxp = np.zeros(xp.shape)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * (ho - 1) + 1:stride,
                            j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
                gx = gxp[:, pad:pad + h, pad:pad + wd, :] if pad else gxp
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(_colsum(g2))
        return tuple(grads)

    return _make(out, parents, bw)


# _PHASE[a, r, i]: kernel row i of output phase a reads low-res row offset r - 1
_PHASE = np.array([
    [[1, 0, 0], [0, 1, 1], [0, 0, 0]],
    [[0, 0, 0], [1, 1, 0], [0, 0, 1]],
], dtype=np.float64)


def upsample_conv2d(x, w, b=None) -> Tensor:
    """``conv2d(upsample2x(x), w, b)`` for a 3x3 kernel, computed at low resolution.

    Each of the four output phases is a 3x3 convolution of ``x`` with
    folded weights, so patches are gathered once at the input size.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, h, wd, cin = x.shape
    if w.shape[:2] != (3, 3):
        raise ValueError(f"upsample_conv2d needs a 3x3 kernel, got {w.shape[:2]}")
    cout = w.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, 3, 1, h, wd)
    folded = np.einsum("ari,bcj,ijkd->rckabd", _PHASE, _PHASE, w.data).reshape(9 * cin, 4 * cout)
    low = (cols @ folded).reshape(n, h, wd, 2, 2, cout)
    out = low.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * wd, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def bw(g):
        g_ph = g.reshape(n, h, 2, wd, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
        gx = None
        if x.requires_grad:
            gcols = (g_ph @ folded.T).reshape(n, h, wd, 3, 3, cin)
            gxp = np.zeros(xp.shape)
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + h, j:j + wd, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, 1:1 + h, 1:1 + wd, :]
        gw = None
        if w.requires_grad:
            g_fold = (cols.T @ g_ph).reshape(3, 3, cin, 2, 2, cout)
            gw = np.einsum("ari,bcj,rckabd->ijkd", _PHASE, _PHASE, g_fold)
        grads = [gx, gw]
        if b is not None:
            grads.append(_colsum(g.reshape(-1, cout)))
        return tuple(grads)

    return _make(out, parents, bw)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NHWC tensor."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _make(out, (x,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


# ---------------------------------------------------------------- reverse pass

class Gradients(Mapping):
    """Read-only map from parameter name to gradient array."""

    def __init__(self, grads: dict[str, np.ndarray]):
        self._grads = grads

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._grads[name]
        except KeyError:
            raise UnrecordedParameterError(
                f"parameter {name!r} was not recorded in the forward pass of this loss"
            ) from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> Gradients:
    """Gradients of a scalar ``loss`` for every named leaf it depends on."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    named: dict[str, np.ndarray] = {}
    if not loss.requires_grad:
        return Gradients(named)
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.name is not None:
                named[node.name] = named[node.name] + g if node.name in named else g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return Gradients(named)
