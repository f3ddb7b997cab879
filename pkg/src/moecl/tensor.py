"""Dense 64-bit tensors with reverse-mode automatic differentiation.

The primitive set is exactly what the rest of the package needs: batched
matmul, masked softmax, layer norm, GELU/ReLU, row extraction and the two
losses. Gradients accumulate across backward calls until zeroed.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import EmptySupportError, GraphError, NonFiniteError, ShapeError


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("primitive produced non-finite values")
    return arr


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = _check_finite(np.asarray(data, dtype=np.float64))
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data.reshape(()))

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- primitives ----------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bw(out):
        g = out.grad
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bw(out):
        g = out.grad
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def bw(out):
        g = out.grad
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bw)


def transpose(a):
    a = _as_tensor(a)
    data = np.swapaxes(a.data, -1, -2)

    def bw(out):
        a._accumulate(np.swapaxes(out.grad, -1, -2))

    return _make(data, (a,), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def bw(out):
        a._accumulate(out.grad.reshape(a.data.shape))

    return _make(data, (a,), bw)


def take_row(a, idx):
    """Select row `idx` along the second-to-last axis ([..., n, d] -> [..., d])."""
    a = _as_tensor(a)
    data = a.data[..., idx, :]

    def bw(out):
        g = np.zeros_like(a.data)
        g[..., idx, :] = out.grad
        a._accumulate(g)

    return _make(data, (a,), bw)


def broadcast_to(a, shape):
    a = _as_tensor(a)
    data = np.broadcast_to(a.data, shape).copy()

    def bw(out):
        a._accumulate(_unbroadcast(out.grad, a.data.shape))

    return _make(data, (a,), bw)


def concat_rows(a, b):
    """Concatenate along the second-to-last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-1]:
        raise ShapeError(f"concat shapes disagree: {a.data.shape} vs {b.data.shape}")
    data = np.concatenate([a.data, b.data], axis=-2)
    na = a.data.shape[-2]

    def bw(out):
        a._accumulate(out.grad[..., :na, :])
        b._accumulate(out.grad[..., na:, :])

    return _make(data, (a, b), bw)


def slice_col(a, idx):
    """Select index `idx` along the last axis ([..., n] -> [...])."""
    a = _as_tensor(a)
    data = a.data[..., idx]

    def bw(out):
        g = np.zeros_like(a.data)
        g[..., idx] = out.grad
        a._accumulate(g)

    return _make(data, (a,), bw)


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bw(out):
        a._accumulate(out.grad * (a.data > 0.0))

    return _make(data, (a,), bw)


def gelu(a):
    a = _as_tensor(a)
    data = kernels.gelu_forward(a.data)

    def bw(out):
        a._accumulate(kernels.gelu_backward(a.data, out.grad))

    return _make(_check_finite(data), (a,), bw)


def _normalize_mask(logits, mask):
    """Accept a set/sequence of excluded indices (1-D) or a boolean array."""
    if mask is None:
        return None
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        if mask.shape != logits.shape:
            raise ShapeError("boolean mask shape must match logits")
        return mask
    if logits.ndim != 1:
        raise ShapeError("index-set masks only apply to 1-D logits")
    out = np.zeros(logits.shape, dtype=bool)
    for i in mask:
        out[i] = True
    return out


def softmax(a, mask=None):
    """Softmax along the last axis; masked entries are exactly zero.

    `mask` marks *excluded* positions, either as a set of indices (1-D
    logits) or a boolean array of the same shape.
    """
    a = _as_tensor(a)
    if a.data.size == 0:
        raise EmptySupportError("softmax over empty logits")
    excl = _normalize_mask(a.data, mask)
    if excl is None:
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
    else:
        if np.any(excl.all(axis=-1)):
            raise EmptySupportError("softmax with all indices masked")
        neg = np.where(excl, -np.inf, a.data)
        shifted = neg - neg.max(axis=-1, keepdims=True)
        e = np.where(excl, 0.0, np.exp(shifted))
        p = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        g = out.grad
        inner = (g * p).sum(axis=-1, keepdims=True)
        a._accumulate(p * (g - inner))

    return _make(_check_finite(p), (a,), bw)


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize along the last axis, then apply elementwise gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gain.data * xhat + bias.data

    def bw(out):
        g = out.grad
        gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        bias._accumulate(_unbroadcast(g, bias.data.shape))
        dxhat = g * gain.data
        n = x.data.shape[-1]
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        # var above uses 1/n, so the mean-based formula is exact
        assert n == dxhat.shape[-1]
        x._accumulate(dx)

    return _make(_check_finite(data), (x, gain, bias), bw)


def normalize_rows(x, eps=1e-12):
    """L2-normalize along the last axis."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def bw(out):
        g = out.grad
        inner = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate((g - y * inner) / norm)

    return _make(y, (x,), bw)


def tsum(a):
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())

    def bw(out):
        a._accumulate(np.full_like(a.data, out.grad.reshape(())))

    return _make(data, (a,), bw)


def tmean(a):
    a = _as_tensor(a)
    data = np.asarray(a.data.mean())

    def bw(out):
        a._accumulate(np.full_like(a.data, out.grad.reshape(()) / a.data.size))

    return _make(data, (a,), bw)


def mse(a, b, reduction="sum"):
    """Squared-difference distance; `reduction` is "sum" or "mean".

    The mean form is dimension-invariant and is what the autoencoder
    scoring uses; the sum form is the raw squared Euclidean distance.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shapes disagree: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    scale = 1.0 if reduction == "sum" else 1.0 / a.data.size
    data = np.asarray((diff**2).sum() * scale)

    def bw(out):
        g = out.grad.reshape(()) * 2.0 * scale * diff
        a._accumulate(g)
        b._accumulate(-g)

    return _make(data, (a, b), bw)


def cross_entropy_smoothed(logits, target, eps=0.0):
    """Label-smoothed cross entropy.

    1-D logits with an int target give the per-sample loss; 2-D logits
    with a target index per row give the batch mean. The smoothed target
    distribution puts 1-eps on the true class and eps/(n-1) elsewhere.
    """
    logits = _as_tensor(logits)
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing strength out of range: {eps}")
    squeeze = logits.data.ndim == 1
    z = logits.data[None, :] if squeeze else logits.data
    if z.ndim != 2:
        raise ShapeError("logits must be 1-D or 2-D")
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if targets.shape[0] != z.shape[0]:
        raise ShapeError("one target per logits row required")
    n = z.shape[1]
    if np.any(targets < 0) or np.any(targets >= n):
        raise IndexError(f"target out of range for {n} classes")

    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    q = np.full_like(z, eps / (n - 1) if n > 1 else 0.0)
    q[np.arange(len(targets)), targets] = 1.0 - eps if n > 1 else 1.0
    losses = -(q * logp).sum(axis=1)
    data = np.asarray(losses.mean())

    def bw(out):
        p = np.exp(logp)
        g = (p - q) * (out.grad.reshape(()) / z.shape[0])
        logits._accumulate(g[0] if squeeze else g)

    return _make(data, (logits,), bw)


# -- backward pass ---------------------------------------------------------


def backward(root):
    """Populate grads of everything reachable from a scalar root."""
    if root.data.size != 1:
        raise GraphError("backward root must be scalar")
    topo, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root._accumulate(np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def grad_check(f, point, h=1e-5):
    """Max relative error between analytic and central-difference grads.

    `f` must be a scalar-valued closure of a single Tensor argument.
    """
    p = Tensor(point.data.copy(), requires_grad=True)
    out = f(p)
    if out.data.size != 1:
        raise GraphError("grad_check target must be scalar-valued")
    backward(out)
    analytic = (
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    )
    flat = p.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(p.data.copy())).item()
        flat[i] = orig - h
        lo = f(Tensor(p.data.copy())).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NonFiniteError("non-finite values during grad check")
    denom = np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(np.max(np.abs(analytic.reshape(-1) - numeric) / denom))
