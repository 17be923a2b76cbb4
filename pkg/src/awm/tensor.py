"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operator below takes and returns :class:`Tensor`. A graph is only
recorded when at least one input requires a gradient, so inference and
frozen sub-networks cost no bookkeeping.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Propagate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran on this graph; run a new forward pass")
        if not self.requires_grad:
            raise RuntimeError("root does not depend on any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # intermediate buffers are no longer needed
                node._backward = None
                node._parents = ()
                if node is not self:
                    node.grad = None
        self._consumed = True

    # convenience arithmetic
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _wrap(-1.0)))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def sum(self):
        return total(self)

    def mean(self):
        return mul(total(self), _wrap(1.0 / self.data.size))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward)


def total(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(out, (a,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward(g):
        x._accumulate(g * mask)

    return _result(out, (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only: no overflow, strictly inside (0, 1)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return _result(s, (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- structural

def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = list(parts)
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise ShapeError(f"cannot concatenate {ref} with {p.shape} along axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _result(out, parts, backward)


def column(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of a 2-D tensor, as a 1-D tensor."""
    out = x.data[:, j].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, j] = g
        x._accumulate(full)

    return _result(out, (x,), backward)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """``out[b] = s[b] * x[b]`` for a length-B scale vector."""
    if s.shape != (x.shape[0],):
        raise ShapeError(f"row scale of shape {s.shape} does not fit {x.shape}")
    bshape = (-1,) + (1,) * (x.data.ndim - 1)
    sv = s.data.reshape(bshape)
    out = x.data * sv

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * sv)
        if s.requires_grad:
            s._accumulate((g * x.data).reshape(x.shape[0], -1).sum(axis=1))

    return _result(out, (x, s), backward)


def normalize_rows(s: Tensor) -> Tensor:
    """Divide each row of a positive 2-D tensor by its sum."""
    tot = s.data.sum(axis=1, keepdims=True)
    out = s.data / tot

    def backward(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        s._accumulate((g - inner) / tot)

    return _result(out, (s,), backward)


def normalized_sigmoid(a: Tensor) -> Tensor:
    """``sigmoid(a)`` divided by its row sum, evaluated in log space.

    Equivalent to ``normalize_rows(sigmoid(a))`` but finite even when every
    sigmoid in a row underflows.
    """
    log_s = -np.logaddexp(0.0, -a.data)
    log_s = log_s - log_s.max(axis=1, keepdims=True)
    e = np.exp(log_s)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        # d log sigmoid(a) / da = sigmoid(-a)
        a._accumulate(out * (g - inner) * _sigmoid(-a.data))

    return _result(out, (a,), backward)


def subsample_pad_channels(x: Tensor, stride: int, out_channels: int) -> Tensor:
    """Parameter-free shortcut: spatial subsampling plus zero channel padding."""
    b, c, h, w = x.shape
    if out_channels < c:
        raise ShapeError("padded shortcut cannot reduce channels")
    lo = (out_channels - c) // 2
    sub = x.data[:, :, ::stride, ::stride]
    out = np.zeros((b, out_channels) + sub.shape[2:])
    out[:, lo:lo + c] = sub

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, :, ::stride, ::stride] = g[:, lo:lo + c]
        x._accumulate(full)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- layers

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kcin}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # columns laid out (Cin*Kh*Kw, B*H'*W') so each kernel offset is a contiguous slab
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * kh * kw, b * ho * wo)
    wmat = kernel.data.reshape(cout, -1)
    out = np.ascontiguousarray((wmat @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))
    if not kernel.requires_grad:
        cols = None

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        if kernel.requires_grad:
            kernel._accumulate((gmat @ cols.T).reshape(kernel.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(cin, kh, kw, b, ho, wo)
            dxp = np.zeros((cin, b, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(np.ascontiguousarray(dxp.transpose(1, 0, 2, 3)))

    return _result(out, (x, kernel), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects BxCxHxW, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _result(out, (x,), backward)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    b, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"{h}x{w} not divisible by pool size {size}")
    out = x.data.reshape(b, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        x._accumulate(up)

    return _result(out, (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"cannot apply {weight.shape} weight to input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(out, (x, weight, bias), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalization of a BxCxHxW tensor.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In eval mode the running statistics are used.
    """
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    shp = (1, c, 1, 1)
    m = b * h * w
    if train:
        if m < 2:
            raise ValueError(f"batch_norm in train mode needs B*H*W >= 2, got {m}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shp)) * inv_std.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shp)
            if train:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shp)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shp)
                dx = (dxhat - s1 / m - xhat * s2 / m) * inv_std.reshape(shp)
            else:
                dx = dxhat * inv_std.reshape(shp)
            x._accumulate(dx)

    return _result(out, (x, gamma, beta), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = np.asarray(np.mean(logsum - z[rows, labels]))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        logits._accumulate(g * p / len(labels))

    return _result(loss, (logits,), backward)
