"""Dense-tensor reverse-mode autodiff on top of numpy.

Just enough operations to train the convolutional tokenizer and the code
transformer: elementwise arithmetic, matmul, conv1d, normalization, softmax,
embedding lookup and the two training losses. Gradients are checked against
central finite differences (see gradcheck.py).
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible; message names the offending dimension."""


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Context manager switching the default dtype (float64 for verification)."""

    def __init__(self, dtype):
        self.dtype = dtype
        self._saved = None

    def __enter__(self):
        global _DEFAULT_DTYPE
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        global _DEFAULT_DTYPE
        _DEFAULT_DTYPE = self._saved
        return False


class no_grad:
    """Context manager disabling graph construction (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _coerce(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(_DEFAULT_DTYPE)


class Tensor:
    """A numpy array plus an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bwd)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def bwd(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), bwd)


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), bwd)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), bwd)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0).astype(a.data.dtype)

    def bwd(g):
        a._accumulate(g * mask)

    return _make(out_data, (a,), bwd)


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bwd(g):
        a._accumulate(np.transpose(g, inv))

    return _make(out_data, (a,), bwd)


def _is_advanced_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a, key):
    a = as_tensor(a)
    out_data = a.data[key]
    advanced = _is_advanced_index(key)

    def bwd(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)  # repeated indices must accumulate
        else:
            full[key] += g
        a._accumulate(full)

    return _make(out_data, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, tuple(tensors), bwd)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    out = tsum(a, axis, keepdims)
    return mul(out, 1.0 / float(n))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.data.shape[-1]} (lhs last) vs "
            f"{b.data.shape[-2]} (rhs second-to-last)"
        )
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


def linear(x, weight, bias=None):
    """x @ weight + bias with weight of shape (in_features, out_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ShapeError(
            f"linear: input features {x.data.shape[-1]} != weight in_features {weight.data.shape[0]}"
        )
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- conv / upsample ---------------------------------------------------------


def conv1d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """1D cross-correlation over the trailing (time) axis.

    x: (C_in, T) or (N, C_in, T); weight: (C_out, C_in, K); bias: (C_out,).
    T_out = floor((T + 2*padding - dilation*(K-1) - 1)/stride) + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d: input must be 2D or 3D, got {x.data.ndim}D")
    n, c_in, t = xd.shape
    c_out, c_in_w, k = weight.data.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv1d: input channels {c_in} != weight in_channels {c_in_w}")
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(f"conv1d: bias length {bias.data.shape} != out_channels {c_out}")
    span = dilation * (k - 1) + 1
    if t + 2 * padding < span:
        raise ShapeError(
            f"conv1d: padded length {t + 2 * padding} shorter than kernel span {span} "
            f"(T={t}, padding={padding}, kernel={k}, dilation={dilation})"
        )
    t_out = (t + 2 * padding - span) // stride + 1

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding)))
    else:
        xp = xd
    out_data = np.zeros((n, c_out, t_out), dtype=xd.dtype)
    # k is small (<= 4); each tap is one BLAS contraction
    for tap in range(k):
        sl = slice(tap * dilation, tap * dilation + (t_out - 1) * stride + 1, stride)
        piece = np.tensordot(weight.data[:, :, tap], xp[:, :, sl], axes=([1], [1]))
        out_data += piece.transpose(1, 0, 2)
    if bias is not None:
        out_data += bias.data[None, :, None]

    def bwd(g):
        if squeeze:
            g = g[None]
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for tap in range(k):
                sl = slice(tap * dilation, tap * dilation + (t_out - 1) * stride + 1, stride)
                gw[:, :, tap] = np.tensordot(g, xp[:, :, sl], axes=([0, 2], [0, 2]))
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for tap in range(k):
                sl = slice(tap * dilation, tap * dilation + (t_out - 1) * stride + 1, stride)
                piece = np.tensordot(weight.data[:, :, tap], g, axes=([0], [1]))
                gxp[:, :, sl] += piece.transpose(1, 0, 2)
            gx = gxp[:, :, padding : padding + t] if padding else gxp
            x._accumulate(gx[0] if squeeze else gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data[0] if squeeze else out_data, parents, bwd)
    return out


def upsample_nearest(x, factor=2):
    """Repeat each time step `factor` times along the trailing axis."""
    x = as_tensor(x)
    out_data = np.repeat(x.data, factor, axis=-1)

    def bwd(g):
        shape = g.shape[:-1] + (x.data.shape[-1], factor)
        x._accumulate(g.reshape(shape).sum(axis=-1))

    return _make(out_data, (x,), bwd)


# -- normalization and softmax -----------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: affine shape {gamma.data.shape}/{beta.data.shape} != feature dim ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gh - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), bwd)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return _make(out_data, (x,), bwd)


def embedding_lookup(table, indices):
    """Select rows of `table` (V, d) by integer array `indices`; gradients scatter-add."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding_lookup: index out of range [0, {table.data.shape[0]}), "
            f"got min {idx.min()} max {idx.max()}"
        )
    out_data = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table._accumulate(gt)

    return _make(out_data, (table,), bwd)


# -- losses -------------------------------------------------------------------


def smooth_l1(x, y, delta=1.0):
    """Mean Huber-style penalty: quadratic inside |e| < delta, linear outside."""
    x, y = as_tensor(x), as_tensor(y)
    if x.data.shape != y.data.shape:
        raise ShapeError(f"smooth_l1: shape mismatch {x.data.shape} vs {y.data.shape}")
    e = x.data - y.data
    ae = np.abs(e)
    quad = ae < delta
    vals = np.where(quad, 0.5 * e * e / delta, ae - 0.5 * delta)
    out_data = np.asarray(vals.mean(), dtype=x.data.dtype)
    n = e.size

    def bwd(g):
        de = np.where(quad, e / delta, np.sign(e)) * (g / n)
        if x.requires_grad:
            x._accumulate(de)
        if y.requires_grad:
            y._accumulate(-de)

    return _make(out_data, (x, y), bwd)


def l1_loss(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.data.shape != y.data.shape:
        raise ShapeError(f"l1_loss: shape mismatch {x.data.shape} vs {y.data.shape}")
    e = x.data - y.data
    out_data = np.asarray(np.abs(e).mean(), dtype=x.data.dtype)
    n = e.size

    def bwd(g):
        de = np.sign(e) * (g / n)
        if x.requires_grad:
            x._accumulate(de)
        if y.requires_grad:
            y._accumulate(-de)

    return _make(out_data, (x, y), bwd)


def mse_loss(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.data.shape != y.data.shape:
        raise ShapeError(f"mse_loss: shape mismatch {x.data.shape} vs {y.data.shape}")
    e = x.data - y.data
    out_data = np.asarray((e * e).mean(), dtype=x.data.dtype)
    n = e.size

    def bwd(g):
        de = 2.0 * e * (g / n)
        if x.requires_grad:
            x._accumulate(de)
        if y.requires_grad:
            y._accumulate(-de)

    return _make(out_data, (x, y), bwd)


def cross_entropy(logits, targets, ignore_mask=None):
    """Mean negative log-softmax probability of `targets` over unmasked rows.

    logits: (M, V); targets: (M,) ints in [0, V); ignore_mask: optional (M,)
    bool, True rows are excluded from the mean.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets)
    m, v = logits.data.shape
    if t.shape != (m,):
        raise ShapeError(f"cross_entropy: targets shape {t.shape} != ({m},)")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise ShapeError(f"cross_entropy: target index out of range [0, {v}), got {t.min()}..{t.max()}")
    keep = np.ones(m, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("cross_entropy: all positions masked")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(m), t]
    out_data = np.asarray(nll[keep].mean(), dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(m), t] -= 1.0
        p *= (keep / n_keep)[:, None] * g
        logits._accumulate(p)

    return _make(out_data, (logits,), bwd)
