"""Differentiable operations.

Every op takes Tensors (or array-likes, promoted to constant Tensors), computes
a float64 forward result, and records a backward closure when grads are enabled
and any input requires them. Stride-1 convolution only; downsampling is done by
pooling ops.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ConfigError, NumericsError, ShapeError
from .tensor import OpRecord, Tensor, is_grad_enabled


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(kind, inputs, out_data, grad_fn) -> Tensor:
    out = Tensor._from_op(out_data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.record = OpRecord(kind, inputs, out, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result("add", (a, b), out, grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result("sub", (a, b), out, grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _result("mul", (a, b), out, grad_fn)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.min(x.data) <= 0.0:
        raise NumericsError("log requires strictly positive inputs")
    out = np.log(x.data)

    def grad_fn(g):
        return (g / x.data,)

    return _result("log", (x,), out, grad_fn)


def clip(x, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise ConfigError(f"clip needs lo < hi, got [{lo}, {hi}]")
    out = np.clip(x.data, lo, hi)
    passthrough = (x.data >= lo) & (x.data <= hi)

    def grad_fn(g):
        return (g * passthrough,)

    return _result("clip", (x,), out, grad_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    positive = x.data > 0.0

    def grad_fn(g):
        return (g * positive,)

    return _result("relu", (x,), out, grad_fn)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", (x,), out, grad_fn)


# ---------------------------------------------------------------- reductions

def reduce_sum(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def grad_fn(g):
        return (np.full(x.data.shape, float(g)),)

    return _result("sum", (x,), out, grad_fn)


def reduce_mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor is undefined")
    out = np.asarray(x.data.mean())

    def grad_fn(g):
        return (np.full(x.data.shape, float(g) / n),)

    return _result("mean", (x,), out, grad_fn)


# ---------------------------------------------------------------- linear maps

def dense(x, w, b=None) -> Tensor:
    """Affine map: (B, Fin) @ (Fin, Fout) + (Fout,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"dense expects 2-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense size mismatch: input {x.shape} vs weight {w.shape}")
    inputs = [x, w]
    out = x.data @ w.data
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"dense bias shape {b.shape}, expected ({w.shape[1]},)")
        inputs.append(b)
        out = out + b.data

    def grad_fn(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result("dense", inputs, out, grad_fn)


def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """Stride-1 2-d correlation with symmetric zero padding.

    x: (B, C, H, W), w: (Cout, C, kh, kw), b: (Cout,) or None.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    batch, cin, h, wd_ = x.shape
    cout, kc, kh, kw = w.shape
    if kc != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kc}")
    p = int(padding)
    if p < 0:
        raise ConfigError("conv2d padding must be non-negative")
    ho, wo = h + 2 * p - kh + 1, wd_ + 2 * p - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d kernel {kh}x{kw} too large for padded input {h + 2 * p}x{wd_ + 2 * p}")

    inputs = [x, w]
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))          # (B,C,Ho,Wo,kh,kw)
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    col = col.reshape(batch * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (col @ wmat.T).reshape(batch, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.shape}, expected ({cout},)")
        inputs.append(b)
        out = out + b.data[None, :, None, None]

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(batch * ho * wo, cout)
        dw = (g2.T @ col).reshape(w.shape)
        dcol = (g2 @ wmat).reshape(batch, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((batch, cin, h + 2 * p, wd_ + 2 * p))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho, j:j + wo] += dcol[:, :, i, j]
        dx = dxp[:, :, p:p + h, p:p + wd_] if p else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result("conv2d", inputs, np.ascontiguousarray(out), grad_fn)


# ---------------------------------------------------------------- pooling

def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; spatial dims must divide by k."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4-d input, got {x.shape}")
    k = int(k)
    if k < 1:
        raise ConfigError("pool size must be >= 1")
    batch, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    out = x.data.reshape(batch, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def grad_fn(g):
        return ((g / (k * k)).repeat(k, axis=2).repeat(k, axis=3),)

    return _result("avg_pool", (x,), out, grad_fn)


def global_avg_pool(x) -> Tensor:
    """Mean over both spatial dims: (B, C, H, W) -> (B, C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    batch, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _result("global_avg_pool", (x,), out, grad_fn)


# ---------------------------------------------------------------- shape ops

def concat_channels(xs) -> Tensor:
    """Concatenate 4-d tensors along the channel axis."""
    ts = [_as_tensor(t) for t in xs]
    if not ts:
        raise ShapeError("concat_channels needs at least one input")
    for t in ts:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels expects 4-d inputs, got {t.shape}")
        if t.shape[0] != ts[0].shape[0] or t.shape[2:] != ts[0].shape[2:]:
            raise ShapeError("concat_channels inputs differ outside the channel axis")
    out = np.concatenate([t.data for t in ts], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in ts])

    def grad_fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(ts)))

    return _result("concat", tuple(ts), out, grad_fn)


def upsample_nearest(x, factor: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest expects 4-d input, got {x.shape}")
    f = int(factor)
    if f < 1:
        raise ConfigError("upsample factor must be >= 1")
    batch, c, h, w = x.shape
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)

    def grad_fn(g):
        return (g.reshape(batch, c, h, f, w, f).sum(axis=(3, 5)),)

    return _result("upsample_nearest", (x,), out, grad_fn)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic 1-d linear interpolation matrix (half-pixel centers)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x, size) -> Tensor:
    """Resize (B, C, H, W) to (B, C, size[0], size[1]) by separable linear interpolation."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects 4-d input, got {x.shape}")
    h2, w2 = int(size[0]), int(size[1])
    if h2 < 1 or w2 < 1:
        raise ConfigError("upsample size must be positive")
    r = _interp_matrix(h2, x.shape[2])
    s = _interp_matrix(w2, x.shape[3])
    out = np.einsum("hy,bcyx,wx->bchw", r, x.data, s, optimize=True)

    def grad_fn(g):
        return (np.einsum("hy,bchw,wx->bcyx", r, g, s, optimize=True),)

    return _result("upsample_bilinear", (x,), out, grad_fn)


# ---------------------------------------------------------------- batch norm

def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Channel-wise batch normalization for 2-d or 4-d inputs.

    In training mode batch statistics normalize, and the running arrays are
    updated in place: running = momentum * running + (1 - momentum) * batch.
    In eval mode the running arrays normalize and stay untouched.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim == 4:
        axes, c = (0, 2, 3), x.shape[1]
        expand = (1, c, 1, 1)
    elif x.ndim == 2:
        axes, c = (0,), x.shape[1]
        expand = (1, c)
    else:
        raise ShapeError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm {name} shape {t.shape}, expected ({c},)")
    for name, arr in (("running_mean", running_mean), ("running_var", running_var)):
        if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
            # in-place updates would land on a converted copy and be lost
            raise ShapeError(f"batch_norm {name} must be a float64 ndarray")
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm {name} shape {arr.shape}, expected ({c},)")

    n = x.data.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    centered = x.data - mu.reshape(expand)
    xhat = centered * inv.reshape(expand)
    out = gamma.data.reshape(expand) * xhat + beta.data.reshape(expand)

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(expand)
        if training:
            dvar = (dxhat * centered).sum(axis=axes) * (-0.5) * inv ** 3
            dmu = dxhat.sum(axis=axes) * (-inv)
            dx = (dxhat * inv.reshape(expand)
                  + dvar.reshape(expand) * 2.0 * centered / n
                  + dmu.reshape(expand) / n)
        else:
            dx = dxhat * inv.reshape(expand)
        return dx, dgamma, dbeta

    return _result("batch_norm", (x, gamma, beta), out, grad_fn)


# ---------------------------------------------------------------- dispatcher

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "log": log,
    "clip": clip,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "relu": relu,
    "sigmoid": sigmoid,
    "dense": dense,
    "conv2d": conv2d,
    "batch_norm": batch_norm,
    "avg_pool": avg_pool2d,
    "avg_pool2d": avg_pool2d,
    "global_avg_pool": global_avg_pool,
    "concat": concat_channels,
    "channel_concat": concat_channels,
    "upsample_nearest": upsample_nearest,
    "upsample_bilinear": upsample_bilinear,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Dispatch an op by name. Dashes in ``kind`` are treated as underscores.

    Array inputs are promoted to constant Tensors, which rejects non-finite
    values; Tensors are finite by construction.
    """
    fn = _OPS.get(str(kind).replace("-", "_"))
    if fn is None:
        raise ConfigError(f"unknown op kind: {kind!r}")
    return fn(*inputs, **params)
