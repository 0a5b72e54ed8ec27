"""Differentiable operations over Tensors.

Each op builds the forward value eagerly and attaches a backward closure
that routes the incoming gradient to its parents. Shapes follow numpy
broadcasting; gradients of broadcast operands are summed back down to the
operand shape.

Volumetric ops use the (N, C, D, H, W) layout. conv3d is cross-correlation
via im2col + BLAS matmul; columns are recomputed during backward instead of
cached, trading a second extraction for a much smaller retained graph.
"""

from __future__ import annotations

import numpy as np

from archseg import kernels
from archseg.autodiff.tensor import Tensor, as_tensor

# ---------------------------------------------------------------------------
# broadcasting arithmetic
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value + b.value, parents=(a, b))

    def bw(g):
        a.accumulate(_unbroadcast(g, a.value.shape))
        b.accumulate(_unbroadcast(g, b.value.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value * b.value, parents=(a, b))

    def bw(g):
        a.accumulate(_unbroadcast(g * b.value, a.value.shape))
        b.accumulate(_unbroadcast(g * a.value, b.value.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value / b.value, parents=(a, b))

    def bw(g):
        a.accumulate(_unbroadcast(g / b.value, a.value.shape))
        b.accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    out = Tensor(a.value**k, parents=(a,))

    def bw(g):
        a.accumulate(g * k * a.value ** (k - 1.0))

    out._backward_fn = bw if out.requires_grad else None
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2D operands only")
    out = Tensor(a.value @ b.value, parents=(a, b))

    def bw(g):
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)

    out._backward_fn = bw if out.requires_grad else None
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(a.value.reshape(shape), parents=(a,))

    def bw(g):
        a.accumulate(g.reshape(a.value.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.value[idx], parents=(a,))

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        a.accumulate(full)

    out._backward_fn = bw if out.requires_grad else None
    return out


def concat(parts, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis), parents=parts)
    sizes = [p.value.shape[axis] for p in parts]

    def bw(g):
        start = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            p.accumulate(g[tuple(sl)])
            start += size

    out._backward_fn = bw if out.requires_grad else None
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def bw(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.value.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.value.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in np.atleast_1d(axis)]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.value, 0), parents=(a,))

    def bw(g):
        a.accumulate(g * (a.value > 0))

    out._backward_fn = bw if out.requires_grad else None
    return out


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.where(a.value > 0, a.value, alpha * a.value), parents=(a,))

    def bw(g):
        a.accumulate(g * np.where(a.value > 0, 1.0, alpha).astype(g.dtype))

    out._backward_fn = bw if out.requires_grad else None
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    y = y.astype(v.dtype, copy=False)
    out = Tensor(y, parents=(a,))

    def bw(g):
        a.accumulate(g * y * (1.0 - y))

    out._backward_fn = bw if out.requires_grad else None
    return out


def safe_log(a, floor: float = 1e-12) -> Tensor:
    """log with the argument clamped below at floor (gradient 0 when clamped)."""
    a = as_tensor(a)
    clipped = np.maximum(a.value, floor)
    out = Tensor(np.log(clipped), parents=(a,))

    def bw(g):
        a.accumulate(np.where(a.value >= floor, g / clipped, 0.0).astype(a.value.dtype))

    out._backward_fn = bw if out.requires_grad else None
    return out


def softmax(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, parents=(a,))

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a.accumulate(y * (g - dot))

    out._backward_fn = bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# volumetric network ops
# ---------------------------------------------------------------------------


def _conv_out_dims(dims, k, stride, pad):
    return tuple((s + 2 * pad - k) // stride + 1 for s in dims)


def conv3d(x, w, b=None, stride: int = 1, pad: int | None = None) -> Tensor:
    """Cross-correlation of (N, Cin, D, H, W) with (Cout, Cin, k, k, k).

    Columns built in the forward pass are kept for the weight gradient;
    pointwise kernels skip column extraction entirely.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, cin, d, h, wd = x.value.shape
    cout, cin_w, k = w.value.shape[0], w.value.shape[1], w.value.shape[2]
    if cin_w != cin:
        raise ValueError(f"input has {cin} channels, kernel expects {cin_w}")
    if pad is None:
        pad = k // 2
    od, oh, ow = _conv_out_dims((d, h, wd), k, stride, pad)
    ell = od * oh * ow

    pointwise = k == 1 and stride == 1 and pad == 0
    if pointwise:
        cols = [x.value[i].reshape(cin, ell) for i in range(n)]
    else:
        cols = [kernels.im2col3d(x.value[i], k, stride, pad) for i in range(n)]
    w2 = w.value.reshape(cout, cin * k**3)
    if b is not None:
        b = as_tensor(b)
    y = np.empty((n, cout, od, oh, ow), dtype=x.value.dtype)
    for i in range(n):
        y2 = w2 @ cols[i]
        if b is not None:
            y2 += b.value[:, None]
        y[i] = y2.reshape(cout, od, oh, ow)
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, parents=parents)

    def bw(g):
        gw = np.zeros_like(w.value, shape=w2.shape) if w.requires_grad else None
        gb = np.zeros_like(b.value) if b is not None else None
        dx = np.empty(x.value.shape, dtype=g.dtype) if x.requires_grad else None
        for i in range(n):
            g2 = g[i].reshape(cout, ell)
            if gb is not None:
                gb += g2.sum(axis=1)
            if gw is not None:
                gw += g2 @ cols[i].T
            if dx is not None:
                dcols = w2.T @ g2
                if pointwise:
                    dx[i] = dcols.reshape(cin, d, h, wd)
                else:
                    dx[i] = kernels.col2im3d(dcols, (cin, d, h, wd), k, stride, pad)
        if gb is not None:
            b.accumulate(gb)
        if gw is not None:
            w.accumulate(gw.reshape(w.value.shape))
        if dx is not None:
            x.accumulate(dx)

    out._backward_fn = bw if out.requires_grad else None
    return out


_UPSAMPLE_COORDS: dict = {}


def _upsample_coords(dims: tuple[int, int, int], dtype) -> np.ndarray:
    key = (dims, np.dtype(dtype).str)
    got = _UPSAMPLE_COORDS.get(key)
    if got is None:
        axes = [
            ((np.arange(2 * s, dtype=np.float64) + 0.5) / 2.0 - 0.5) for s in dims
        ]
        grid = np.meshgrid(*axes, indexing="ij")
        got = np.ascontiguousarray(
            np.stack(grid).reshape(3, -1).astype(dtype)
        )
        _UPSAMPLE_COORDS[key] = got
    return got


def upsample2x(x) -> Tensor:
    """Trilinear doubling of (N, C, D, H, W) spatial dims (half-pixel grid)."""
    x = as_tensor(x)
    n, c, d, h, w = x.value.shape
    coords = _upsample_coords((d, h, w), x.value.dtype)
    outs = [
        kernels.trilinear_gather(x.value[i], coords).reshape(c, 2 * d, 2 * h, 2 * w)
        for i in range(n)
    ]
    out = Tensor(np.stack(outs), parents=(x,))

    def bw(g):
        dx = np.empty_like(x.value)
        for i in range(n):
            gv, _ = kernels.trilinear_gather_grad(
                x.value[i], coords, g[i].reshape(c, -1)
            )
            dx[i] = gv
        x.accumulate(dx)

    out._backward_fn = bw if out.requires_grad else None
    return out


def avg_pool2(x) -> Tensor:
    """2x2x2 average pooling with stride 2; spatial dims must be even."""
    x = as_tensor(x)
    n, c, d, h, w = x.value.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {(d, h, w)}")
    v = x.value.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    out = Tensor(v.mean(axis=(3, 5, 7)), parents=(x,))

    def bw(g):
        ge = np.repeat(np.repeat(np.repeat(g / 8.0, 2, axis=2), 2, axis=3), 2, axis=4)
        x.accumulate(ge.astype(x.value.dtype))

    out._backward_fn = bw if out.requires_grad else None
    return out


def global_avg_pool(x) -> Tensor:
    """(N, C, D, H, W) -> (N, C) spatial mean."""
    return tmean(as_tensor(x), axis=(2, 3, 4))


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channel-wise batch normalization over (N, C, D, H, W).

    Running statistics (plain arrays, not graph nodes) are updated in place
    during training and used verbatim in eval mode.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3, 4)
    cshape = (1, -1, 1, 1, 1)
    if training:
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.value.dtype)
        var = running_var.astype(x.value.dtype)
    std = np.sqrt(var + eps)
    xhat = (x.value - mu.reshape(cshape)) / std.reshape(cshape)
    y = gamma.value.reshape(cshape) * xhat + beta.value.reshape(cshape)
    out = Tensor(y.astype(x.value.dtype, copy=False), parents=(x, gamma, beta))

    def bw(g):
        gamma.accumulate((g * xhat).sum(axis=axes))
        beta.accumulate(g.sum(axis=axes))
        if not x.requires_grad:
            return
        gsc = g * gamma.value.reshape(cshape)
        if training:
            mean_g = gsc.mean(axis=axes, keepdims=True)
            mean_gx = (gsc * xhat).mean(axis=axes, keepdims=True)
            dx = (gsc - mean_g - xhat * mean_gx) / std.reshape(cshape)
        else:
            dx = gsc / std.reshape(cshape)
        x.accumulate(dx.astype(x.value.dtype))

    out._backward_fn = bw if out.requires_grad else None
    return out


def dropout(x, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: active only in training, survivors scaled 1/(1-p)."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.value.shape) >= p).astype(x.value.dtype) / (1.0 - p)
    out = Tensor(x.value * keep, parents=(x,))

    def bw(g):
        x.accumulate(g * keep)

    out._backward_fn = bw if out.requires_grad else None
    return out
