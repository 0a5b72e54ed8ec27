"""Pure-numpy implementations of the hot kernels.

Same contracts as the compiled backend (`archseg.kernels._fast`); used as
the import-time fallback and as the reference side of the kernel parity
tests and benchmarks.

Conventions: volumes are (C, D, H, W) C-ordered arrays; sample coordinates
are (3, M) in voxel units; out-of-grid coordinates clamp to the border.
"""

from __future__ import annotations

import numpy as np


def im2col3d(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Extract k**3 patches at each output position.

    x: (C, D, H, W). Returns (C*k**3, L) with L = od*oh*ow, patch index
    nested (c, kd, kh, kw) and output position nested (od, oh, ow).
    """
    c, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    od = (d + 2 * pad - k) // stride + 1
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols = np.empty((c, k, k, k, od, oh, ow), dtype=x.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                cols[:, kd, kh, kw] = xp[
                    :,
                    kd : kd + stride * (od - 1) + 1 : stride,
                    kh : kh + stride * (oh - 1) + 1 : stride,
                    kw : kw + stride * (ow - 1) + 1 : stride,
                ]
    return cols.reshape(c * k**3, od * oh * ow)


def col2im3d(
    cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, pad: int
) -> np.ndarray:
    """Adjoint of im2col3d: scatter-add patches back onto the grid."""
    c, d, h, w = shape
    od = (d + 2 * pad - k) // stride + 1
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.zeros((c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(c, k, k, k, od, oh, ow)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                xp[
                    :,
                    kd : kd + stride * (od - 1) + 1 : stride,
                    kh : kh + stride * (oh - 1) + 1 : stride,
                    kw : kw + stride * (ow - 1) + 1 : stride,
                ] += cols6[:, kd, kh, kw]
    if pad == 0:
        return xp
    return xp[:, pad : pad + d, pad : pad + h, pad : pad + w]


def _corner_setup(vol: np.ndarray, coords: np.ndarray):
    _, d, h, w = vol.shape
    cx = np.clip(coords[0], 0.0, d - 1.0)
    cy = np.clip(coords[1], 0.0, h - 1.0)
    cz = np.clip(coords[2], 0.0, w - 1.0)
    x0 = np.minimum(np.floor(cx), d - 2 if d > 1 else 0).astype(np.intp)
    y0 = np.minimum(np.floor(cy), h - 2 if h > 1 else 0).astype(np.intp)
    z0 = np.minimum(np.floor(cz), w - 2 if w > 1 else 0).astype(np.intp)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    z0 = np.maximum(z0, 0)
    fx = cx - x0
    fy = cy - y0
    fz = cz - z0
    return (cx, cy, cz), (x0, y0, z0), (fx, fy, fz)


def trilinear_gather(vol: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample vol (C, D, H, W) at coords (3, M) with border clamping -> (C, M)."""
    c, d, h, w = vol.shape
    _, (x0, y0, z0), (fx, fy, fz) = _corner_setup(vol, coords)
    x1 = np.minimum(x0 + 1, d - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    z1 = np.minimum(z0 + 1, w - 1)
    v = vol.reshape(c, -1)

    def at(xi, yi, zi):
        return v[:, (xi * h + yi) * w + zi]

    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = (
        at(x0, y0, z0) * (gx * gy * gz)
        + at(x1, y0, z0) * (fx * gy * gz)
        + at(x0, y1, z0) * (gx * fy * gz)
        + at(x0, y0, z1) * (gx * gy * fz)
        + at(x1, y1, z0) * (fx * fy * gz)
        + at(x1, y0, z1) * (fx * gy * fz)
        + at(x0, y1, z1) * (gx * fy * fz)
        + at(x1, y1, z1) * (fx * fy * fz)
    )
    return out.astype(vol.dtype, copy=False)


def trilinear_gather_grad(
    vol: np.ndarray, coords: np.ndarray, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backward of trilinear_gather.

    Returns (grad_vol (C,D,H,W), grad_coords (3,M)). Coordinate gradients
    vanish where the clamp saturates.
    """
    c, d, h, w = vol.shape
    m = coords.shape[1]
    (cx, cy, cz), (x0, y0, z0), (fx, fy, fz) = _corner_setup(vol, coords)
    x1 = np.minimum(x0 + 1, d - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    z1 = np.minimum(z0 + 1, w - 1)
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    v = vol.reshape(c, -1)

    def at(xi, yi, zi):
        return v[:, (xi * h + yi) * w + zi]

    c000, c100 = at(x0, y0, z0), at(x1, y0, z0)
    c010, c001 = at(x0, y1, z0), at(x0, y0, z1)
    c110, c101 = at(x1, y1, z0), at(x1, y0, z1)
    c011, c111 = at(x0, y1, z1), at(x1, y1, z1)

    dx = (
        (c100 - c000) * (gy * gz)
        + (c110 - c010) * (fy * gz)
        + (c101 - c001) * (gy * fz)
        + (c111 - c011) * (fy * fz)
    )
    dy = (
        (c010 - c000) * (gx * gz)
        + (c110 - c100) * (fx * gz)
        + (c011 - c001) * (gx * fz)
        + (c111 - c101) * (fx * fz)
    )
    dz = (
        (c001 - c000) * (gx * gy)
        + (c101 - c100) * (fx * gy)
        + (c011 - c010) * (gx * fy)
        + (c111 - c110) * (fx * fy)
    )
    inside_x = (coords[0] > 0.0) & (coords[0] < d - 1.0)
    inside_y = (coords[1] > 0.0) & (coords[1] < h - 1.0)
    inside_z = (coords[2] > 0.0) & (coords[2] < w - 1.0)
    gcoords = np.empty((3, m), dtype=coords.dtype)
    gcoords[0] = np.where(inside_x, (dx * gout).sum(axis=0), 0.0)
    gcoords[1] = np.where(inside_y, (dy * gout).sum(axis=0), 0.0)
    gcoords[2] = np.where(inside_z, (dz * gout).sum(axis=0), 0.0)

    gvol = np.zeros((c, d * h * w), dtype=vol.dtype)
    rows = np.arange(c)[:, None]
    for xi, yi, zi, wgt in (
        (x0, y0, z0, gx * gy * gz),
        (x1, y0, z0, fx * gy * gz),
        (x0, y1, z0, gx * fy * gz),
        (x0, y0, z1, gx * gy * fz),
        (x1, y1, z0, fx * fy * gz),
        (x1, y0, z1, fx * gy * fz),
        (x0, y1, z1, gx * fy * fz),
        (x1, y1, z1, fx * fy * fz),
    ):
        idx = (xi * h + yi) * w + zi
        np.add.at(gvol, (rows, idx[None, :]), gout * wgt)
    return gvol.reshape(c, d, h, w), gcoords


def box_sum3d(x: np.ndarray, r: int) -> np.ndarray:
    """Sum over centered (2r+1)**3 windows truncated at the grid boundary.

    Accumulates in float64 regardless of input dtype (LNCC statistics are
    cancellation-sensitive); returns float64.
    """
    out = x.astype(np.float64, copy=True)
    for axis in range(3):
        out = _box1d(out, axis, r)
    return out


def _box1d(x: np.ndarray, axis: int, r: int) -> np.ndarray:
    n = x.shape[axis]
    cs = np.cumsum(x, axis=axis)
    hi = np.minimum(np.arange(n) + r, n - 1)
    lo = np.arange(n) - r - 1
    out = np.take(cs, hi, axis=axis)
    valid = lo >= 0
    if valid.any():
        sub = np.take(cs, np.clip(lo, 0, n - 1), axis=axis)
        shape = [1, 1, 1]
        shape[axis] = n
        out = out - np.where(valid.reshape(shape), sub, 0.0)
    return out
