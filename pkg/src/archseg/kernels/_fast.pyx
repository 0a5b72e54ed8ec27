# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the hot kernels.

Contracts mirror archseg.kernels.pyref exactly; parity is enforced by the
kernel test suite on both float32 and float64 inputs.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3d(real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t c = x.shape[0], d = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t od = (d + 2 * pad - k) // stride + 1
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    cdef Py_ssize_t L = od * oh * ow
    out_np = np.empty((c * k * k * k, L), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t ci, i, j, l, kd, kh, kw, di, hi, wi, row, col
    cdef real val
    with nogil:
        for ci in range(c):
            for kd in range(k):
                for kh in range(k):
                    for kw in range(k):
                        row = ((ci * k + kd) * k + kh) * k + kw
                        col = 0
                        for i in range(od):
                            di = i * stride + kd - pad
                            for j in range(oh):
                                hi = j * stride + kh - pad
                                for l in range(ow):
                                    wi = l * stride + kw - pad
                                    if 0 <= di < d and 0 <= hi < h and 0 <= wi < w:
                                        val = x[ci, di, hi, wi]
                                    else:
                                        val = 0
                                    out[row, col] = val
                                    col += 1
    return out_np


def col2im3d(real[:, ::1] cols, shape, int k, int stride, int pad):
    cdef Py_ssize_t c = shape[0], d = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t od = (d + 2 * pad - k) // stride + 1
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    out_np = np.zeros((c, d, h, w), dtype=np.asarray(cols).dtype)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t ci, i, j, l, kd, kh, kw, di, hi, wi, row, col
    with nogil:
        for ci in range(c):
            for kd in range(k):
                for kh in range(k):
                    for kw in range(k):
                        row = ((ci * k + kd) * k + kh) * k + kw
                        col = 0
                        for i in range(od):
                            di = i * stride + kd - pad
                            for j in range(oh):
                                hi = j * stride + kh - pad
                                for l in range(ow):
                                    wi = l * stride + kw - pad
                                    if 0 <= di < d and 0 <= hi < h and 0 <= wi < w:
                                        out[ci, di, hi, wi] += cols[row, col]
                                    col += 1
    return out_np


cdef inline double _clampd(double v, double lo, double hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def trilinear_gather(real[:, :, :, ::1] vol, real[:, ::1] coords):
    cdef Py_ssize_t c = vol.shape[0], d = vol.shape[1], h = vol.shape[2], w = vol.shape[3]
    cdef Py_ssize_t m = coords.shape[1]
    out_np = np.empty((c, m), dtype=np.asarray(vol).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, ci, x0, y0, z0, x1, y1, z1
    cdef double cx, cy, cz, fx, fy, fz, gx, gy, gz
    with nogil:
        for i in range(m):
            cx = _clampd(coords[0, i], 0.0, d - 1.0)
            cy = _clampd(coords[1, i], 0.0, h - 1.0)
            cz = _clampd(coords[2, i], 0.0, w - 1.0)
            x0 = <Py_ssize_t>cx
            y0 = <Py_ssize_t>cy
            z0 = <Py_ssize_t>cz
            if x0 > d - 2:
                x0 = d - 2 if d > 1 else 0
            if y0 > h - 2:
                y0 = h - 2 if h > 1 else 0
            if z0 > w - 2:
                z0 = w - 2 if w > 1 else 0
            fx = cx - x0
            fy = cy - y0
            fz = cz - z0
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            x1 = x0 + 1 if x0 + 1 < d else d - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            z1 = z0 + 1 if z0 + 1 < w else w - 1
            for ci in range(c):
                out[ci, i] = <real>(
                    vol[ci, x0, y0, z0] * (gx * gy * gz)
                    + vol[ci, x1, y0, z0] * (fx * gy * gz)
                    + vol[ci, x0, y1, z0] * (gx * fy * gz)
                    + vol[ci, x0, y0, z1] * (gx * gy * fz)
                    + vol[ci, x1, y1, z0] * (fx * fy * gz)
                    + vol[ci, x1, y0, z1] * (fx * gy * fz)
                    + vol[ci, x0, y1, z1] * (gx * fy * fz)
                    + vol[ci, x1, y1, z1] * (fx * fy * fz))
    return out_np


def trilinear_gather_grad(real[:, :, :, ::1] vol, real[:, ::1] coords, real[:, ::1] gout):
    cdef Py_ssize_t c = vol.shape[0], d = vol.shape[1], h = vol.shape[2], w = vol.shape[3]
    cdef Py_ssize_t m = coords.shape[1]
    dt = np.asarray(vol).dtype
    gvol_np = np.zeros((c, d, h, w), dtype=dt)
    gcoords_np = np.zeros((3, m), dtype=np.asarray(coords).dtype)
    cdef real[:, :, :, ::1] gvol = gvol_np
    cdef real[:, ::1] gcoords = gcoords_np
    cdef Py_ssize_t i, ci, x0, y0, z0, x1, y1, z1
    cdef double cx, cy, cz, fx, fy, fz, gx, gy, gz, g
    cdef double dx, dy, dz
    cdef double c000, c100, c010, c001, c110, c101, c011, c111
    cdef bint in_x, in_y, in_z
    with nogil:
        for i in range(m):
            cx = _clampd(coords[0, i], 0.0, d - 1.0)
            cy = _clampd(coords[1, i], 0.0, h - 1.0)
            cz = _clampd(coords[2, i], 0.0, w - 1.0)
            in_x = 0.0 < coords[0, i] < d - 1.0
            in_y = 0.0 < coords[1, i] < h - 1.0
            in_z = 0.0 < coords[2, i] < w - 1.0
            x0 = <Py_ssize_t>cx
            y0 = <Py_ssize_t>cy
            z0 = <Py_ssize_t>cz
            if x0 > d - 2:
                x0 = d - 2 if d > 1 else 0
            if y0 > h - 2:
                y0 = h - 2 if h > 1 else 0
            if z0 > w - 2:
                z0 = w - 2 if w > 1 else 0
            fx = cx - x0
            fy = cy - y0
            fz = cz - z0
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            x1 = x0 + 1 if x0 + 1 < d else d - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            z1 = z0 + 1 if z0 + 1 < w else w - 1
            dx = 0.0
            dy = 0.0
            dz = 0.0
            for ci in range(c):
                g = gout[ci, i]
                c000 = vol[ci, x0, y0, z0]
                c100 = vol[ci, x1, y0, z0]
                c010 = vol[ci, x0, y1, z0]
                c001 = vol[ci, x0, y0, z1]
                c110 = vol[ci, x1, y1, z0]
                c101 = vol[ci, x1, y0, z1]
                c011 = vol[ci, x0, y1, z1]
                c111 = vol[ci, x1, y1, z1]
                dx += g * ((c100 - c000) * gy * gz + (c110 - c010) * fy * gz
                           + (c101 - c001) * gy * fz + (c111 - c011) * fy * fz)
                dy += g * ((c010 - c000) * gx * gz + (c110 - c100) * fx * gz
                           + (c011 - c001) * gx * fz + (c111 - c101) * fx * fz)
                dz += g * ((c001 - c000) * gx * gy + (c101 - c100) * fx * gy
                           + (c011 - c010) * gx * fy + (c111 - c110) * fx * fy)
                gvol[ci, x0, y0, z0] += <real>(g * gx * gy * gz)
                gvol[ci, x1, y0, z0] += <real>(g * fx * gy * gz)
                gvol[ci, x0, y1, z0] += <real>(g * gx * fy * gz)
                gvol[ci, x0, y0, z1] += <real>(g * gx * gy * fz)
                gvol[ci, x1, y1, z0] += <real>(g * fx * fy * gz)
                gvol[ci, x1, y0, z1] += <real>(g * fx * gy * fz)
                gvol[ci, x0, y1, z1] += <real>(g * gx * fy * fz)
                gvol[ci, x1, y1, z1] += <real>(g * fx * fy * fz)
            gcoords[0, i] = <real>(dx if in_x else 0.0)
            gcoords[1, i] = <real>(dy if in_y else 0.0)
            gcoords[2, i] = <real>(dz if in_z else 0.0)
    return gvol_np, gcoords_np


def box_sum3d(real[:, :, ::1] x, int r):
    """Truncated centered (2r+1)**3 window sums, float64 accumulation."""
    cdef Py_ssize_t d = x.shape[0], h = x.shape[1], w = x.shape[2]
    scratch_np = np.empty((d, h, w), dtype=np.float64)
    out_np = np.empty((d, h, w), dtype=np.float64)
    cdef double[:, :, ::1] a = scratch_np
    cdef double[:, :, ::1] b = out_np
    cdef Py_ssize_t i, j, l
    cdef double s
    with nogil:
        # axis 2 (reads the input, which is never written)
        for i in range(d):
            for j in range(h):
                s = 0.0
                for l in range(w if w < r + 1 else r + 1):
                    s += x[i, j, l]
                b[i, j, 0] = s
                for l in range(1, w):
                    if l + r < w:
                        s += x[i, j, l + r]
                    if l - r - 1 >= 0:
                        s -= x[i, j, l - r - 1]
                    b[i, j, l] = s
        # axis 1
        for i in range(d):
            for l in range(w):
                s = 0.0
                for j in range(h if h < r + 1 else r + 1):
                    s += b[i, j, l]
                a[i, 0, l] = s
                for j in range(1, h):
                    if j + r < h:
                        s += b[i, j + r, l]
                    if j - r - 1 >= 0:
                        s -= b[i, j - r - 1, l]
                    a[i, j, l] = s
        # axis 0
        for j in range(h):
            for l in range(w):
                s = 0.0
                for i in range(d if d < r + 1 else r + 1):
                    s += a[i, j, l]
                b[0, j, l] = s
                for i in range(1, d):
                    if i + r < d:
                        s += a[i + r, j, l]
                    if i - r - 1 >= 0:
                        s -= a[i - r - 1, j, l]
                    b[i, j, l] = s
    return out_np
