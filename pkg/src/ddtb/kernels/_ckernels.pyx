# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the conv patch expansion and fake-quantization loops."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, copysign

cnp.import_array()


cdef inline Py_ssize_t _first_valid(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride) nogil:
    # smallest o with o * stride + k - pad >= 0
    cdef Py_ssize_t d = pad - k
    if d <= 0:
        return 0
    return (d + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride, Py_ssize_t size,
                                  Py_ssize_t n_out) nogil:
    # one past the largest o with o * stride + k - pad < size
    cdef Py_ssize_t d = size - 1 + pad - k
    if d < 0:
        return 0
    d = d // stride + 1
    return d if d < n_out else n_out


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, ky, kx, oy, ox, iy, row, y0, y1, x0, x1, off
    cdef const double* src
    cdef double* dst
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ky in range(kh):
                    y0 = _first_valid(ky, pad, stride)
                    y1 = _end_valid(ky, pad, stride, h, ho)
                    for kx in range(kw):
                        row = (ch * kh + ky) * kw + kx
                        x0 = _first_valid(kx, pad, stride)
                        x1 = _end_valid(kx, pad, stride, w, wo)
                        if x1 <= x0:
                            continue
                        off = kx - pad
                        for oy in range(y0, y1):
                            iy = oy * stride + ky - pad
                            src = &x[b, ch, iy, 0]
                            dst = &out[b, row, oy * wo]
                            if stride == 1:
                                for ox in range(x0, x1):
                                    dst[ox] = src[ox + off]
                            else:
                                for ox in range(x0, x1):
                                    dst[ox] = src[ox * stride + off]
    return out_arr


def col2im(const double[:, :, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, ky, kx, oy, ox, iy, ix, row
    # same (ky, kx) visiting order as the numpy fallback so sums match exactly
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (ch * kh + ky) * kw + kx
                        for oy in range(ho):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + kx - pad
                                if ix < 0 or ix >= w:
                                    continue
                                out[b, ch, iy, ix] += cols[b, row, oy * wo + ox]
    return out_arr


def round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def fake_quant(const double[:, ::1] x, const double[::1] lo, const double[::1] hi,
               const double[::1] scale, bint rounding=True, bint inclusive=False):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    region_arr = np.empty((n, m), dtype=np.int8)
    cdef double[:, ::1] out = out_arr
    cdef signed char[:, ::1] region = region_arr
    cdef double v, l, u, s, c
    with nogil:
        for i in range(n):
            l = lo[i]
            u = hi[i]
            s = scale[i]
            for j in range(m):
                v = x[i, j]
                if inclusive:
                    region[i, j] = 1 if v > u else (-1 if v < l else 0)
                else:
                    region[i, j] = 1 if v >= u else (-1 if v <= l else 0)
                c = u if v > u else (l if v < l else v)
                if rounding:
                    c = c / s
                    c = copysign(floor(fabs(c) + 0.5), c) * s
                out[i, j] = c
    return out_arr, region_arr
