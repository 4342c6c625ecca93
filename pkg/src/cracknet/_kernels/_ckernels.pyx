# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of ``_pykernels``.

Loop order follows the numpy versions so float64 results match exactly.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] xp, real[:, ::1] out, int kh, int kw,
            int stride, int ho, int wo):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[3]
    cdef Py_ssize_t n, y, x, i, j, ch, row, col
    with nogil:
        for n in range(b):
            for y in range(ho):
                for x in range(wo):
                    row = (n * ho + y) * wo + x
                    col = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                out[row, col] = xp[n, y * stride + i, x * stride + j, ch]
                                col = col + 1


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] out, int kh, int kw,
            int stride, int ho, int wo):
    cdef Py_ssize_t b = out.shape[0], c = out.shape[3]
    cdef Py_ssize_t n, y, x, i, j, ch, row, col
    # same (i, j) outer order as the numpy scatter so float sums associate identically
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for n in range(b):
                    for y in range(ho):
                        for x in range(wo):
                            row = (n * ho + y) * wo + x
                            col = (i * kw + j) * c
                            for ch in range(c):
                                out[n, y * stride + i, x * stride + j, ch] += cols[row, col + ch]


def im2col(xp, int kh, int kw, int stride, int ho, int wo):
    xp = np.ascontiguousarray(xp)
    b, _, _, c = xp.shape
    out = np.empty((b * ho * wo, kh * kw * c), dtype=xp.dtype)
    _im2col(xp, out, kh, kw, stride, ho, wo)
    return out


def col2im(cols, int b, int hp, int wp, int c, int kh, int kw, int stride, int ho, int wo):
    cols = np.ascontiguousarray(cols).reshape(b * ho * wo, kh * kw * c)
    out = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, ho, wo)
    return out


def lovasz_grad(gt_sorted):
    cdef double[::1] gt = np.ascontiguousarray(gt_sorted, dtype=np.float64)
    cdef Py_ssize_t n = gt.shape[0], k
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] g = out
    cdef double gts = 0.0, cum_pos = 0.0, cum_neg = 0.0, prev = 0.0, cur
    if n == 0:
        return out
    for k in range(n):
        gts += gt[k]
    for k in range(n):
        cum_pos += gt[k]
        cum_neg += 1.0 - gt[k]
        cur = 1.0 - (gts - cum_pos) / (gts + cum_neg)
        g[k] = cur - prev if k > 0 else cur
        prev = cur
    return out
