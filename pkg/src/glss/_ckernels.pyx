# cython: language_level=3
"""Compiled float64 kernels; API mirrors ``glss._pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def sobel_xy(const double[:, ::1] img):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t i, j, im, ip, jm, jp
    gx_arr = np.empty((h, w), dtype=np.float64)
    gy_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, ::1] gy = gy_arr
    with nogil:
        for i in range(h):
            im = i - 1 if i > 0 else 0
            ip = i + 1 if i < h - 1 else h - 1
            for j in range(w):
                jm = j - 1 if j > 0 else 0
                jp = j + 1 if j < w - 1 else w - 1
                gx[i, j] = ((img[im, jp] + 2.0 * img[i, jp] + img[ip, jp])
                            - (img[im, jm] + 2.0 * img[i, jm] + img[ip, jm]))
                gy[i, j] = ((img[ip, jm] + 2.0 * img[ip, j] + img[ip, jp])
                            - (img[im, jm] + 2.0 * img[im, j] + img[im, jp]))
    return gx_arr, gy_arr


def filter_valid(const double[:, ::1] img, const double[::1] win):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], k = win.shape[0]
    cdef Py_ssize_t oh = h - k + 1, ow = w - k + 1
    cdef Py_ssize_t i, j, t
    cdef double acc
    tmp_arr = np.empty((h, ow), dtype=np.float64)
    out_arr = np.empty((oh, ow), dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_arr
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(h):
            for j in range(ow):
                acc = 0.0
                for t in range(k):
                    acc = acc + win[t] * img[i, j + t]
                tmp[i, j] = acc
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for t in range(k):
                    acc = acc + win[t] * tmp[i + t, j]
                out[i, j] = acc
    return out_arr


def ssim_moments(const double[:, ::1] x, const double[:, ::1] y, const double[::1] win):
    """Windowed means, variances and covariance over the valid region."""
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], k = win.shape[0]
    cdef Py_ssize_t oh = h - k + 1, ow = w - k + 1
    cdef Py_ssize_t i, j, t
    cdef double a, b, wt, s0, s1, s2, s3, s4
    tmp_arr = np.empty((5, h, ow), dtype=np.float64)
    out_arr = np.empty((5, oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] tmp = tmp_arr
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for i in range(h):
            for j in range(ow):
                s0 = 0.0; s1 = 0.0; s2 = 0.0; s3 = 0.0; s4 = 0.0
                for t in range(k):
                    wt = win[t]
                    a = x[i, j + t]
                    b = y[i, j + t]
                    s0 = s0 + wt * a
                    s1 = s1 + wt * b
                    s2 = s2 + wt * a * a
                    s3 = s3 + wt * b * b
                    s4 = s4 + wt * a * b
                tmp[0, i, j] = s0; tmp[1, i, j] = s1; tmp[2, i, j] = s2
                tmp[3, i, j] = s3; tmp[4, i, j] = s4
        for i in range(oh):
            for j in range(ow):
                s0 = 0.0; s1 = 0.0; s2 = 0.0; s3 = 0.0; s4 = 0.0
                for t in range(k):
                    wt = win[t]
                    s0 = s0 + wt * tmp[0, i + t, j]
                    s1 = s1 + wt * tmp[1, i + t, j]
                    s2 = s2 + wt * tmp[2, i + t, j]
                    s3 = s3 + wt * tmp[3, i + t, j]
                    s4 = s4 + wt * tmp[4, i + t, j]
                out[0, i, j] = s0
                out[1, i, j] = s1
                out[2, i, j] = s2 - s0 * s0
                out[3, i, j] = s3 - s1 * s1
                out[4, i, j] = s4 - s0 * s1
    return out_arr


def prefix_min_sqdist(const double[:, ::1] points, const double[::1] query):
    """Running minimum of squared euclidean distance over the first n points."""
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1]
    cdef Py_ssize_t i, t
    cdef double best = INFINITY, acc, diff
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            acc = 0.0
            for t in range(d):
                diff = points[i, t] - query[t]
                acc = acc + diff * diff
            if acc < best:
                best = acc
            out[i] = best
    return out_arr
