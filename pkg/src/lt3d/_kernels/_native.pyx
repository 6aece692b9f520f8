# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contracts as ``_numpy``."""
import numpy as np

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x, int kd, int kh, int kw, int sd, int sh, int sw):
    cdef Py_ssize_t dp = x.shape[0], hp = x.shape[1], wp = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t do = (dp - kd) // sd + 1, ho = (hp - kh) // sh + 1, wo = (wp - kw) // sw + 1
    cdef Py_ssize_t ncol = kd * kh * kw * c
    out_arr = np.empty((do * ho * wo, ncol), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, a, b, e, ch, row, col
    with nogil:
        row = 0
        for i in range(do):
            for j in range(ho):
                for k in range(wo):
                    col = 0
                    for a in range(kd):
                        for b in range(kh):
                            for e in range(kw):
                                for ch in range(c):
                                    out[row, col + ch] = x[i * sd + a, j * sh + b, k * sw + e, ch]
                                col += c
                    row += 1
    return out_arr


def col2im(const real[:, ::1] cols, Py_ssize_t dp, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t c,
           int kd, int kh, int kw, int sd, int sh, int sw):
    cdef Py_ssize_t do = (dp - kd) // sd + 1, ho = (hp - kh) // sh + 1, wo = (wp - kw) // sw + 1
    out_arr = np.zeros((dp, hp, wp, c), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, a, b, e, ch, row, col
    with nogil:
        row = 0
        for i in range(do):
            for j in range(ho):
                for k in range(wo):
                    col = 0
                    for a in range(kd):
                        for b in range(kh):
                            for e in range(kw):
                                for ch in range(c):
                                    out[i * sd + a, j * sh + b, k * sw + e, ch] += cols[row, col + ch]
                                col += c
                    row += 1
    return out_arr


def nearest_sq_dists(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], dim = a.shape[1]
    out_arr = np.empty(na, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, t
    cdef double best, d, diff
    with nogil:
        for i in range(na):
            best = 1e300
            for j in range(nb):
                d = 0.0
                for t in range(dim):
                    diff = a[i, t] - b[j, t]
                    d = d + diff * diff
                if d < best:
                    best = d
            out[i] = best
    return out_arr
