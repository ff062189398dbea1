# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels (hot path of learner training).

Cross-correlation with same padding for odd square kernels. Forward and
input-gradient accumulation follows (ci, ky, kx) / (co, ky, kx) term
order so results match the NumPy fallback bit for bit; weight/bias
gradients use plain sequential reduction and match only to rounding.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "cython"


cdef inline double[:, :, :, ::1] _pad(double[:, :, :, ::1] x, Py_ssize_t p):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    if p == 0:
        return x
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    cdef double[:, :, :, ::1] o = out
    o[:, :, p:p + h, p:p + w] = x
    return o


def conv2d_forward(x, w, b):
    """Cross-correlate x (N,Ci,H,W) with w (Co,Ci,k,k), add bias b (Co,)."""
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w)
    cdef double[::1] bv = np.ascontiguousarray(b)
    cdef Py_ssize_t n = xv.shape[0], ci = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    if wv.shape[1] != ci or kh != kw or kh % 2 != 1:
        raise ValueError(f"bad kernel shape {tuple(w.shape)} for input {tuple(x.shape)}")
    cdef Py_ssize_t p = kh // 2
    cdef double[:, :, :, ::1] xp = _pad(xv, p)

    y = np.empty((n, co, h, wd))
    cdef double[:, :, :, ::1] yv = y
    cdef Py_ssize_t i, o, c, ky, kx, r, q
    cdef double wsc, bsc
    with nogil:
        for i in range(n):
            for o in range(co):
                bsc = bv[o]
                for r in range(h):
                    for q in range(wd):
                        yv[i, o, r, q] = bsc
                for c in range(ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            wsc = wv[o, c, ky, kx]
                            for r in range(h):
                                for q in range(wd):
                                    yv[i, o, r, q] = yv[i, o, r, q] + wsc * xp[i, c, r + ky, q + kx]
    return y


def conv2d_backward(x, w, gy, bint need_gx=True):
    """Gradients of conv2d_forward w.r.t. input, weights and bias."""
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w)
    cdef double[:, :, :, ::1] gyv = np.ascontiguousarray(gy)
    cdef Py_ssize_t n = xv.shape[0], ci = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t p = kh // 2
    cdef double[:, :, :, ::1] xp = _pad(xv, p)

    gb = np.zeros(co)
    gw = np.zeros_like(np.asarray(w))
    cdef double[::1] gbv = gb
    cdef double[:, :, :, ::1] gwv = gw
    cdef Py_ssize_t i, o, c, ky, kx, r, q
    cdef double acc, a1, a2, a3, wsc

    with nogil:
        for o in range(co):
            acc = 0.0
            for i in range(n):
                for r in range(h):
                    for q in range(wd):
                        acc = acc + gyv[i, o, r, q]
            gbv[o] = acc
        for o in range(co):
            for c in range(ci):
                for ky in range(kh):
                    for kx in range(kw):
                        # four independent accumulator chains so the
                        # reduction is not latency-bound
                        acc = 0.0
                        a1 = 0.0
                        a2 = 0.0
                        a3 = 0.0
                        for i in range(n):
                            for r in range(h):
                                q = 0
                                while q + 4 <= wd:
                                    acc = acc + gyv[i, o, r, q] * xp[i, c, r + ky, q + kx]
                                    a1 = a1 + gyv[i, o, r, q + 1] * xp[i, c, r + ky, q + kx + 1]
                                    a2 = a2 + gyv[i, o, r, q + 2] * xp[i, c, r + ky, q + kx + 2]
                                    a3 = a3 + gyv[i, o, r, q + 3] * xp[i, c, r + ky, q + kx + 3]
                                    q += 4
                                while q < wd:
                                    acc = acc + gyv[i, o, r, q] * xp[i, c, r + ky, q + kx]
                                    q += 1
                        gwv[o, c, ky, kx] = acc + a1 + a2 + a3

    if not need_gx:
        return None, gw, gb

    gxp_arr = np.zeros((n, ci, h + 2 * p, wd + 2 * p))
    cdef double[:, :, :, ::1] gxp = gxp_arr
    with nogil:
        for i in range(n):
            for o in range(co):
                for ky in range(kh):
                    for kx in range(kw):
                        for c in range(ci):
                            wsc = wv[o, c, ky, kx]
                            for r in range(h):
                                for q in range(wd):
                                    gxp[i, c, r + ky, q + kx] = gxp[i, c, r + ky, q + kx] + wsc * gyv[i, o, r, q]
    gx = gxp_arr[:, :, p:p + h, p:p + wd] if p else gxp_arr
    return np.ascontiguousarray(gx), gw, gb
