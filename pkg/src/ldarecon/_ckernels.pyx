"""Compiled 3x3 convolution kernels (stride 1, zero padding 1).

Layout is (batch, height, width, channels) for images and
(3, 3, in_channels, out_channels) for kernels, all C-contiguous float64.
Each output pixel is accumulated in a private scratch buffer so the inner
channel loop does not alias the inputs and can be vectorized.
"""
import numpy as np

from libc.stdlib cimport calloc, free


def conv2d(const double[:, :, :, ::1] x, const double[:, :, :, ::1] k):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Ci = x.shape[3], Co = k.shape[3]
    out = np.empty((N, H, W, Co))
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t n, i, j, p, q, ii, jj, c, e
    cdef double xv
    cdef double* op
    cdef const double* xp
    cdef const double* kp
    cdef double* acc = <double*> calloc(Co, sizeof(double))
    if acc == NULL:
        raise MemoryError()
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    for e in range(Co):
                        acc[e] = 0.0
                    for p in range(3):
                        ii = i + p - 1
                        if ii < 0 or ii >= H:
                            continue
                        for q in range(3):
                            jj = j + q - 1
                            if jj < 0 or jj >= W:
                                continue
                            xp = &x[n, ii, jj, 0]
                            kp = &k[p, q, 0, 0]
                            for c in range(Ci):
                                xv = xp[c]
                                for e in range(Co):
                                    acc[e] += xv * kp[c * Co + e]
                    op = &o[n, i, j, 0]
                    for e in range(Co):
                        op[e] = acc[e]
    free(acc)
    return out


def conv2d_transpose(const double[:, :, :, ::1] g, const double[:, :, :, ::1] k):
    # the transpose is a correlation with the flipped, channel-swapped kernel
    flipped = np.ascontiguousarray(np.asarray(k)[::-1, ::-1].transpose(0, 1, 3, 2))
    return conv2d(g, flipped)


def conv2d_kernel_grad(const double[:, :, :, ::1] x, const double[:, :, :, ::1] g):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Ci = x.shape[3], Co = g.shape[3]
    out = np.empty((3, 3, Ci, Co))
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t n, i, j, p, q, ii, jj, c, e, t
    cdef Py_ssize_t size = 9 * Ci * Co
    cdef double xv
    cdef double* ap
    cdef const double* xp
    cdef const double* gp
    cdef double* acc = <double*> calloc(size, sizeof(double))
    if acc == NULL:
        raise MemoryError()
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    gp = &g[n, i, j, 0]
                    for p in range(3):
                        ii = i + p - 1
                        if ii < 0 or ii >= H:
                            continue
                        for q in range(3):
                            jj = j + q - 1
                            if jj < 0 or jj >= W:
                                continue
                            xp = &x[n, ii, jj, 0]
                            ap = &acc[(p * 3 + q) * Ci * Co]
                            for c in range(Ci):
                                xv = xp[c]
                                for e in range(Co):
                                    ap[c * Co + e] += xv * gp[e]
        ap = &o[0, 0, 0, 0]
        for t in range(size):
            ap[t] = acc[t]
    free(acc)
    return out
