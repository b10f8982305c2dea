# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels.

Channel-last layout, stride 1, zero "same" padding, odd square kernels.
Every output element is accumulated in double precision in the fixed order
(ky, kx, ci), which is the order used by the numpy fallback, so both
backends produce bit-identical forward outputs and input gradients.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef fused real:
    float
    double


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, bias, int num_threads=1):
    """y[n, i, j, co] = bias[co] + sum_{ky, kx, ci} x[n, i+ky-p, j+kx-p, ci] * w[ky, kx, ci, co]"""
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t K = w.shape[0], CO = w.shape[3]
    cdef Py_ssize_t p = K // 2
    if w.shape[1] != K or w.shape[2] != C:
        raise ValueError("weight shape does not match input channels")
    if K % 2 == 0:
        raise ValueError("kernel size must be odd")

    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((N, H, W, CO), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    b_arr = np.zeros(CO, dtype=np.float64) if bias is None else np.asarray(bias, dtype=np.float64)
    if b_arr.shape[0] != CO:
        raise ValueError("bias length does not match output channels")
    cdef double[::1] b = b_arr

    cdef Py_ssize_t n, i, j, ky, kx, ci, co, iy, ix
    cdef double xv
    cdef double *acc

    with nogil, parallel(num_threads=num_threads):
        acc = <double *> malloc(CO * sizeof(double))
        for n in prange(N, schedule="static"):
            for i in range(H):
                for j in range(W):
                    for co in range(CO):
                        acc[co] = 0.0
                    for ky in range(K):
                        iy = i + ky - p
                        if iy < 0 or iy >= H:
                            continue
                        for kx in range(K):
                            ix = j + kx - p
                            if ix < 0 or ix >= W:
                                continue
                            for ci in range(C):
                                xv = x[n, iy, ix, ci]
                                for co in range(CO):
                                    acc[co] = acc[co] + xv * <double> w[ky, kx, ci, co]
                    for co in range(CO):
                        out[n, i, j, co] = <real> (acc[co] + b[co])
        free(acc)
    return out_arr


def conv2d_weight_grad(real[:, :, :, ::1] x, real[:, :, :, ::1] dy, int K):
    """dw[ky, kx, ci, co] = sum_{n, i, j} x[n, i+ky-p, j+kx-p, ci] * dy[n, i, j, co]

    Summation runs sequentially over (n, i, j) for each weight.
    """
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t CO = dy.shape[3]
    cdef Py_ssize_t p = K // 2
    acc_arr = np.zeros((K, K, C, CO), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t n, i, j, ky, kx, ci, co, iy, ix
    cdef double xv

    with nogil:
        for ky in range(K):
            for kx in range(K):
                for n in range(N):
                    for i in range(H):
                        iy = i + ky - p
                        if iy < 0 or iy >= H:
                            continue
                        for j in range(W):
                            ix = j + kx - p
                            if ix < 0 or ix >= W:
                                continue
                            for ci in range(C):
                                xv = x[n, iy, ix, ci]
                                for co in range(CO):
                                    acc[ky, kx, ci, co] += xv * <double> dy[n, i, j, co]
    dtype = np.float32 if real is float else np.float64
    return acc_arr.astype(dtype)
