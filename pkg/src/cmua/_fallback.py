"""Pure numpy implementations of the convolution kernels.

Same signatures and accumulation order as the compiled module; forward
outputs are bit-identical to it.
"""

import numpy as np


def conv2d_forward(x, w, bias, num_threads=1):
    n, h, wd, c = x.shape
    k = w.shape[0]
    if w.shape[1] != k or w.shape[2] != c:
        raise ValueError("weight shape does not match input channels")
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    co = w.shape[3]
    p = k // 2
    xp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=np.float64)
    xp[:, p:p + h, p:p + wd, :] = x
    w64 = w.astype(np.float64)
    acc = np.zeros((n, h, wd, co), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            window = xp[:, ky:ky + h, kx:kx + wd, :]
            for ci in range(c):
                acc += window[..., ci, None] * w64[ky, kx, ci]
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape[0] != co:
            raise ValueError("bias length does not match output channels")
        acc += b
    return acc.astype(x.dtype)


def conv2d_weight_grad(x, dy, K):
    n, h, wd, c = x.shape
    p = K // 2
    xp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=np.float64)
    xp[:, p:p + h, p:p + wd, :] = x
    dy64 = dy.astype(np.float64)
    out = np.empty((K, K, c, dy.shape[3]), dtype=np.float64)
    for ky in range(K):
        for kx in range(K):
            window = xp[:, ky:ky + h, kx:kx + wd, :]
            # optimize=False keeps einsum off BLAS, whose summation order varies with threads
            out[ky, kx] = np.einsum("nhwc,nhwo->co", window, dy64, optimize=False)
    return out.astype(x.dtype)
