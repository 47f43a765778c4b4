"""Pure-NumPy versions of the convolution and upsampling kernels.

Used when the compiled ``_ckernels`` module is unavailable, or when
``BAYES_SEG_KERNELS=python`` is set.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, c, ho, wo, kh, kw) -> (n, c, kh, kw, ho, wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, x_shape, kh, kw, stride, padding):
    n, c, h, w = x_shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def upsample2x(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2x_backward(g):
    n, c, h2, w2 = g.shape
    g = g.reshape(n, c, h2 // 2, 2, w2 // 2, 2)
    return (g[:, :, :, 0, :, 0] + g[:, :, :, 0, :, 1]) + (g[:, :, :, 1, :, 0] + g[:, :, :, 1, :, 1])
