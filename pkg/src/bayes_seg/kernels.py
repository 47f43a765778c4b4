"""Kernel backend selection.

The compiled extension is preferred; set ``BAYES_SEG_KERNELS=python`` to force
the NumPy fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("BAYES_SEG_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def im2col(x, kh, kw, stride, padding):
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, padding)


def col2im(cols, x_shape, kh, kw, stride, padding):
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), tuple(int(s) for s in x_shape),
                        kh, kw, stride, padding)


def upsample2x(x):
    return _impl.upsample2x(np.ascontiguousarray(x, dtype=np.float64))


def upsample2x_backward(g):
    return _impl.upsample2x_backward(np.ascontiguousarray(g, dtype=np.float64))
