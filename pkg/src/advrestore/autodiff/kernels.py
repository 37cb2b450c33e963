"""Convolution kernels with backend selection at import time.

The compiled Cython kernels are used when importable. Setting the environment
variable ``ADVRESTORE_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
if os.environ.get("ADVRESTORE_PURE_PYTHON", "") != "1":
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold ``x`` of shape (N, C, H, W) into (C*kh*kw, N*OH*OW) patch columns."""
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride=1, pad=0):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image of ``shape``."""
    return _impl.col2im(
        np.ascontiguousarray(cols, dtype=np.float64), tuple(int(s) for s in shape), kh, kw, stride, pad
    )
