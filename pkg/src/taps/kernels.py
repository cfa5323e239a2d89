"""Hot convolution kernels, selected once at import.

The compiled extension is preferred; set ``TAPS_PURE_PYTHON=1`` to force the
numpy fallback. ``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from taps import _pykernels

try:
    if os.environ.get("TAPS_PURE_PYTHON", "").strip() not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from taps import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(np.ascontiguousarray(x), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    return _impl.col2im(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad)
