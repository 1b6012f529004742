"""Hot loops: conv patch expansion and fake quantization.

The compiled extension is used when it imports; otherwise the numpy
reference in ``_pykernels`` is selected.  Set ``DDTB_PURE_PYTHON=1`` to force
the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DDTB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass


def im2col(x, kh, kw, stride=1, pad=0):
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride=1, pad=0):
    n, c, h, w = shape
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), n, c, h, w, kh, kw, stride, pad)


def fake_quant(x, lo, hi, scale, rounding=True, inclusive=False):
    """Row-wise clip + grid snap; see ``_pykernels.fake_quant``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    hi = np.ascontiguousarray(hi, dtype=np.float64)
    scale = np.ascontiguousarray(scale, dtype=np.float64)
    return _impl.fake_quant(x, lo, hi, scale, bool(rounding), bool(inclusive))


round_half_away = _pykernels.round_half_away

__all__ = ["BACKEND", "im2col", "col2im", "fake_quant", "round_half_away"]
