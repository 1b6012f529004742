"""Reference numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or DDTB_PURE_PYTHON=1.
Signatures and outputs match ``_ckernels`` bit for bit.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo), rows ordered channel, ky, kx."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols, dtype=np.float64)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += cols[:, :, ky, kx]
    return out[:, :, pad : pad + h, pad : pad + w].copy()


def round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def fake_quant(x, lo, hi, scale, rounding=True, inclusive=False):
    """Clip each row of ``x`` to [lo[i], hi[i]] and snap it to a grid of step scale[i].

    Returns the dequantized values and an int8 region code per element:
    +1 routed to the upper bound, -1 to the lower bound, 0 passed through.
    With ``inclusive`` an element equal to a bound counts as passed through.
    """
    lo = lo[:, None]
    hi = hi[:, None]
    if inclusive:
        upper = x > hi
        lower = x < lo
    else:
        upper = x >= hi
        lower = x <= lo
    c = np.minimum(np.maximum(x, lo), hi)
    if rounding:
        s = scale[:, None]
        out = round_half_away(c / s) * s
    else:
        out = c
    region = upper.astype(np.int8) - lower.astype(np.int8)
    return out, region
