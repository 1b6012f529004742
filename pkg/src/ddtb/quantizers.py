"""Fake-quantization operators and their trainable parameter records.

Three families:

* symmetric: one clipping bound ``alpha``, grid step ``2*alpha/(2**(b-1)-1)``
  (the single-bound baseline used by PAMS-style training);
* asymmetric with trainable bounds ``alpha_l < alpha_u``, step
  ``(alpha_u-alpha_l)/(2**b-1)`` and zero point ``round(-alpha_l/s)``,
  optionally rescaled per sample by gate coefficients;
* weight quantization with the same asymmetric grid but fixed percentile
  bounds.

Rounding uses straight-through gradients.  Elements clipped at a bound send
their gradient to that bound instead of the input; an element exactly on a
trainable bound counts as clipped.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ParameterError, StateError
from .tensor import Tensor, _make, as_tensor, parameter, rounding_enabled

log = logging.getLogger(__name__)

BOUND_EPS = 1e-4


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def _rows(x: np.ndarray) -> np.ndarray:
    n = x.shape[0] if x.ndim > 1 else 1
    return x.reshape(n, -1)


def symmetric_scale(alpha: float, bits: int) -> float:
    return 2.0 * alpha / (2 ** (bits - 1) - 1)


def asymmetric_scale(alpha_l: float, alpha_u: float, bits: int) -> float:
    return (alpha_u - alpha_l) / (2 ** bits - 1)


def zero_point(alpha_l: float, alpha_u: float, bits: int) -> float:
    return float(kernels.round_half_away(-alpha_l / asymmetric_scale(alpha_l, alpha_u, bits)))


def _clamp_codes(out: np.ndarray, lo: np.ndarray, scale: np.ndarray, bits: int) -> np.ndarray:
    """Keep dequantized rows on the 2^b-level grid [-Z*s, (2^b-1-Z)*s].

    Clip-then-round can reach 2^b + 1 codes when both bounds sit on a half
    step of opposite sign; the integer range is what hardware stores.
    """
    z = kernels.round_half_away(-lo / scale)[:, None]
    s = scale[:, None]
    return np.clip(out, -z * s, (2 ** bits - 1 - z) * s)


# ---------------------------------------------------------------------------
# autograd ops


def symmetric_fake_quant(x: Tensor, alpha: Tensor, bits: int) -> Tensor:
    """round(clip(x, -alpha, alpha) / s) * s with a trainable ``alpha``."""
    a = alpha.item()
    if a <= 0:
        raise ParameterError(f"symmetric quantizer needs alpha > 0, got {a}")
    if bits < 2:
        raise ParameterError(f"symmetric quantizer needs bits >= 2, got {bits}")
    rows = _rows(x.data)
    n = rows.shape[0]
    out, region = kernels.fake_quant(rows, np.full(n, -a), np.full(n, a), np.full(n, symmetric_scale(a, bits)),
                                     rounding_enabled())

    def bw(g):
        g = g.reshape(region.shape)
        return (np.where(region == 0, g, 0.0).reshape(x.shape), np.asarray((g * region).sum()).reshape(alpha.shape))

    return _make(out.reshape(x.shape), (x, alpha), bw, "symmetric_fake_quant")


def asymmetric_fake_quant(x: Tensor, alpha_l: Tensor, alpha_u: Tensor, bits: int,
                          beta_l: Tensor | None = None, beta_u: Tensor | None = None) -> Tensor:
    """Dequantized DDTB activation quantizer.

    With gate coefficients the per-sample bounds are ``beta_l[n]*alpha_l`` and
    ``beta_u[n]*alpha_u``; the first axis of ``x`` is the sample axis.
    """
    rows = _rows(x.data)
    n = rows.shape[0]
    al, au = alpha_l.item(), alpha_u.item()
    bl = beta_l.data.reshape(n) if beta_l is not None else np.ones(n)
    bu = beta_u.data.reshape(n) if beta_u is not None else np.ones(n)
    lo = bl * al
    hi = np.maximum(bu * au, lo + BOUND_EPS)
    scale = (hi - lo) / (2 ** bits - 1)
    out, region = kernels.fake_quant(rows, lo, hi, scale, rounding_enabled())
    if rounding_enabled():
        out = _clamp_codes(out, lo, scale, bits)

    def bw(g):
        g = g.reshape(region.shape)
        gx = np.where(region == 0, g, 0.0).reshape(x.shape)
        gu = np.where(region == 1, g, 0.0).sum(axis=1)
        gl = np.where(region == -1, g, 0.0).sum(axis=1)
        grads = [gx, np.asarray((gl * bl).sum()).reshape(alpha_l.shape),
                 np.asarray((gu * bu).sum()).reshape(alpha_u.shape)]
        if beta_l is not None:
            grads.append((al * gl).reshape(beta_l.shape))
        if beta_u is not None:
            grads.append((au * gu).reshape(beta_u.shape))
        return tuple(grads)

    parents = [x, alpha_l, alpha_u]
    if beta_l is not None:
        parents.append(beta_l)
    if beta_u is not None:
        parents.append(beta_u)
    return _make(out.reshape(x.shape), parents, bw, "asymmetric_fake_quant")


def fixed_range_fake_quant(x: Tensor, lo: float, hi: float, bits: int, symmetric: bool = False) -> Tensor:
    """Fake-quantize with constant bounds; gradient passes inside [lo, hi] inclusive."""
    rows = _rows(x.data)
    n = rows.shape[0]
    step = symmetric_scale(hi, bits) if symmetric else asymmetric_scale(lo, hi, bits)
    out, region = kernels.fake_quant(rows, np.full(n, lo), np.full(n, hi), np.full(n, step),
                                     rounding_enabled(), inclusive=True)
    if rounding_enabled() and not symmetric:
        out = _clamp_codes(out, np.full(n, lo), np.full(n, step), bits)
    return _make(out.reshape(x.shape), (x,),
                 lambda g: (np.where(region.reshape(x.shape) == 0, g, 0.0),), "fixed_range_fake_quant")


# ---------------------------------------------------------------------------
# functional forms


def symmetric_quantize(x, alpha, b: int) -> Tensor:
    """Dequantized symmetric quantization of ``x`` with clipping bound ``alpha``."""
    return symmetric_fake_quant(as_tensor(x), as_tensor(alpha), b)


def ddtb_quantize(x, alpha_l, alpha_u, b: int) -> tuple[Tensor, Tensor]:
    """Return ``(q, dequant)``: integer codes and the dequantized tensor."""
    al, au = _value(alpha_l), _value(alpha_u)
    if not al < au:
        raise ParameterError(f"need alpha_l < alpha_u, got {al} >= {au}")
    x = as_tensor(x)
    dq = asymmetric_fake_quant(x, as_tensor(alpha_l), as_tensor(alpha_u), b)
    s = asymmetric_scale(al, au, b)
    clipped = np.clip(x.data, al, au)
    q = kernels.round_half_away(clipped / s) + kernels.round_half_away(-al / s)
    return Tensor(np.clip(q, 0, 2 ** b - 1)), dq


def bound_gradients(a, alpha_l_eff: float, alpha_u_eff: float, upstream=None) -> tuple[float, float]:
    """Scalar gradients of sum(upstream * dequant(a)) w.r.t. the two bounds.

    Straight-through rule: an element contributes to the upper bound where
    ``a >= alpha_u_eff`` and to the lower bound where ``a <= alpha_l_eff``.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    g = np.ones_like(a) if upstream is None else np.asarray(upstream, dtype=np.float64)
    upper = a >= alpha_u_eff
    lower = (a <= alpha_l_eff) & ~upper
    return float(g[upper].sum()), float(g[lower].sum())


# ---------------------------------------------------------------------------
# parameter records


@dataclass
class SymmetricQuantizer:
    """Single trainable clipping bound; the baseline quantizer."""

    alpha: Tensor
    bits: int

    @classmethod
    def create(cls, alpha: float, bits: int) -> "SymmetricQuantizer":
        return cls(parameter([float(alpha)], name="alpha"), bits)

    @property
    def scale(self) -> float:
        return symmetric_scale(self.alpha.item(), self.bits)

    def __call__(self, x: Tensor, beta_l=None, beta_u=None) -> Tensor:
        return symmetric_fake_quant(x, self.alpha, self.bits)

    def parameters(self):
        return [self.alpha]

    def enforce_constraints(self):
        if self.alpha.data[0] < BOUND_EPS:
            self.alpha.data[0] = BOUND_EPS

    def levels(self) -> np.ndarray:
        """Integer codes the quantizer can emit."""
        top = kernels.round_half_away(np.array(self.alpha.item() / self.scale))
        return np.arange(-top, top + 1)

    def codes(self, x: np.ndarray) -> np.ndarray:
        a = self.alpha.item()
        return kernels.round_half_away(np.clip(x, -a, a) / self.scale)

    def state(self) -> dict:
        return {"kind": "symmetric", "alpha": self.alpha.item(), "bits": self.bits}


@dataclass
class ActQuantizer:
    """Trainable lower/upper clipping bounds for one activation site."""

    alpha_l: Tensor
    alpha_u: Tensor
    bits: int
    gated: bool = False

    @classmethod
    def create(cls, alpha_l: float, alpha_u: float, bits: int) -> "ActQuantizer":
        if not alpha_l < alpha_u:
            raise ParameterError(f"need alpha_l < alpha_u, got {alpha_l} >= {alpha_u}")
        return cls(parameter([float(alpha_l)], name="alpha_l"), parameter([float(alpha_u)], name="alpha_u"), bits)

    @property
    def scale(self) -> float:
        return asymmetric_scale(self.alpha_l.item(), self.alpha_u.item(), self.bits)

    @property
    def zero_point(self) -> float:
        return zero_point(self.alpha_l.item(), self.alpha_u.item(), self.bits)

    def __call__(self, x: Tensor, beta_l: Tensor | None = None, beta_u: Tensor | None = None) -> Tensor:
        return asymmetric_fake_quant(x, self.alpha_l, self.alpha_u, self.bits, beta_l, beta_u)

    def parameters(self):
        return [self.alpha_l, self.alpha_u]

    def enforce_constraints(self):
        """Keep ``alpha_u - alpha_l >= BOUND_EPS`` after an optimizer step."""
        if self.alpha_u.data[0] - self.alpha_l.data[0] < BOUND_EPS:
            self.alpha_u.data[0] = self.alpha_l.data[0] + BOUND_EPS

    def levels(self) -> np.ndarray:
        return np.arange(2 ** self.bits)

    def codes(self, x: np.ndarray) -> np.ndarray:
        al, au = self.alpha_l.item(), self.alpha_u.item()
        s = self.scale
        q = kernels.round_half_away(np.clip(x, al, au) / s) + kernels.round_half_away(-al / s)
        return np.clip(q, 0, 2 ** self.bits - 1)

    def state(self) -> dict:
        return {"kind": "ddtb", "alpha_l": self.alpha_l.item(), "alpha_u": self.alpha_u.item(),
                "bits": self.bits, "gated": self.gated}


@dataclass
class WeightQuantizer:
    """Asymmetric weight quantizer with bounds fixed from weight percentiles.

    ``track=True`` recomputes the bounds from the current weights on every
    call (used by the gate, whose bounds are the weight min/max).
    ``symmetric=True`` switches to the single-bound grid with
    ``alpha = max|w|``.
    """

    bits: int
    lower_pct: float = 1.0
    upper_pct: float = 99.0
    track: bool = False
    symmetric: bool = False
    w_l: float | None = None
    w_u: float | None = None
    _warned: bool = field(default=False, repr=False)

    def calibrate(self, w) -> "WeightQuantizer":
        w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64).reshape(-1)
        if self.symmetric:
            a = float(np.abs(w).max())
            self.w_l, self.w_u = -a, a
        else:
            self.w_l = float(np.percentile(w, self.lower_pct))
            self.w_u = float(np.percentile(w, self.upper_pct))
        return self

    @property
    def calibrated(self) -> bool:
        return self.w_l is not None and self.w_u is not None

    @property
    def degenerate(self) -> bool:
        return self.calibrated and not self.w_u > self.w_l

    def __call__(self, w: Tensor) -> Tensor:
        if self.track:
            self.calibrate(w)
        if not self.calibrated:
            raise StateError("weight quantizer used before calibration")
        if self.degenerate:
            if not self._warned:
                log.warning("constant weight tensor (bounds %g == %g); leaving it unquantized", self.w_l, self.w_u)
                self._warned = True
            return w
        return fixed_range_fake_quant(w, self.w_l, self.w_u, self.bits, symmetric=self.symmetric)

    def state(self) -> dict:
        return {"bits": self.bits, "lower_pct": self.lower_pct, "upper_pct": self.upper_pct, "track": self.track,
                "symmetric": self.symmetric, "w_l": self.w_l, "w_u": self.w_u}

    @classmethod
    def from_state(cls, d: dict) -> "WeightQuantizer":
        return cls(**d)


def quantize_weights(w, q: WeightQuantizer) -> Tensor:
    return q(as_tensor(w))


def act_quantizer_from_state(d: dict):
    if d["kind"] == "symmetric":
        return SymmetricQuantizer.create(d["alpha"], d["bits"])
    q = ActQuantizer.create(d["alpha_l"], d["alpha_u"], d["bits"])
    q.gated = bool(d.get("gated", False))
    return q
