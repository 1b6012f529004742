"""Image quality metrics, quantization-level occupancy and the cost model."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .gate import GATE_BITS, gate_hidden_channels
from .models import HIGH, LayerSpec, ModelDescriptor

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def rgb_to_y(img, studio: bool = False) -> np.ndarray:
    """Luma of an H x W x 3 image on a 0-255 scale (BT.601)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 image, got {img.shape}", axes=("channels",))
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    if studio:
        return 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    return 0.299 * r + 0.587 * g + 0.114 * b


def _prepare(sr, hr, scale, studio):
    sr, hr = np.asarray(sr), np.asarray(hr)
    if sr.shape != hr.shape:
        raise ShapeError(f"image sizes differ: {sr.shape} vs {hr.shape}", axes=("H", "W"))
    ys, yh = rgb_to_y(sr, studio), rgb_to_y(hr, studio)
    if scale > 0:
        ys, yh = ys[scale:-scale, scale:-scale], yh[scale:-scale, scale:-scale]
    if ys.size == 0:
        raise ShapeError(f"nothing left after cropping {scale} px from {sr.shape}", axes=("H", "W"))
    return ys, yh


def psnr_y(sr, hr, scale: int, studio: bool = False) -> float:
    """PSNR on the Y channel after cropping ``scale`` border pixels; capped at 100 dB."""
    ys, yh = _prepare(sr, hr, scale, studio)
    mse = float(np.mean((ys - yh) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    k = g.size
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def ssim_y(sr, hr, scale: int, studio: bool = False, K1: float = 0.01, K2: float = 0.03, L: float = 255.0) -> float:
    """Single-scale SSIM on Y, Gaussian 11x11 window (sigma 1.5), valid positions only."""
    x, y = _prepare(sr, hr, scale, studio)
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {x.shape} smaller than the {SSIM_WINDOW}px SSIM window", axes=("H", "W"))
    g = gaussian_window()
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def wasted_levels(activations, quantizer) -> float:
    """Fraction of the 2**b integer codes never produced when quantizing ``activations``."""
    x = np.asarray(activations, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ShapeError("wasted_levels needs a nonempty sample", axes=("N",))
    total = 2 ** quantizer.bits
    used = np.unique(quantizer.codes(x)).size
    return max(0, total - used) / total


# ---------------------------------------------------------------------------
# complexity


@dataclass
class LayerCost:
    name: str
    tag: str
    params: int
    effective_params: float
    macs: int
    bops: float
    w_bits: int
    a_bits: int
    gate: bool = False


@dataclass
class ComplexityReport:
    model: str
    bits: int
    output_size: tuple[int, int]
    scale: int
    total_params: float
    raw_params: int
    high_level_params: float
    gate_params: float
    gate_param_ratio: float
    total_bops: float
    gate_bops: float
    gate_bops_ratio: float
    layers: list[LayerCost] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self) -> str:
        lines = [
            f"model            {self.model} x{self.scale}  {self.bits}-bit  output {self.output_size[0]}x{self.output_size[1]}",
            f"params           {self.total_params / 1e6:.4f}M  (high-level {self.high_level_params / 1e6:.4f}M)",
            f"gate params      {self.gate_params:.0f}  ({100 * self.gate_param_ratio:.3f}%)",
            f"BOPs             {self.total_bops / 1e12:.2f}T",
            f"gate BOPs        {self.gate_bops / 1e12:.6f}T  ({100 * self.gate_bops_ratio:.7f}%)",
            "",
            f"{'layer':<24}{'tag':<16}{'params':>10}{'eff.params':>12}{'bits':>7}{'BOPs':>14}",
        ]
        for c in self.layers:
            lines.append(f"{c.name:<24}{c.tag:<16}{c.params:>10d}{c.effective_params:>12.1f}"
                         f"{f'{c.w_bits}/{c.a_bits}':>7}{c.bops:>14.4g}")
        return "\n".join(lines)


def _conv_cost(spec: LayerSpec, h: int, w: int):
    ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
    wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
    macs = spec.kernel * spec.kernel * spec.in_ch * spec.out_ch * ho * wo
    return macs, ho, wo


def _gate_costs(spec: LayerSpec, h: int, w: int) -> list[LayerCost]:
    hid = gate_hidden_channels(spec.in_ch)
    ho, wo = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    b = GATE_BITS
    p1 = 9 * spec.in_ch * hid + hid
    p2 = 2 * hid + 2
    m1 = 9 * spec.in_ch * hid * ho * wo
    m2 = 2 * hid
    return [LayerCost(f"{spec.name}.gate.conv1", HIGH, p1, p1 * b / 32, m1, 2.0 * m1 * b * b, b, b, True),
            LayerCost(f"{spec.name}.gate.conv2", HIGH, p2, p2 * b / 32, m2, 2.0 * m2 * b * b, b, b, True)]


def parse_size(text: str) -> tuple[int, int]:
    """'1920x1080' -> (1920, 1080) as width, height."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ShapeError(f"bad size {text!r}; expected WIDTHxHEIGHT", axes=("size",)) from exc
    return w, h


def complexity(model: ModelDescriptor, output_size: tuple[int, int] = (1920, 1080), scale: int | None = None) -> ComplexityReport:
    """Parameters and bit-operations of ``model`` producing an image of ``output_size`` (W, H).

    Each multiply-accumulate counts as two operations; BOPs = ops * b_w * b_a
    with 32 bits for full-precision layers.  Effective parameters weight every
    parameter by ``b_w / 32``.  Mean shifts, additions and pixel shuffles are
    free.  Gates are costed in their folded 2-bit inference form.
    """
    scale = scale or model.scale
    width, height = output_size
    if width % scale or height % scale:
        raise ShapeError(f"output {width}x{height} not divisible by scale {scale}", axes=("H", "W"))
    h, w = height // scale, width // scale
    costs: list[LayerCost] = []

    def visit(spec: LayerSpec, h, w):
        if spec.kind == "conv":
            macs, ho, wo = _conv_cost(spec, h, w)
            p = spec.param_count()
            costs.append(LayerCost(spec.name, spec.tag, p, p * spec.w_bits / 32, macs,
                                   2.0 * macs * spec.w_bits * spec.a_bits, spec.w_bits, spec.a_bits))
            if spec.gated and spec.quantized:
                costs.extend(_gate_costs(spec, h, w))
            return ho, wo
        if spec.kind == "pixel-shuffle":
            return h * spec.r, w * spec.r
        for c in spec.children:
            visit(c, h, w)
        return h, w

    for spec in model.layers:
        h, w = visit(spec, h, w)
    if (w, h) != (width, height):
        raise ShapeError(f"descriptor yields {w}x{h}, expected {width}x{height}", axes=("H", "W"))

    total_params = sum(c.effective_params for c in costs)
    gate_params = sum(c.effective_params for c in costs if c.gate)
    high = sum(c.effective_params for c in costs if c.tag == HIGH)
    total_bops = sum(c.bops for c in costs)
    gate_bops = sum(c.bops for c in costs if c.gate)
    return ComplexityReport(
        model=model.preset, bits=model.bits, output_size=(width, height), scale=scale,
        total_params=total_params, raw_params=sum(c.params for c in costs if not c.gate),
        high_level_params=high, gate_params=gate_params,
        gate_param_ratio=gate_params / total_params if total_params else 0.0,
        total_bops=total_bops, gate_bops=gate_bops,
        gate_bops_ratio=gate_bops / total_bops if total_bops else 0.0, layers=costs,
    )
