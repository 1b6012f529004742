"""Bound initialization from full-precision activation statistics.

One forward pass of the full-precision network over a calibration batch
records, at every quantized activation site, the per-sample max/min and a
pooled sample of values.  Bounds start at the M-th / (100-M)-th percentiles
of the pooled sample.  The dynamic intensity of a site is the variance of its
per-sample maxima plus the variance of its per-sample minima; gates go to
the top-P% sites by that score.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-3


@dataclass
class CalibConfig:
    M: float = 99.0
    P: float = 30.0
    K: int = 5
    batches: int = 1
    max_pooled: int | None = 1_000_000

    def __post_init__(self):
        if not 50 < self.M <= 100:
            raise ParameterError(f"M must be in (50, 100], got {self.M}")
        if not 0 <= self.P <= 100:
            raise ParameterError(f"P must be in [0, 100], got {self.P}")
        if self.K < 0:
            raise ParameterError(f"K must be >= 0, got {self.K}")


@dataclass
class LayerStats:
    layer: str
    sample_max: np.ndarray
    sample_min: np.ndarray
    pooled: np.ndarray = field(repr=False)

    @property
    def v_max(self) -> float:
        return float(np.var(self.sample_max))

    @property
    def v_min(self) -> float:
        return float(np.var(self.sample_min))

    @property
    def di(self) -> float:
        return self.v_max + self.v_min

    @classmethod
    def from_activations(cls, layer: str, acts: np.ndarray, max_pooled: int | None = None,
                         rng: np.random.Generator | None = None) -> "LayerStats":
        acts = np.asarray(acts, dtype=np.float64)
        if acts.shape[0] == 0:
            raise ParameterError("empty calibration batch")
        flat = acts.reshape(acts.shape[0], -1)
        pooled = flat.reshape(-1)
        if max_pooled is not None and pooled.size > max_pooled:
            rng = rng or np.random.default_rng(0)
            pooled = rng.choice(pooled, size=max_pooled, replace=False)
        return cls(layer, flat.max(axis=1), flat.min(axis=1), pooled.copy())

    def merge(self, other: "LayerStats") -> "LayerStats":
        return LayerStats(self.layer, np.concatenate([self.sample_max, other.sample_max]),
                          np.concatenate([self.sample_min, other.sample_min]),
                          np.concatenate([self.pooled, other.pooled]))


def percentile(sample, p: float) -> float:
    """Linear interpolation between closest ranks (rank = p/100 * (n-1))."""
    return float(np.percentile(np.asarray(sample, dtype=np.float64), p, method="linear"))


def init_bounds(stats: LayerStats, M: float) -> tuple[float, float]:
    if stats.pooled.size == 0:
        raise ParameterError(f"{stats.layer}: empty activation sample")
    lo, hi = percentile(stats.pooled, 100 - M), percentile(stats.pooled, M)
    if not hi > lo:
        log.warning("%s: degenerate activation sample at %g; widening bounds by +-%g", stats.layer, lo, DEGENERATE_EPS)
        lo, hi = lo - DEGENERATE_EPS, hi + DEGENERATE_EPS
    return lo, hi


def select_gated_layers(stats, P: float) -> list:
    """Layers with the ceil(P% * L) largest dynamic intensities, in depth order.

    ``stats`` is an ordered mapping layer -> LayerStats (or -> DI value);
    ties go to the shallower layer.
    """
    if not 0 <= P <= 100:
        raise ParameterError(f"P must be in [0, 100], got {P}")
    names = list(stats)
    di = [v if isinstance(v, (int, float, np.floating)) else v.di for v in stats.values()]
    k = math.ceil(P * len(names) / 100 - 1e-9)
    ranked = sorted(range(len(names)), key=lambda i: (-di[i], i))[:k]
    return [names[i] for i in sorted(ranked)]


def collect_statistics(model, images, cfg: CalibConfig | None = None) -> dict[str, LayerStats]:
    """Run ``model`` once in full precision and gather per-site statistics.

    ``images`` is an NCHW array (or list of such batches) of LR inputs.
    """
    cfg = cfg or CalibConfig()
    batches = images if isinstance(images, (list, tuple)) else [images]
    if not batches or any(np.asarray(b).shape[0] == 0 for b in batches):
        raise ParameterError("empty calibration batch")
    rng = np.random.default_rng(0)
    out: dict[str, LayerStats] = {}
    for batch in batches:
        acts = model.site_activations(np.asarray(batch, dtype=np.float64))
        for name, a in acts.items():
            s = LayerStats.from_activations(name, a, cfg.max_pooled, rng)
            out[name] = out[name].merge(s) if name in out else s
    return out


def stats_report(stats: dict[str, LayerStats]) -> str:
    """Line-oriented report: layer, min, max, V_max, V_min, DI."""
    lines = ["# layer min max v_max v_min di"]
    for name, s in stats.items():
        lines.append(f"{name} {s.sample_min.min():.6g} {s.sample_max.max():.6g} "
                     f"{s.v_max:.6g} {s.v_min:.6g} {s.di:.6g}")
    return "\n".join(lines) + "\n"


def parse_stats_report(text: str) -> dict[str, float]:
    """Read back the DI column of :func:`stats_report` output."""
    di = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        di[parts[0]] = float(parts[5])
    return di


METHODS = ("ddtb", "pams")


def initialize_quantizers(model, stats: dict[str, LayerStats], method: str = "ddtb", M: float | None = None,
                          P: float | None = None, rng: np.random.Generator | None = None) -> list[str]:
    """Attach quantizers (and gates) to every quantized site of ``model``.

    ``ddtb``: trainable (alpha_l, alpha_u) at the (100-M)/M percentiles,
    1/99-percentile weight bounds, 2-bit-capable gates on the top-P% DI sites.
    ``pams``: one symmetric trainable bound alpha = max(|lo|, |hi|) and
    symmetric weights with alpha = max|w|; no gates.

    Returns the names of the gated sites.
    """
    from .gate import GateController
    from .models import place_gates
    from .quantizers import ActQuantizer, SymmetricQuantizer, WeightQuantizer

    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; choose from {METHODS}")
    desc = model.desc
    M = desc.M if M is None else M
    P = desc.P if P is None else P
    rng = rng if rng is not None else np.random.default_rng(0)
    sites = [s for s in desc.sites() if s.quantized]
    missing = [s.name for s in sites if s.name not in stats]
    if missing:
        raise ParameterError(f"no statistics for sites {missing}")

    model.method = method
    model.act_quant.clear()
    model.weight_quant.clear()
    model.gates.clear()
    for s in sites:
        lo, hi = init_bounds(stats[s.name], M)
        w = model.params[f"{s.name}.w"]
        if method == "ddtb":
            model.act_quant[s.name] = ActQuantizer.create(lo, hi, s.a_bits)
            model.weight_quant[s.name] = WeightQuantizer(s.w_bits).calibrate(w)
        else:
            model.act_quant[s.name] = SymmetricQuantizer.create(max(abs(lo), abs(hi)), s.a_bits)
            model.weight_quant[s.name] = WeightQuantizer(s.w_bits, symmetric=True).calibrate(w)

    gated = select_gated_layers({s.name: stats[s.name] for s in sites}, P) if method == "ddtb" else []
    place_gates(desc, gated)
    for s in sites:
        if s.name in gated:
            model.gates[s.name] = GateController.create(s.in_ch, rng)
            model.act_quant[s.name].gated = True
    return gated


def calibrate_model(model, images, cfg: CalibConfig | None = None, method: str = "ddtb",
                    rng: np.random.Generator | None = None) -> dict[str, LayerStats]:
    """One full-precision pass over ``images``, then :func:`initialize_quantizers`."""
    cfg = cfg or CalibConfig(M=model.desc.M, P=model.desc.P)
    stats = collect_statistics(model, images, cfg)
    initialize_quantizers(model, stats, method, cfg.M, cfg.P, rng)
    return stats
