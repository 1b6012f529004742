"""Dynamic gate controller: per-sample multipliers for the clipping bounds.

    features -> conv3x3/s2 -> BN -> ReLU -> global avg pool -> conv1x1 -> 2*sigmoid

Output channel 0 scales the lower bound, channel 1 the upper bound.  Both
lie in (0, 2).  The gate can be quantized to 2 bits: weights use their own
min/max as bounds, activations use an exponential moving average of the
per-batch min/max.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .quantizers import WeightQuantizer, fixed_range_fake_quant
from .tensor import Tensor, batch_norm2d, conv2d, mean, mul_scalar, parameter, relu, sigmoid, square

GATE_BITS = 2
GATE_HIDDEN = 4


def gate_hidden_channels(in_channels: int) -> int:
    """Width of the gate's first conv.

    Fixed at 4: a width that grows with the input channels makes the gates on
    wide dense-block inputs cost more than the quantized layers they serve.
    """
    return GATE_HIDDEN


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def fold_bn(weight, bias, gamma, beta, running_mean, running_var, eps=1e-5):
    """Absorb a frozen BN into the preceding conv; returns ``(w', b')``."""
    weight = np.asarray(weight, dtype=np.float64)
    out_ch = weight.shape[0]
    bias = np.zeros(out_ch) if bias is None else np.asarray(bias, dtype=np.float64)
    denom = np.asarray(running_var, dtype=np.float64) + eps
    if np.any(denom <= 0):
        raise ParameterError("fold_bn: running_var + eps must be positive")
    k = np.asarray(gamma, dtype=np.float64) / np.sqrt(denom)
    w = weight * k.reshape(-1, *([1] * (weight.ndim - 1)))
    b = (bias - np.asarray(running_mean, dtype=np.float64)) * k + np.asarray(beta, dtype=np.float64)
    return w, b


@dataclass
class RangeTracker:
    """EMA of per-batch min/max, frozen outside training."""

    bits: int = GATE_BITS
    momentum: float = 0.9
    lo: float | None = None
    hi: float | None = None

    def observe(self, x: np.ndarray):
        lo, hi = float(x.min()), float(x.max())
        if self.lo is None:
            self.lo, self.hi = lo, hi
        else:
            m = self.momentum
            self.lo = m * self.lo + (1 - m) * lo
            self.hi = m * self.hi + (1 - m) * hi

    def __call__(self, x: Tensor, update: bool) -> Tensor:
        if update:
            self.observe(x.data)
        if self.lo is None or not self.hi > self.lo:
            return x
        return fixed_range_fake_quant(x, self.lo, self.hi, self.bits)


@dataclass
class GateController:
    in_channels: int
    hidden: int
    conv1_w: Tensor
    conv1_b: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    quantized: bool = False
    gate_bits: int = GATE_BITS
    in_range: RangeTracker = field(default_factory=RangeTracker)
    hid_range: RangeTracker = field(default_factory=RangeTracker)

    @classmethod
    def create(cls, in_channels: int, rng: np.random.Generator, hidden: int | None = None) -> "GateController":
        hidden = hidden or gate_hidden_channels(in_channels)
        fan1 = in_channels * 9
        return cls(
            in_channels=in_channels,
            hidden=hidden,
            conv1_w=parameter(_uniform(rng, (hidden, in_channels, 3, 3), fan1), "gate.conv1.w"),
            conv1_b=parameter(_uniform(rng, (hidden,), fan1), "gate.conv1.b"),
            bn_gamma=parameter(np.ones(hidden), "gate.bn.gamma"),
            bn_beta=parameter(np.zeros(hidden), "gate.bn.beta"),
            conv2_w=parameter(_uniform(rng, (2, hidden, 1, 1), hidden), "gate.conv2.w"),
            conv2_b=parameter(_uniform(rng, (2,), hidden), "gate.conv2.b"),
            running_mean=np.zeros(hidden),
            running_var=np.ones(hidden),
        )

    def parameters(self) -> list[Tensor]:
        return [self.conv1_w, self.conv1_b, self.bn_gamma, self.bn_beta, self.conv2_w, self.conv2_b]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def _wq(self, w: Tensor) -> Tensor:
        if not self.quantized:
            return w
        return WeightQuantizer(self.gate_bits, 0.0, 100.0, track=True)(w)

    def __call__(self, features: Tensor, training: bool = False, update_stats: bool | None = None):
        """Return ``(beta_l, beta_u)``, each of shape (N,)."""
        if features.ndim != 4 or features.shape[1] != self.in_channels:
            raise ShapeError(f"gate expects {self.in_channels} input channels, got {features.shape}",
                             axes=("features.C", "conv1.I"))
        update = training if update_stats is None else update_stats
        x = self.in_range(features, update) if self.quantized else features
        h = conv2d(x, self._wq(self.conv1_w), self.conv1_b, stride=2, padding=1)
        h = batch_norm2d(h, self.bn_gamma, self.bn_beta, self.running_mean, self.running_var, training,
                         self.bn_momentum, self.bn_eps, update_stats=update)
        h = mean(relu(h), axis=(2, 3), keepdims=True)
        if self.quantized:
            h = self.hid_range(h, update)
        z = conv2d(h, self._wq(self.conv2_w), self.conv2_b)
        beta = mul_scalar(sigmoid(z), 2.0)
        return beta[:, 0, 0, 0], beta[:, 1, 0, 0]

    def seed_statistics(self, features) -> "GateController":
        """Set BN running statistics and activation ranges from one batch."""
        from .tensor import no_grad

        momentum, self.bn_momentum = self.bn_momentum, 1.0
        try:
            with no_grad():
                self(features if isinstance(features, Tensor) else Tensor(features), training=True, update_stats=True)
        finally:
            self.bn_momentum = momentum
        return self

    def folded_conv1(self):
        """conv1 weights/bias with the frozen BN absorbed (inference form)."""
        return fold_bn(self.conv1_w.data, self.conv1_b.data, self.bn_gamma.data, self.bn_beta.data,
                       self.running_mean, self.running_var, self.bn_eps)

    def state(self) -> dict:
        return {
            "in_channels": self.in_channels, "hidden": self.hidden, "quantized": self.quantized,
            "gate_bits": self.gate_bits, "bn_momentum": self.bn_momentum, "bn_eps": self.bn_eps,
            "in_range": [self.in_range.lo, self.in_range.hi], "hid_range": [self.hid_range.lo, self.hid_range.hi],
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {"conv1_w": self.conv1_w.data, "conv1_b": self.conv1_b.data, "bn_gamma": self.bn_gamma.data,
                "bn_beta": self.bn_beta.data, "conv2_w": self.conv2_w.data, "conv2_b": self.conv2_b.data,
                "running_mean": self.running_mean, "running_var": self.running_var}

    @classmethod
    def from_state(cls, state: dict, arrays: dict) -> "GateController":
        g = cls(
            in_channels=state["in_channels"], hidden=state["hidden"],
            conv1_w=parameter(arrays["conv1_w"], "gate.conv1.w"), conv1_b=parameter(arrays["conv1_b"], "gate.conv1.b"),
            bn_gamma=parameter(arrays["bn_gamma"], "gate.bn.gamma"), bn_beta=parameter(arrays["bn_beta"], "gate.bn.beta"),
            conv2_w=parameter(arrays["conv2_w"], "gate.conv2.w"), conv2_b=parameter(arrays["conv2_b"], "gate.conv2.b"),
            running_mean=np.array(arrays["running_mean"], dtype=np.float64),
            running_var=np.array(arrays["running_var"], dtype=np.float64),
            bn_momentum=state["bn_momentum"], bn_eps=state["bn_eps"], quantized=state["quantized"],
            gate_bits=state["gate_bits"],
        )
        g.in_range.lo, g.in_range.hi = state["in_range"]
        g.hid_range.lo, g.hid_range.hi = state["hid_range"]
        return g


def gate_forward(features: Tensor, g: GateController, training: bool = False):
    return g(features, training=training)


def quantize_gate(g: GateController, calib_features=None) -> GateController:
    """Copy of ``g`` running with 2-bit weights and activations.

    Activation bounds are seeded from ``calib_features`` (a list of NCHW
    arrays or tensors) when given; otherwise they are learned on the fly.
    """
    q = copy.deepcopy(g)
    q.quantized = True
    q.in_range = RangeTracker(q.gate_bits)
    q.hid_range = RangeTracker(q.gate_bits)
    if calib_features is not None:
        from .tensor import no_grad

        with no_grad():
            for f in calib_features:
                q(f if isinstance(f, Tensor) else Tensor(f), training=False, update_stats=True)
    return q


def warmup_loss(beta_l: Tensor, beta_u: Tensor) -> Tensor:
    """Mean over samples of (beta_l - 1)^2 + (beta_u - 1)^2."""
    return mean(square(beta_l - 1.0)) + mean(square(beta_u - 1.0))
