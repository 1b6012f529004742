"""SR model descriptors and the runtime that executes them.

A :class:`ModelDescriptor` is a flat list of :class:`LayerSpec` entries with
shapes, module tags and bit-widths.  It is all the complexity calculator
needs.  :class:`SRModel` binds weights, quantizers and gates to a descriptor
and runs it in full precision or with fake quantization.

Only convolutions tagged ``high-level`` are quantization sites.  At a
site the input activations go through the activation quantizer (with
gate-scaled bounds when a gate is attached), then the convolution runs
with fake-quantized weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError, StateError
from .quantizers import WeightQuantizer
from .tensor import Tensor, add, concat, conv2d, parameter, pixel_shuffle, relu, shift_channels

LOW, HIGH, RECON = "low-level", "high-level", "reconstruction"
TAGS = (LOW, HIGH, RECON)
KINDS = ("conv", "relu", "residual-block", "dense-block", "pixel-shuffle", "add", "concat", "mean-shift")

# DIV2K training-set RGB mean on a 0-255 scale
DIV2K_RGB_MEAN = (0.4488 * 255, 0.4371 * 255, 0.4040 * 255)

PRESET_DEFAULTS = {
    "edsr": {"P": 30.0, "M": 99.0},
    "rdn": {"P": 50.0, "M": 95.0},
    "srresnet": {"P": 10.0, "M": 99.0},
}


@dataclass
class LayerSpec:
    kind: str
    name: str
    tag: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    w_bits: int = 32
    a_bits: int = 32
    r: int = 1
    sign: int = -1
    save_as: str | None = None
    sources: tuple[str, ...] = ()
    children: list["LayerSpec"] = field(default_factory=list)
    gated: bool = False

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def is_site(self) -> bool:
        return self.kind == "conv" and self.tag == HIGH

    @property
    def quantized(self) -> bool:
        return self.is_site and (self.w_bits < 32 or self.a_bits < 32)

    def param_count(self) -> int:
        if self.kind == "conv":
            return self.kernel * self.kernel * self.in_ch * self.out_ch + self.out_ch
        return sum(c.param_count() for c in self.children)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("kind", "name", "tag", "in_ch", "out_ch", "kernel", "stride", "w_bits",
                                           "a_bits", "r", "sign", "save_as", "gated")}
        d["sources"] = list(self.sources)
        d["children"] = [c.to_dict() for c in self.children]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["sources"] = tuple(d.get("sources", ()))
        d["children"] = [cls.from_dict(c) for c in d.get("children", [])]
        return cls(**d)


@dataclass
class ModelDescriptor:
    preset: str
    size: str
    scale: int
    channels: int
    layers: list[LayerSpec]
    P: float = 30.0
    M: float = 99.0
    bits: int = 32
    rgb_mean: tuple[float, float, float] = DIV2K_RGB_MEAN
    skt_site: str | None = None

    def walk(self):
        """Every layer, depth first, children after their parent."""
        stack = list(reversed(self.layers))
        while stack:
            layer = stack.pop()
            yield layer
            stack.extend(reversed(layer.children))

    def convs(self) -> list[LayerSpec]:
        return [l for l in self.walk() if l.kind == "conv"]

    def sites(self) -> list[LayerSpec]:
        return [l for l in self.walk() if l.is_site]

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.convs())

    def to_dict(self) -> dict:
        return {"preset": self.preset, "size": self.size, "scale": self.scale, "channels": self.channels,
                "P": self.P, "M": self.M, "bits": self.bits, "rgb_mean": list(self.rgb_mean),
                "skt_site": self.skt_site, "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDescriptor":
        d = dict(d)
        d["layers"] = [LayerSpec.from_dict(l) for l in d["layers"]]
        d["rgb_mean"] = tuple(d["rgb_mean"])
        return cls(**d)


def _conv(name, tag, cin, cout, k, bits=32):
    return LayerSpec("conv", name, tag, cin, cout, k, w_bits=bits if tag == HIGH else 32,
                     a_bits=bits if tag == HIGH else 32)


def _upsampler(scale: int, ch: int, act: bool = False) -> list[LayerSpec]:
    if scale in (2, 4):
        steps, r = int(math.log2(scale)), 2
    elif scale == 3:
        steps, r = 1, 3
    else:
        raise ParameterError(f"unsupported scale {scale}")
    out = []
    for i in range(steps):
        out.append(_conv(f"up.{i}", RECON, ch, ch * r * r, 3))
        out.append(LayerSpec("pixel-shuffle", f"up.{i}.shuffle", RECON, ch * r * r, ch, r=r))
        if act:
            out.append(LayerSpec("relu", f"up.{i}.act", RECON))
    return out


def _resblock(name, ch, bits):
    return LayerSpec("residual-block", name, HIGH, ch, ch, children=[
        _conv(f"{name}.conv1", HIGH, ch, ch, 3, bits),
        LayerSpec("relu", f"{name}.act", HIGH),
        _conv(f"{name}.conv2", HIGH, ch, ch, 3, bits),
    ])


def _edsr(ch, blocks, scale, bits, head_k=3, tail_k=3, head_act=False, up_act=False):
    layers = [LayerSpec("mean-shift", "sub_mean", LOW, 3, 3, sign=-1)]
    head = _conv("head", LOW, 3, ch, head_k)
    layers.append(head)
    if head_act:
        layers.append(LayerSpec("relu", "head.act", LOW))
    layers[-1].save_as = "head"
    layers += [_resblock(f"body.{i}", ch, bits) for i in range(blocks)]
    layers.append(_conv("body_tail", RECON, ch, ch, 3))
    layers.append(LayerSpec("add", "global_skip", RECON, ch, ch, sources=("head",)))
    layers += _upsampler(scale, ch, up_act)
    layers.append(_conv("tail", RECON, ch, 3, tail_k))
    layers.append(LayerSpec("mean-shift", "add_mean", RECON, 3, 3, sign=1))
    return layers, f"body.{blocks - 1}"


def _rdn(g0, d, c, g, scale, bits):
    layers = [LayerSpec("mean-shift", "sub_mean", LOW, 3, 3, sign=-1),
              _conv("sfe1", LOW, 3, g0, 3), _conv("sfe2", LOW, g0, g0, 3)]
    layers[1].save_as = "sfe1"
    for i in range(d):
        kids = []
        for j in range(c):
            kids.append(_conv(f"rdb.{i}.conv{j}", HIGH, g0 + j * g, g, 3, bits))
            kids.append(LayerSpec("relu", f"rdb.{i}.act{j}", HIGH))
        kids.append(_conv(f"rdb.{i}.lff", HIGH, g0 + c * g, g0, 1, bits))
        layers.append(LayerSpec("dense-block", f"rdb.{i}", HIGH, g0, g0, save_as=f"rdb.{i}", children=kids))
    layers.append(LayerSpec("concat", "gff.cat", HIGH, d * g0, d * g0, sources=tuple(f"rdb.{i}" for i in range(d))))
    layers.append(_conv("gff.0", HIGH, d * g0, g0, 1, bits))
    layers.append(_conv("gff.1", HIGH, g0, g0, 3, bits))
    layers.append(LayerSpec("add", "global_skip", RECON, g0, g0, sources=("sfe1",)))
    layers += _upsampler(scale, g0)
    layers.append(_conv("tail", RECON, g0, 3, 3))
    layers.append(LayerSpec("mean-shift", "add_mean", RECON, 3, 3, sign=1))
    return layers, "gff.1"


_SIZES = {
    "edsr": {"paper": {"ch": 64, "blocks": 16}, "toy": {"ch": 16, "blocks": 4}},
    "srresnet": {"paper": {"ch": 64, "blocks": 16}, "toy": {"ch": 16, "blocks": 4}},
    "rdn": {"paper": {"g0": 64, "d": 16, "c": 8, "g": 64}, "toy": {"g0": 16, "d": 2, "c": 3, "g": 16}},
}


def build_model(preset: str, scale: int = 4, size: str = "paper", bits: int = 32, P: float | None = None,
                M: float | None = None, blocks: int | None = None, channels: int | None = None) -> ModelDescriptor:
    """Descriptor for a named architecture.

    With ``bits < 32`` the high-level convolutions carry that bit-width and the
    first ceil(P% * sites) sites are marked gated (the placement the DI ranking
    yields when all intensities tie; :func:`place_gates` overrides it).
    """
    preset = preset.lower()
    if preset not in _SIZES:
        raise ParameterError(f"unknown preset {preset!r}; choose from {sorted(_SIZES)}")
    if size not in ("paper", "toy"):
        raise ParameterError(f"unknown size {size!r}")
    if bits < 2:
        raise ParameterError(f"bits must be >= 2, got {bits}")
    dims = dict(_SIZES[preset][size])
    if preset == "rdn":
        if blocks:
            dims["d"] = blocks
        if channels:
            dims["g0"] = dims["g"] = channels
        layers, skt = _rdn(dims["g0"], dims["d"], dims["c"], dims["g"], scale, bits)
        ch = dims["g0"]
    else:
        ch = channels or dims["ch"]
        nb = blocks or dims["blocks"]
        if preset == "edsr":
            layers, skt = _edsr(ch, nb, scale, bits)
        else:
            layers, skt = _edsr(ch, nb, scale, bits, head_k=9, tail_k=9, head_act=True, up_act=True)
    defaults = PRESET_DEFAULTS[preset]
    desc = ModelDescriptor(preset, size, scale, ch, layers, P=defaults["P"] if P is None else P,
                           M=defaults["M"] if M is None else M, bits=bits, skt_site=skt)
    if bits < 32:
        sites = desc.sites()
        k = math.ceil(desc.P * len(sites) / 100 - 1e-9)
        place_gates(desc, [s.name for s in sites[:k]])
    return desc


def place_gates(desc: ModelDescriptor, names) -> ModelDescriptor:
    names = set(names)
    for s in desc.sites():
        s.gated = s.name in names
    unknown = names - {s.name for s in desc.sites()}
    if unknown:
        raise ParameterError(f"not quantization sites: {sorted(unknown)}")
    return desc


def with_bits(desc: ModelDescriptor, bits: int) -> ModelDescriptor:
    """Copy of ``desc`` with every site at ``bits`` (gates cleared at 32)."""
    d = ModelDescriptor.from_dict(desc.to_dict())
    d.bits = bits
    for s in d.sites():
        s.w_bits = s.a_bits = bits
        if bits >= 32:
            s.gated = False
    return d


# ---------------------------------------------------------------------------
# runtime


def _init_conv(rng, spec: LayerSpec):
    fan_in = spec.in_ch * spec.kernel * spec.kernel
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(spec.out_ch, spec.in_ch, spec.kernel, spec.kernel))
    b = rng.uniform(-bound, bound, size=(spec.out_ch,))
    return w, b


@dataclass
class Trace:
    output: Tensor
    feature: Tensor | None = None
    betas: list = field(default_factory=list)
    site_inputs: dict = field(default_factory=dict)


class SRModel:
    """Weights + quantizers + gates bound to a descriptor.

    ``beta_active`` decides whether gate outputs rescale the bounds; during
    warmup the gates still run (their outputs feed the warmup loss) but the
    quantizers use the raw bounds.
    """

    def __init__(self, desc: ModelDescriptor, rng: np.random.Generator | None = None, rgb_mean=None):
        self.desc = desc
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        for spec in desc.convs():
            w, b = _init_conv(rng, spec)
            self.params[f"{spec.name}.w"] = parameter(w, f"{spec.name}.w")
            self.params[f"{spec.name}.b"] = parameter(b, f"{spec.name}.b")
        self.rgb_mean = np.asarray(desc.rgb_mean if rgb_mean is None else rgb_mean, dtype=np.float64)
        self.act_quant: dict = {}
        self.weight_quant: dict[str, WeightQuantizer] = {}
        self.gates: dict = {}
        self.method = "ddtb"
        self.beta_active = True
        self.gate_detach = False

    # -- bookkeeping ---------------------------------------------------------
    def sites(self) -> list[LayerSpec]:
        return self.desc.sites()

    def weight_parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def quantizer_parameters(self) -> list[Tensor]:
        return [p for q in self.act_quant.values() for p in q.parameters()]

    def gate_parameters(self) -> list[Tensor]:
        return [p for g in self.gates.values() for p in g.parameters()]

    def parameters(self) -> list[Tensor]:
        return self.weight_parameters() + self.quantizer_parameters() + self.gate_parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def enforce_constraints(self):
        for q in self.act_quant.values():
            q.enforce_constraints()

    @property
    def calibrated(self) -> bool:
        return all(s.name in self.act_quant and s.name in self.weight_quant for s in self.sites() if s.quantized)

    def copy_weights_from(self, other: "SRModel"):
        for k, p in other.params.items():
            self.params[k].data = p.data.copy()

    # -- forward ---------------------------------------------------------------
    def __call__(self, x, mode: str = "fp", training: bool = False) -> Tensor:
        return self.forward(x, mode, training).output

    def forward(self, x, mode: str = "fp", training: bool = False, capture_sites: bool = False,
                update_stats: bool | None = None) -> Trace:
        if mode not in ("fp", "quantized"):
            raise ParameterError(f"mode must be 'fp' or 'quantized', got {mode!r}")
        if mode == "quantized" and not self.calibrated:
            raise StateError("quantized forward before calibration")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected N x 3 x H x W input, got {x.shape}", axes=("C",))
        trace = Trace(output=x)
        ctx = {"mode": mode, "training": training, "trace": trace, "capture": capture_sites,
               "update": training if update_stats is None else update_stats}
        saved: dict[str, Tensor] = {}
        for spec in self.desc.layers:
            x = self._run(spec, x, saved, ctx)
        trace.output = x
        return trace

    def _run(self, spec: LayerSpec, x: Tensor, saved, ctx) -> Tensor:
        kind = spec.kind
        if kind == "conv":
            x = self._conv(spec, x, ctx)
        elif kind == "relu":
            x = relu(x)
        elif kind == "mean-shift":
            x = shift_channels(x, spec.sign * self.rgb_mean)
        elif kind == "pixel-shuffle":
            x = pixel_shuffle(x, spec.r)
        elif kind == "add":
            x = add(x, saved[spec.sources[0]])
        elif kind == "concat":
            x = concat([saved[s] for s in spec.sources], axis=1)
        elif kind == "residual-block":
            h = x
            for c in spec.children:
                h = self._run(c, h, saved, ctx)
            x = add(x, h)
        elif kind == "dense-block":
            feats = [x]
            kids = spec.children
            for conv, act in zip(kids[:-1:2], kids[1:-1:2]):
                inp = feats[0] if len(feats) == 1 else concat(feats, axis=1)
                feats.append(relu(self._conv(conv, inp, ctx)))
            x = add(x, self._conv(kids[-1], concat(feats, axis=1), ctx))
        else:
            raise ParameterError(f"unknown layer kind {kind!r}")
        if spec.save_as:
            saved[spec.save_as] = x
        if spec.name == self.desc.skt_site:
            ctx["trace"].feature = x
        return x

    def _conv(self, spec: LayerSpec, a: Tensor, ctx) -> Tensor:
        w, b = self.params[f"{spec.name}.w"], self.params[f"{spec.name}.b"]
        trace = ctx["trace"]
        if spec.is_site and ctx["capture"]:
            trace.site_inputs[spec.name] = a.data.copy()
        if ctx["mode"] == "quantized" and spec.quantized:
            beta_l = beta_u = None
            gate = self.gates.get(spec.name)
            if gate is not None:
                gin = Tensor(a.data) if self.gate_detach else a
                beta_l, beta_u = gate(gin, training=ctx["training"], update_stats=ctx["update"])
                trace.betas.append((spec.name, beta_l, beta_u))
                if not self.beta_active:
                    beta_l = beta_u = None
            a = self.act_quant[spec.name](a, beta_l, beta_u)
            w = self.weight_quant[spec.name](w)
        return conv2d(a, w, b, stride=spec.stride, padding=spec.padding)

    def site_activations(self, x: np.ndarray) -> dict[str, np.ndarray]:
        """Full-precision inputs of every quantization site, in depth order."""
        from .tensor import no_grad

        with no_grad():
            trace = self.forward(Tensor(x), mode="fp", capture_sites=True)
        return trace.site_inputs


def quantized_forward(model: SRModel, x, mode: str = "quantized") -> Tensor:
    return model(x, mode=mode)
