"""Images, LR synthesis, patch sampling, augmentation, run configs and checkpoints."""
from __future__ import annotations

import configparser
import io
import json
import math
import struct
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ImageIOError, ParameterError, ShapeError

IMAGE_SUFFIXES = (".ppm", ".png")

# ---------------------------------------------------------------------------
# image I/O


def _ppm_tokens(buf: bytes, count: int, path):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, i, n = [], 0, len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageIOError("truncated PPM header", path)
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, offset = _ppm_tokens(buf, 4, path)
    if tokens[0] != b"P6":
        raise ImageIOError(f"not a binary PPM (magic {tokens[0]!r})", path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageIOError("malformed PPM header", path) from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise ImageIOError(f"unsupported PPM geometry {w}x{h} maxval {maxval}", path)
    need = w * h * 3
    raster = buf[offset:offset + need]
    if len(raster) < need:
        raise ImageIOError(f"truncated PPM raster: {len(raster)} of {need} bytes", path)
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(img, path):
    img = _as_uint8(img)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def _as_uint8(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 image, got {img.shape}", axes=("channels",))
    if img.dtype != np.uint8:
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return img


def load_image(path) -> np.ndarray:
    """H x W x 3 uint8 array from a PPM (P6) or PNG file."""
    path = Path(path)
    if not path.exists():
        raise ImageIOError("no such file", path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageIOError("PNG support needs Pillow (pip install artifact[png])", path) from exc
        try:
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        except OSError as exc:
            raise ImageIOError(f"cannot decode PNG: {exc}", path) from exc
    raise ImageIOError(f"unsupported image format {suffix!r}", path)


def save_image(img, path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        write_ppm(img, path)
    elif suffix == ".png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageIOError("PNG support needs Pillow (pip install artifact[png])", path) from exc
        Image.fromarray(_as_uint8(img)).save(path)
    else:
        raise ImageIOError(f"unsupported image format {suffix!r}", path)


# ---------------------------------------------------------------------------
# LR synthesis


def cubic(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _reflect(idx, n):
    # half-sample symmetric: -1 -> 0, n -> n-1
    idx = np.mod(idx, 2 * n)
    return np.where(idx >= n, 2 * n - 1 - idx, idx)


def resize_weights(n_in: int, scale: int, a: float = -0.5):
    """(n_out, taps) source indices and weights of an antialiased bicubic reduction."""
    n_out = n_in // scale
    width = 4 * scale
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    first = np.floor(centers - width / 2).astype(int) + 1
    idx = first[:, None] + np.arange(width)[None, :]
    wts = cubic((centers[:, None] - idx) / scale, a) / scale
    wts /= wts.sum(axis=1, keepdims=True)
    return _reflect(idx, n_in), wts


def bicubic_downsample(hr, scale: int, a: float = -0.5) -> np.ndarray:
    """Antialiased bicubic reduction by an integer factor.

    uint8 input gives rounded uint8 output; float input gives clamped floats.
    """
    hr = np.asarray(hr)
    if scale < 1:
        raise ParameterError(f"scale must be >= 1, got {scale}")
    h, w = hr.shape[:2]
    if h % scale or w % scale:
        raise ShapeError(f"{h}x{w} not divisible by {scale}; crop first", axes=("H", "W"))
    if scale == 1:
        return hr.copy()
    x = hr.astype(np.float64)
    ri, rw = resize_weights(h, scale, a)
    ci, cw = resize_weights(w, scale, a)
    x = np.einsum("ot,ot...->o...", rw, x[ri])
    x = np.einsum("ot,hot...->ho...", cw, x[:, ci])
    x = np.clip(x, 0, 255)
    return np.round(x).astype(np.uint8) if hr.dtype == np.uint8 else x


def crop_to_multiple(img, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


# ---------------------------------------------------------------------------
# pairs, patches, augmentation


@dataclass
class ImagePair:
    lr: np.ndarray
    hr: np.ndarray
    scale: int
    name: str = ""

    def __post_init__(self):
        lh, lw = self.lr.shape[:2]
        if self.hr.shape[:2] != (lh * self.scale, lw * self.scale):
            raise ShapeError(f"HR {self.hr.shape[:2]} is not {self.scale}x LR {self.lr.shape[:2]}", axes=("H", "W"))

    @classmethod
    def from_hr(cls, hr, scale: int, name: str = "") -> "ImagePair":
        hr = crop_to_multiple(np.asarray(hr), scale)
        return cls(bicubic_downsample(hr, scale), hr, scale, name)


@dataclass
class PatchPair:
    lr: np.ndarray
    hr: np.ndarray
    lr_xy: tuple[int, int]
    hr_xy: tuple[int, int]


def sample_patches(pair: ImagePair, patch: int, n: int, seed) -> list[PatchPair]:
    """``n`` aligned LR/HR crops; the LR crop is ``patch`` pixels square."""
    lh, lw = pair.lr.shape[:2]
    if patch > min(lh, lw) or patch < 1:
        raise ParameterError(f"patch {patch} does not fit LR image {lh}x{lw}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = pair.scale
    out = []
    for _ in range(n):
        y = int(rng.integers(0, lh - patch + 1))
        x = int(rng.integers(0, lw - patch + 1))
        out.append(PatchPair(pair.lr[y:y + patch, x:x + patch], pair.hr[y * s:(y + patch) * s, x * s:(x + patch) * s],
                             (y, x), (y * s, x * s)))
    return out


def hflip(img) -> np.ndarray:
    return img[:, ::-1]


def transform(img, flip: bool, rot: int) -> np.ndarray:
    if flip:
        img = hflip(img)
    return np.rot90(img, rot, axes=(0, 1))


def augment(p: PatchPair, seed) -> PatchPair:
    """Random h-flip and rotation by a multiple of 90 degrees, same for LR and HR."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip, rot = bool(rng.integers(0, 2)), int(rng.integers(0, 4))
    return PatchPair(np.ascontiguousarray(transform(p.lr, flip, rot)),
                     np.ascontiguousarray(transform(p.hr, flip, rot)), p.lr_xy, p.hr_xy)


def to_nchw(imgs) -> np.ndarray:
    return np.stack([np.asarray(i, dtype=np.float64).transpose(2, 0, 1) for i in imgs])


def to_hwc(batch: np.ndarray) -> np.ndarray:
    return np.clip(np.round(batch.transpose(0, 2, 3, 1)), 0, 255).astype(np.uint8)


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ImageIOError("not a directory", d)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_pairs(directory, scale: int) -> list[ImagePair]:
    """HR images in ``directory``; or the DIV2K layout HR/ + LR_bicubic/X{s}/.

    LR images missing from the DIV2K layout are synthesized bicubically.
    """
    d = Path(directory)
    if (d / "HR").is_dir():
        pairs = []
        lr_dir = d / "LR_bicubic" / f"X{scale}"
        for p in list_images(d / "HR"):
            hr = crop_to_multiple(load_image(p), scale)
            lr_path = next((lr_dir / f"{p.stem}x{scale}{suf}" for suf in IMAGE_SUFFIXES
                            if (lr_dir / f"{p.stem}x{scale}{suf}").exists()), None)
            if lr_path is None:
                pairs.append(ImagePair.from_hr(hr, scale, p.stem))
            else:
                pairs.append(ImagePair(load_image(lr_path), hr, scale, p.stem))
        return pairs
    return [ImagePair.from_hr(load_image(p), scale, p.stem) for p in list_images(d)]


def toy_dir() -> Path:
    return Path(str(resources.files("ddtb") / "resources" / "toy"))


def toy_config_path() -> Path:
    return Path(str(resources.files("ddtb") / "resources" / "toy.cfg"))


def toy_corpus(scale: int = 4, n_val: int = 2) -> tuple[list[ImagePair], list[ImagePair]]:
    """The bundled 8-image corpus split into (train, validation)."""
    pairs = load_pairs(toy_dir(), scale)
    return pairs[:-n_val], pairs[-n_val:]


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    # [model]
    preset: str = "edsr"
    scale: int = 4
    size: str = "toy"
    bits: int = 2
    # [calib]
    P: float | None = None
    M: float | None = None
    K: int = 5
    calib_patches: int = 16
    # [train]
    method: str = "ddtb"
    epochs: int = 60
    batch_size: int = 16
    patch: int = 48
    patches_per_image: int = 16
    lr: float = 1e-4
    lr_period: int = 10
    lam: float = 1000.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gate_lr: float | None = None
    warmup_gate_lr: float | None = None
    quant_lr: float | None = None
    augment: bool = True
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    # [data]
    train_dir: str = "toy"
    val_dir: str | None = None
    n_val: int = 2
    teacher: str | None = None
    # [run]
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = {
            "preset": self.preset in ("edsr", "rdn", "srresnet"),
            "scale": self.scale in (2, 3, 4),
            "size": self.size in ("toy", "paper"),
            "bits": 2 <= self.bits <= 32,
            "P": self.P is None or 0 <= self.P <= 100,
            "M": self.M is None or 50 < self.M <= 100,
            "K": 0 <= self.K <= self.epochs,
            "calib_patches": self.calib_patches > 0,
            "method": self.method in ("ddtb", "pams"),
            "epochs": self.epochs > 0,
            "batch_size": self.batch_size > 0,
            "patch": self.patch > 0,
            "patches_per_image": self.patches_per_image > 0,
            "lr": self.lr > 0,
            "lr_period": self.lr_period > 0,
            "lam": self.lam >= 0,
            "beta1": 0 <= self.beta1 < 1,
            "beta2": 0 <= self.beta2 < 1,
            "eps": self.eps > 0,
            "gate_lr": self.gate_lr is None or self.gate_lr > 0,
            "warmup_gate_lr": self.warmup_gate_lr is None or self.warmup_gate_lr > 0,
            "quant_lr": self.quant_lr is None or self.quant_lr > 0,
            "pretrain_steps": self.pretrain_steps >= 0,
            "pretrain_lr": self.pretrain_lr > 0,
            "n_val": self.n_val >= 0,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(f"invalid value {getattr(self, key)!r} for {key}", key)
        return self


SECTIONS = {
    "model": ("preset", "scale", "size", "bits"),
    "calib": ("P", "M", "K", "calib_patches"),
    "train": ("method", "epochs", "batch_size", "patch", "patches_per_image", "lr", "lr_period", "lam", "beta1",
              "beta2", "eps", "gate_lr", "warmup_gate_lr", "quant_lr", "augment", "pretrain_steps", "pretrain_lr"),
    "data": ("train_dir", "val_dir", "n_val", "teacher"),
    "run": ("seed", "out_dir"),
}
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    t = _TYPES[key]
    raw = raw.strip()
    optional = "None" in t
    if optional and raw.lower() in ("", "none"):
        return None
    try:
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        if t.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} for {key}", key) from exc
    return raw


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0], "<file>") from exc
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", section)
        for key, raw in cp.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", f"{section}.{key}")
            values[key] = _convert(key, raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", "--config") from exc
    return parse_config(text)


def format_config(cfg: RunConfig) -> str:
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        for k in keys:
            v = getattr(cfg, k)
            out.append(f"{k} = {'' if v is None else repr(v) if isinstance(v, float) else v}")
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u16 version | u32 section count | sections
# section: u16 name length | name | u8 kind | u64 payload length | payload
# kind 0 = UTF-8 JSON, kind 1 = array (u32 JSON header length | header | float32 LE data)

MAGIC = b"DDTBCKPT"
VERSION = 1
_JSON, _ARRAY = 0, 1


def _encode_array(a) -> bytes:
    a = np.asarray(a, dtype="<f4")
    header = json.dumps({"shape": list(a.shape)}).encode()
    return struct.pack("<I", len(header)) + header + a.tobytes()


def _decode_array(payload: bytes) -> np.ndarray:
    (hl,) = struct.unpack_from("<I", payload)
    shape = json.loads(payload[4:4 + hl])["shape"]
    data = np.frombuffer(payload, dtype="<f4", offset=4 + hl)
    if data.size != math.prod(shape):
        raise CheckpointError(f"array payload holds {data.size} values, header says {shape}")
    return data.reshape(shape).astype(np.float64)


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]):
    buf = io.BytesIO()
    sections = [("meta", _JSON, json.dumps(meta).encode())]
    sections += [(f"array:{k}", _ARRAY, _encode_array(v)) for k, v in arrays.items()]
    buf.write(MAGIC + struct.pack("<HI", VERSION, len(sections)))
    for name, kind, payload in sections:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<BQ", kind, len(payload)) + payload)
    Path(path).write_bytes(buf.getvalue())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", raw, len(MAGIC))
        if version > VERSION:
            raise CheckpointError(f"{path}: format version {version} is newer than {VERSION}")
        pos = len(MAGIC) + 6
        meta, arrays = None, {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nl].decode()
            kind, plen = struct.unpack_from("<BQ", raw, pos + 2 + nl)
            start = pos + 2 + nl + 9
            payload = raw[start:start + plen]
            if len(payload) != plen:
                raise CheckpointError(f"{path}: truncated section {name!r}")
            pos = start + plen
            if name == "meta" and kind == _JSON:
                meta = json.loads(payload)
            elif name.startswith("array:") and kind == _ARRAY:
                arrays[name[6:]] = _decode_array(payload)
            # other sections come from newer writers and are skipped
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if meta is None:
        raise CheckpointError(f"{path}: missing meta section")
    return meta, arrays


def save_checkpoint(path, model, extra: dict | None = None):
    """Descriptor, weights, quantizer bounds and gate states of ``model``."""
    arrays = {k: p.data for k, p in model.params.items()}
    gates = {}
    for name, g in model.gates.items():
        gates[name] = g.state()
        arrays.update({f"gate:{name}:{k}": v for k, v in g.arrays().items()})
    meta = {
        "descriptor": model.desc.to_dict(),
        "rgb_mean": list(model.rgb_mean),
        "method": model.method,
        "act_quant": {k: q.state() for k, q in model.act_quant.items()},
        "weight_quant": {k: q.state() for k, q in model.weight_quant.items()},
        "gates": gates,
        "extra": extra or {},
    }
    write_container(path, meta, arrays)


def load_checkpoint(path):
    """Rebuild the model written by :func:`save_checkpoint`; returns ``(model, extra)``."""
    from .gate import GateController
    from .models import ModelDescriptor, SRModel
    from .quantizers import WeightQuantizer, act_quantizer_from_state

    meta, arrays = read_container(path)
    try:
        desc = ModelDescriptor.from_dict(meta["descriptor"])
        model = SRModel(desc, rgb_mean=meta["rgb_mean"])
        for k in model.params:
            model.params[k].data = arrays[k].copy()
        model.method = meta["method"]
        model.act_quant = {k: act_quantizer_from_state(v) for k, v in meta["act_quant"].items()}
        model.weight_quant = {k: WeightQuantizer.from_state(v) for k, v in meta["weight_quant"].items()}
        for name, state in meta["gates"].items():
            prefix = f"gate:{name}:"
            model.gates[name] = GateController.from_state(
                state, {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from exc
    return model, meta.get("extra", {})
