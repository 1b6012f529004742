"""Losses, Adam, the learning-rate schedule and the quantization-aware training loop.

Protocol: calibrate bounds from the full-precision twin, then ``K`` warmup
epochs in which the gates are pulled toward 1 while their outputs are not
yet applied, then joint training with gate-scaled bounds.  The loss is
L1(SR, HR) + lam * SKT(student feature, teacher feature).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibConfig, calibrate_model
from .errors import ParameterError, ShapeError, TrainingDiverged
from .evaluation import psnr_y
from .gate import quantize_gate, warmup_loss
from .models import SRModel
from .data import augment, sample_patches, to_hwc, to_nchw
from .tensor import Tensor, abs_, add, backward, expand, l2_norm, mean, mul_scalar, no_grad, reshape, square, sub, sum_

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l1", "skt", "total", "lr", "val_psnr")
SKT_EPS = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-4
    lr_period: int = 10
    lam: float = 1000.0
    K: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patch: int = 48
    patches_per_image: int = 16
    augment: bool = True
    method: str = "ddtb"
    gate_lr: float | None = None
    warmup_gate_lr: float | None = None
    quant_lr: float | None = None
    train_bounds: bool = True
    quantize_gates: bool = True
    calib_patches: int = 16
    P: float | None = None
    M: float | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "lr_period", "patch", "patches_per_image", "calib_patches"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.K <= self.epochs:
            raise ParameterError(f"need 0 <= K <= epochs, got K={self.K}, epochs={self.epochs}")
        if self.lam < 0:
            raise ParameterError(f"lam must be >= 0, got {self.lam}")

    @classmethod
    def from_run_config(cls, rc) -> "TrainConfig":
        keys = ("epochs", "batch_size", "lr", "lr_period", "lam", "K", "beta1", "beta2", "eps", "patch",
                "patches_per_image", "augment", "method", "gate_lr", "warmup_gate_lr", "quant_lr",
                "calib_patches", "P", "M", "seed")
        return cls(**{k: getattr(rc, k) for k in keys})


# ---------------------------------------------------------------------------
# losses


def l1_loss(sr: Tensor, hr) -> Tensor:
    hr = hr if isinstance(hr, Tensor) else Tensor(hr)
    if sr.shape != hr.shape:
        raise ShapeError(f"l1_loss: {sr.shape} vs {hr.shape}", axes=("N", "C", "H", "W"))
    return mean(abs_(sub(sr, hr)))


def structure_map(f: Tensor) -> Tensor:
    """Per-image channel energy sum_c F_c^2, flattened to (N, H*W)."""
    n = f.shape[0]
    return reshape(sum_(square(f), axis=1), (n, -1))


def skt_loss(student: Tensor, teacher) -> Tensor:
    """Mean L2 distance between Frobenius-normalized structure maps.

    The teacher side is treated as a constant.
    """
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=np.float64)
    if student.shape != t.shape:
        raise ShapeError(f"skt_loss: student {student.shape} vs teacher {t.shape}", axes=("C", "H", "W"))
    s_map = structure_map(student)
    n, hw = s_map.shape
    s_norm = reshape(add(l2_norm(s_map, axis=1), SKT_EPS), (n, 1))
    s_hat = s_map / expand(s_norm, (n, hw))
    t_map = (t * t).sum(axis=1).reshape(n, -1)
    t_hat = t_map / (np.linalg.norm(t_map, axis=1, keepdims=True) + SKT_EPS)
    return mean(l2_norm(sub(s_hat, Tensor(t_hat)), axis=1))


def total_loss(l1, skt, warmup_gate_loss, epoch: int, K: int, lam: float = 1000.0):
    """L1 + lam * SKT, plus the gate warmup term while ``epoch <= K``."""
    if isinstance(skt, Tensor):
        loss = add(l1, mul_scalar(skt, lam))
    else:
        loss = l1 + lam * skt
    if epoch <= K and warmup_gate_loss is not None:
        loss = loss + warmup_gate_loss
    return loss


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def _adam_update(p, g, state: AdamState, i: int, lr, c1, c2, beta1, beta2, eps):
    m = beta1 * state.m.get(i, 0.0) + (1 - beta1) * g
    v = beta2 * state.v.get(i, 0.0) + (1 - beta2) * g * g
    state.m[i], state.v[i] = m, v
    return p - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays, mutates ``state``."""
    state.t += 1
    c1, c2 = 1 - beta1 ** state.t, 1 - beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        out.append(p.copy() if g is None else _adam_update(p, g, state, i, lr, c1, c2, beta1, beta2, eps))
    return out


class Adam:
    """Adam over parameter groups, each with its own lr multiplier."""

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = [(list(ps), float(mult)) for ps, mult in groups]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    @property
    def params(self) -> list[Tensor]:
        return [p for ps, _ in self.groups for p in ps]

    def step(self, lr: float):
        st = self.state
        st.t += 1
        c1, c2 = 1 - self.beta1 ** st.t, 1 - self.beta2 ** st.t
        i = 0
        for ps, mult in self.groups:
            for p in ps:
                if p.grad is not None:
                    p.data = _adam_update(p.data, p.grad, st, i, lr * mult, c1, c2, self.beta1, self.beta2, self.eps)
                i += 1

    def set_multiplier(self, group: int, mult: float):
        ps, _ = self.groups[group]
        self.groups[group] = (ps, float(mult))

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def lr_at(epoch: int, lr0: float, period: int = 10) -> float:
    """lr0 * 0.5 ** floor(epoch / period)."""
    return lr0 * 0.5 ** (epoch // period)


# ---------------------------------------------------------------------------
# data plumbing


def epoch_batches(pairs, cfg: TrainConfig, rng: np.random.Generator):
    patches = []
    for pair in pairs:
        for p in sample_patches(pair, cfg.patch, cfg.patches_per_image, rng):
            patches.append(augment(p, rng) if cfg.augment else p)
    order = rng.permutation(len(patches))
    for i in range(0, len(order), cfg.batch_size):
        chunk = [patches[j] for j in order[i:i + cfg.batch_size]]
        yield to_nchw([p.lr for p in chunk]), to_nchw([p.hr for p in chunk])


def calibration_batch(pairs, n: int, patch: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919])
    per = math.ceil(n / len(pairs))
    patches = [p for pair in pairs for p in sample_patches(pair, patch, per, rng)][:n]
    return to_nchw([p.lr for p in patches])


def fp_twin(model: SRModel) -> SRModel:
    """Frozen full-precision copy sharing nothing with ``model``."""
    twin = SRModel(model.desc, rgb_mean=model.rgb_mean)
    for k, p in model.params.items():
        twin.params[k].data = p.data.copy()
        twin.params[k].requires_grad = False
    return twin


def evaluate(model: SRModel, pairs, mode: str | None = None) -> float:
    """Mean Y-PSNR over ``pairs`` with 8-bit rounded outputs."""
    if not pairs:
        return float("nan")
    if mode is None:
        mode = "quantized" if model.act_quant else "fp"
    vals = []
    with no_grad():
        for pair in pairs:
            out = model.forward(to_nchw([pair.lr]), mode=mode, training=False, update_stats=False).output
            vals.append(psnr_y(to_hwc(out.data)[0], pair.hr, pair.scale))
    return float(np.mean(vals))


def beta_deviation(model: SRModel, images) -> float:
    """Mean |beta - 1| over every gate and sample of ``images`` (inference mode)."""
    if not model.gates:
        return 0.0
    with no_grad():
        trace = model.forward(images, mode="quantized", training=False, update_stats=False)
    devs = [np.abs(b.data - 1.0) for _, bl, bu in trace.betas for b in (bl, bu)]
    return float(np.mean(np.concatenate(devs)))


def pretrain_fp(model: SRModel, pairs, steps: int, lr: float = 1e-3, batch_size: int = 16, patch: int = 12,
                seed: int = 0) -> list[float]:
    """Plain L1 training of the full-precision network (teacher preparation)."""
    cfg = TrainConfig(epochs=1, K=0, batch_size=batch_size, patch=patch, patches_per_image=max(1, batch_size),
                      seed=seed)
    opt = Adam([(model.weight_parameters(), 1.0)])
    losses, step, epoch = [], 0, 0
    while step < steps:
        rng = np.random.default_rng([seed, 104729, epoch])
        for lr_b, hr_b in epoch_batches(pairs, cfg, rng):
            if step >= steps:
                break
            opt.zero_grad()
            loss = l1_loss(model(lr_b, "fp", training=True), hr_b)
            backward(loss)
            # halve at 50% and 75% of the budget
            opt.step(lr * 0.5 ** ((step >= steps // 2) + (step >= 3 * steps // 4)))
            losses.append(loss.item())
            step += 1
        epoch += 1
    return losses


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: SRModel
    history: list[dict]
    gated: list[str] = field(default_factory=list)


def _snapshot(model, epoch, step, parts):
    return {
        "epoch": epoch, "step": step, **parts,
        "bounds": {k: q.state() for k, q in model.act_quant.items()},
        "weight_absmax": {k: float(np.abs(p.data).max()) for k, p in model.params.items()},
    }


def prepare(model: SRModel, teacher: SRModel, train_pairs, cfg: TrainConfig):
    """Calibrate ``model`` from the teacher's weights.

    Returns ``(calibration batch, gated sites, per-site statistics)``.
    """
    model.copy_weights_from(teacher)
    calib = calibration_batch(train_pairs, cfg.calib_patches, cfg.patch, cfg.seed)
    if all(not s.quantized for s in model.desc.sites()):
        return calib, [], {}
    ccfg = CalibConfig(M=model.desc.M if cfg.M is None else cfg.M, P=model.desc.P if cfg.P is None else cfg.P,
                       K=cfg.K)
    stats = calibrate_model(model, calib, ccfg, cfg.method, rng=np.random.default_rng([cfg.seed, 31]))
    feats = model.site_activations(calib) if model.gates else {}
    for name, g in list(model.gates.items()):
        if cfg.quantize_gates:
            g = quantize_gate(g)
        model.gates[name] = g.seed_statistics(feats[name])
    return calib, list(model.gates), stats


def train(model: SRModel, teacher: SRModel, data, cfg: TrainConfig, log_path=None, hook=None,
          calibrate: bool = True) -> TrainResult:
    """Run the full protocol and return the trained model with per-epoch history.

    ``data`` is ``(train_pairs, val_pairs)``.  ``hook`` is called with an
    event dict after every step (``kind="step"``) and epoch (``kind="epoch"``).
    """
    train_pairs, val_pairs = data
    if not train_pairs:
        raise ParameterError("no training images")
    for p in teacher.parameters():
        p.requires_grad = False
    if calibrate:
        calib, gated, _ = prepare(model, teacher, train_pairs, cfg)
    else:
        calib, gated = calibration_batch(train_pairs, cfg.calib_patches, cfg.patch, cfg.seed), list(model.gates)
    quantized = bool(model.act_quant)
    mode = "quantized" if quantized else "fp"

    base = cfg.lr
    groups = [(model.weight_parameters(), 1.0)]
    if cfg.train_bounds and model.quantizer_parameters():
        groups.append((model.quantizer_parameters(), (cfg.quant_lr or base) / base))
    gate_group = None
    if model.gate_parameters():
        gate_group = len(groups)
        groups.append((model.gate_parameters(), 1.0))
    gate_mult = (cfg.gate_lr or base) / base
    warm_gate_mult = (cfg.warmup_gate_lr or cfg.gate_lr or base) / base
    opt = Adam(groups, cfg.beta1, cfg.beta2, cfg.eps)

    writer = None
    fh = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        fh = log_path.open("a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_COLUMNS)

    history = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            warm = epoch <= cfg.K
            model.beta_active = not warm
            model.gate_detach = warm
            if gate_group is not None:
                opt.set_multiplier(gate_group, warm_gate_mult if warm else gate_mult)
            lr = lr_at(epoch, base, cfg.lr_period)
            rng = np.random.default_rng([cfg.seed, epoch])
            sums = {"l1": 0.0, "skt": 0.0, "total": 0.0}
            steps = 0
            for lr_b, hr_b in epoch_batches(train_pairs, cfg, rng):
                opt.zero_grad()
                with no_grad():
                    t_feat = teacher.forward(lr_b, mode="fp").feature
                trace = model.forward(lr_b, mode=mode, training=True)
                l1 = l1_loss(trace.output, hr_b)
                skt = skt_loss(trace.feature, t_feat) if cfg.lam > 0 else Tensor(0.0)
                wl = None
                if warm and trace.betas:
                    wl = warmup_loss(trace.betas[0][1], trace.betas[0][2])
                    for _, bl, bu in trace.betas[1:]:
                        wl = wl + warmup_loss(bl, bu)
                loss = total_loss(l1, skt, wl, epoch, cfg.K, cfg.lam)
                parts = {"l1": l1.item(), "skt": skt.item(), "total": loss.item()}
                if not all(math.isfinite(v) for v in parts.values()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {steps}",
                                           _snapshot(model, epoch, steps, parts))
                backward(loss)
                opt.step(lr)
                model.enforce_constraints()
                for k in sums:
                    sums[k] += parts[k]
                steps += 1
                if hook is not None:
                    hook({"kind": "step", "epoch": epoch, "step": steps, "lr": lr, "warmup": warm,
                          "beta_applied": model.beta_active and bool(trace.betas), "gates_ran": bool(trace.betas),
                          **parts})
            row = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in sums.items()}, "lr": lr,
                   "val_psnr": evaluate(model, val_pairs, mode)}
            extra = {"beta_dev": beta_deviation(model, calib) if model.gates else 0.0}
            history.append({**row, **extra})
            if writer is not None:
                writer.writerow([row[c] for c in LOG_COLUMNS])
                fh.flush()
            log.info("epoch %d  l1 %.4f  skt %.5f  total %.4f  lr %.2e  val %.3f dB", epoch, row["l1"], row["skt"],
                     row["total"], lr, row["val_psnr"])
            if hook is not None:
                hook({"kind": "epoch", **row, **extra})
    finally:
        if fh is not None:
            fh.close()
    model.beta_active = True
    model.gate_detach = False
    return TrainResult(model, history, gated)
