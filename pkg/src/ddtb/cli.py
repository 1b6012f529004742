"""Command-line entry point: ``ddtb {calibrate,train,eval,analyze,quantfit}``.

Every subcommand takes ``--config FILE``; flags given on the command line
override the file.  Failures print a single line

    error kind=<ExceptionType> key=<config key or -> message="<text>"

to stderr and exit nonzero (2 for configuration errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DDTBError, ImageIOError
from .data import RunConfig, list_images, load_config, load_image, load_pairs, toy_corpus

log = logging.getLogger("ddtb")


def _fail(exc: Exception, code: int) -> int:
    key = getattr(exc, "key", None) or "-"
    print(f"error kind={type(exc).__name__} key={key} message={json.dumps(str(exc))}", file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error kind=UsageError key=- message={json.dumps(message)}\n")


# ---------------------------------------------------------------------------
# shared helpers


OVERRIDES = ("preset", "scale", "size", "bits", "P", "M", "K", "method", "epochs", "lr", "seed", "out_dir",
             "train_dir", "val_dir", "teacher", "batch_size", "patch")


def config_path(name) -> Path:
    """``name`` as given, or the bundled config of that name."""
    from .data import toy_config_path

    p = Path(name)
    if not p.exists() and p.name == toy_config_path().name and len(p.parts) == 1:
        return toy_config_path()
    return p


def run_config(args) -> RunConfig:
    cfg = load_config(config_path(args.config)) if getattr(args, "config", None) else RunConfig()
    changes = {k: getattr(args, k) for k in OVERRIDES if getattr(args, k, None) is not None}
    if not changes:
        return cfg
    if "epochs" in changes and cfg.K > changes["epochs"] and "K" not in changes:
        log.warning("warmup K=%d exceeds --epochs %d; warming up for %d epochs", cfg.K, changes["epochs"],
                    changes["epochs"])
        changes["K"] = changes["epochs"]
    try:
        return dataclasses.replace(cfg, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "<flags>") from exc


def dataset(cfg: RunConfig):
    if cfg.train_dir == "toy":
        return toy_corpus(cfg.scale, cfg.n_val)
    pairs = load_pairs(cfg.train_dir, cfg.scale)
    if cfg.val_dir:
        return pairs, load_pairs(cfg.val_dir, cfg.scale)
    if cfg.n_val >= len(pairs):
        raise ConfigError(f"n_val={cfg.n_val} leaves no training images in {cfg.train_dir}", "data.n_val")
    return (pairs[:-cfg.n_val], pairs[-cfg.n_val:]) if cfg.n_val else (pairs, [])


def teacher_model(cfg: RunConfig, train_pairs):
    from .data import load_checkpoint
    from .models import SRModel, build_model
    from .training import pretrain_fp

    if cfg.teacher:
        teacher, _ = load_checkpoint(cfg.teacher)
        return teacher
    desc = build_model(cfg.preset, cfg.scale, cfg.size, bits=32)
    mean = np.mean([p.hr.reshape(-1, 3).mean(axis=0) for p in train_pairs], axis=0)
    teacher = SRModel(desc, np.random.default_rng(cfg.seed), rgb_mean=mean)
    if cfg.pretrain_steps:
        log.info("pretraining the full-precision teacher for %d steps", cfg.pretrain_steps)
        pretrain_fp(teacher, train_pairs, cfg.pretrain_steps, cfg.pretrain_lr, cfg.batch_size, cfg.patch, cfg.seed)
    return teacher


def student_model(cfg: RunConfig, teacher):
    from .models import SRModel, build_model

    desc = build_model(cfg.preset, cfg.scale, cfg.size, bits=cfg.bits, P=cfg.P, M=cfg.M)
    return SRModel(desc, np.random.default_rng(cfg.seed), rgb_mean=teacher.rgb_mean)


def out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# subcommands


def cmd_analyze(args) -> int:
    from .evaluation import complexity, parse_size
    from .models import build_model

    if args.size is None and not args.config:
        args.size = "paper"
    cfg = run_config(args)
    desc = build_model(cfg.preset, cfg.scale, cfg.size, bits=cfg.bits, P=cfg.P)
    report = complexity(desc, parse_size(args.out_size), cfg.scale)
    print(report.to_json() if args.json else report.table())
    return 0


def cmd_calibrate(args) -> int:
    from .calibration import stats_report
    from .data import save_checkpoint
    from .training import TrainConfig, prepare

    cfg = run_config(args)
    train_pairs, _ = dataset(cfg)
    teacher = teacher_model(cfg, train_pairs)
    student = student_model(cfg, teacher)
    _, gated, stats = prepare(student, teacher, train_pairs, TrainConfig.from_run_config(cfg))
    d = out_dir(cfg)
    report = stats_report(stats)
    (d / "calib_stats.txt").write_text(report)
    save_checkpoint(d / "teacher.ckpt", teacher)
    save_checkpoint(d / "calibrated.ckpt", student, {"gated": gated})
    print(report, end="")
    print(f"# gated: {' '.join(gated) or '-'}")
    print(f"# wrote {d / 'calibrated.ckpt'}")
    return 0


def cmd_train(args) -> int:
    from .data import format_config, save_checkpoint
    from .errors import TrainingDiverged
    from .training import TrainConfig, fp_twin, train

    cfg = run_config(args)
    train_pairs, val_pairs = dataset(cfg)
    d = out_dir(cfg)
    log_path = d / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    teacher = teacher_model(cfg, train_pairs)
    save_checkpoint(d / "teacher.ckpt", teacher)
    student = student_model(cfg, teacher)
    tcfg = TrainConfig.from_run_config(cfg)
    try:
        result = train(student, fp_twin(teacher), (train_pairs, val_pairs), tcfg, log_path=log_path)
    except TrainingDiverged as exc:
        (d / "diverged.json").write_text(json.dumps(exc.snapshot, indent=2))
        raise
    save_checkpoint(d / "model.ckpt", result.model, {"config": format_config(cfg), "history": result.history,
                                                     "gated": result.gated})
    last = result.history[-1]
    print(f"epochs {cfg.epochs}  final loss {last['total']:.4f}  val PSNR {last['val_psnr']:.3f} dB")
    print(f"wrote {d / 'model.ckpt'} and {log_path}")
    return 0


def _pair_files(sr_dir, hr_dir):
    hr = {p.stem: p for p in list_images(hr_dir)}
    sr = {p.stem: p for p in list_images(sr_dir)}
    common = sorted(set(hr) & set(sr))
    if not common:
        raise ImageIOError("no images with matching names", sr_dir)
    return [(k, sr[k], hr[k]) for k in common]


def cmd_eval(args) -> int:
    from .evaluation import psnr_y, ssim_y

    rows = []
    if args.checkpoint:
        from .data import load_checkpoint, save_image, to_hwc, to_nchw
        from .tensor import no_grad

        model, _ = load_checkpoint(args.checkpoint)
        scale = args.scale or model.desc.scale
        mode = "quantized" if model.act_quant else "fp"
        save_dir = Path(args.save_dir) if args.save_dir else None
        if save_dir:
            save_dir.mkdir(parents=True, exist_ok=True)
        with no_grad():
            for pair in load_pairs(args.hr_dir, scale):
                out = to_hwc(model.forward(to_nchw([pair.lr]), mode=mode).output.data)[0]
                if save_dir:
                    save_image(out, save_dir / f"{pair.name}.ppm")
                rows.append((pair.name, psnr_y(out, pair.hr, scale, args.studio), ssim_y(out, pair.hr, scale, args.studio)))
    else:
        if not args.sr_dir:
            raise ConfigError("eval needs --sr-dir or --checkpoint", "sr_dir")
        scale = args.scale or 4
        for name, sp, hp in _pair_files(args.sr_dir, args.hr_dir):
            sr, hr = load_image(sp), load_image(hp)
            rows.append((name, psnr_y(sr, hr, scale, args.studio), ssim_y(sr, hr, scale, args.studio)))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("image", "psnr", "ssim"))
    for name, p, s in rows:
        w.writerow((name, f"{p:.4f}", f"{s:.6f}"))
    w.writerow(("mean", f"{np.mean([r[1] for r in rows]):.4f}", f"{np.mean([r[2] for r in rows]):.6f}"))
    return 0


def load_activations(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ImageIOError("no such file", path)
    try:
        if path.suffix == ".npy":
            return np.load(path).astype(np.float64).reshape(-1)
        return np.loadtxt(path, dtype=np.float64).reshape(-1)
    except ValueError as exc:
        raise ImageIOError(f"cannot parse activations: {exc}", path) from exc


def cmd_quantfit(args) -> int:
    from .evaluation import wasted_levels
    from .quantizers import ActQuantizer, SymmetricQuantizer

    cfg = run_config(args)
    x = load_activations(args.activations)
    if x.size == 0:
        raise ImageIOError("empty activation dump", args.activations)
    bits = cfg.bits
    rows = []
    if args.quantizer in ("symmetric", "both"):
        a = float(np.abs(x).max()) or 1.0
        q = SymmetricQuantizer.create(a, bits)
        rows.append(("symmetric", bits, -a, a, wasted_levels(x, q)))
    if args.quantizer in ("ddtb", "both"):
        lo, hi = float(x.min()), float(x.max())
        if not hi > lo:
            lo, hi = lo - 1e-3, hi + 1e-3
        q = ActQuantizer.create(lo, hi, bits)
        rows.append(("ddtb", bits, lo, hi, wasted_levels(x, q)))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("quantizer", "bits", "lower", "upper", "wasted"))
    for r in rows:
        w.writerow((r[0], r[1], f"{r[2]:.6g}", f"{r[3]:.6g}", f"{r[4]:.4f}"))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ddtb", description="Quantization-aware training with dynamic dual trainable bounds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--preset", choices=("edsr", "rdn", "srresnet"))
        sp.add_argument("--scale", type=int)
        sp.add_argument("--size", choices=("toy", "paper"))
        sp.add_argument("--bits", type=int)
        sp.add_argument("--P", type=float, dest="P")
        sp.add_argument("--M", type=float, dest="M")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", dest="out_dir")
        return sp

    a = common(sub.add_parser("analyze", help="params/BOPs report (no weights needed)"))
    a.add_argument("--out-size", default="1920x1080", help="output WIDTHxHEIGHT")
    a.add_argument("--json", action="store_true", help="print JSON instead of a table")
    a.set_defaults(func=cmd_analyze)

    for name, fn, text in (("calibrate", cmd_calibrate, "initialize bounds and gates, write stats + checkpoint"),
                           ("train", cmd_train, "run the full training protocol")):
        t = common(sub.add_parser(name, help=text))
        t.add_argument("--K", type=int, dest="K")
        t.add_argument("--method", choices=("ddtb", "pams"))
        t.add_argument("--epochs", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--batch-size", type=int, dest="batch_size")
        t.add_argument("--patch", type=int)
        t.add_argument("--train-dir", dest="train_dir")
        t.add_argument("--val-dir", dest="val_dir")
        t.add_argument("--teacher", help="full-precision checkpoint (skips pretraining)")
        t.set_defaults(func=fn)

    e = sub.add_parser("eval", help="Y-channel PSNR/SSIM over a directory of images")
    e.add_argument("--config")
    e.add_argument("--hr-dir", required=True)
    e.add_argument("--sr-dir")
    e.add_argument("--checkpoint", help="super-resolve HR-derived LR images with this model")
    e.add_argument("--save-dir")
    e.add_argument("--scale", type=int)
    e.add_argument("--studio", action="store_true", help="studio-swing (16-235) luma")
    e.set_defaults(func=cmd_eval)

    q = common(sub.add_parser("quantfit", help="wasted quantization levels on an activation dump"))
    q.add_argument("--activations", required=True, help=".npy or whitespace-separated text")
    q.add_argument("--quantizer", choices=("symmetric", "ddtb", "both"), default="both")
    q.set_defaults(func=cmd_quantfit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(exc, 2)
    except (DDTBError, OSError) as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
