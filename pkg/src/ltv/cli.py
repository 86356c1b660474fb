"""Command-line entry point.

Every command takes ``--seed`` and ``--out-dir``.  Exit codes: 0 success,
1 usage error, 2 runtime failure.  Training-type commands read an optional
``key=value`` config file (``--config``); explicit flags and ``--set KEY=VALUE``
override it, and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, io
from . import ct_sim as C
from .model import LTVModel
from .objective import psnr, ssim
from .solver import classical_tv
from .trainer import (
    ABLATION_ARMS,
    DEFAULT_GRID,
    DESK_OVERRIDES,
    TrainConfig,
    TrainingAborted,
    ablate,
    evaluate,
    export_metrics,
    train,
    write_run_stamp,
)

log = logging.getLogger("ltv")


class UsageError(Exception):
    def __init__(self, message, usage=None):
        super().__init__(message)
        self.usage = usage


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


# ------------------------------------------------------------------ helpers


def worker_count() -> int:
    """Worker threads: ``LTV_THREADS`` if set, else the number of cores."""
    cores = os.cpu_count() or 1
    raw = os.environ.get("LTV_THREADS")
    if raw is None:
        return cores
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LTV_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError("LTV_THREADS must be >= 1")
    return n


def noise_from_args(args) -> C.NoiseConfig:
    return C.NoiseConfig(
        n0=args.n0,
        dose_fraction=args.dose_fraction,
        mode=args.mode,
        gaussian_sigma=args.gaussian_sigma,
        seed=args.seed,
        mu=args.mu,
        n_angles=args.n_angles,
        detector_spacing=args.detector_spacing,
    )


def load_dataset(args) -> C.Dataset:
    if args.data is not None:
        ds = C.read_dataset(args.data)
        if not len(ds.val):
            raise UsageError(f"{args.data} has no validation images")
        return ds
    return C.make_dataset(args.n_train, args.n_val, args.size, noise_from_args(args), seed=args.seed)


def train_config(args) -> TrainConfig:
    """Merge preset, config file, ``--set`` pairs and explicit flags (in that order)."""
    values = dict(DESK_OVERRIDES) if args.desk else {}
    if args.config is not None:
        values.update(io.read_kv(args.config))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    for key in ("epochs", "batch_size", "lr_lambda", "lr_solver", "T"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    values["seed"] = args.seed
    values.setdefault("threads", worker_count())
    try:
        return TrainConfig.from_flat(values)
    except KeyError as exc:
        raise UsageError(str(exc.args[0]))
    except ValueError as exc:
        raise UsageError(f"bad config: {exc}")


def check_run_dir(run_dir, outputs) -> None:
    """Every run directory carries its config, a result table and a version stamp."""
    d = Path(run_dir)
    missing = [n for n in ("config.txt", "VERSION") if not (d / n).is_file()]
    if not any((d / n).is_file() for n in outputs):
        missing.append(" or ".join(outputs))
    if missing:
        raise RuntimeError(f"run directory {d} is incomplete: missing {', '.join(missing)}")


def stamp(args, extra=None) -> Path:
    d = Path(args.out_dir)
    items = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",) and v is not None}
    items.update(extra or {})
    write_run_stamp(d, {k: (str(v) if isinstance(v, Path) else v) for k, v in items.items()})
    return d


# ----------------------------------------------------------------- commands


def cmd_phantom_gen(args) -> int:
    d = Path(args.out_dir)
    (d / "clean").mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        textured = args.textured_every > 0 and i % args.textured_every == 1
        ph = C.make_phantom(args.size, args.size, args.n_primitives, args.seed ^ i, textured)
        io.save_pgm(d / "clean" / f"{i:04d}.pgm", ph.image)
    stamp(args)
    log.info("wrote %d phantoms to %s", args.count, d / "clean")
    return 0


def cmd_simulate(args) -> int:
    cfg = noise_from_args(args)
    d = Path(args.out_dir)
    if args.input_dir is not None:
        files = sorted((Path(args.input_dir) / "clean").glob("*.pgm"))
        if not files:
            raise FileNotFoundError(f"no clean/*.pgm under {args.input_dir}")
        clean = [io.load_pgm(f) for f in files]
        noisy = [C.simulate(c, replace(cfg, seed=cfg.seed ^ i)) for i, c in enumerate(clean)]
        n_train = args.n_train if args.n_train is not None else len(clean)
        meta = {"mode": cfg.mode, "n0": cfg.n0, "dose_fraction": cfg.dose_fraction, "seed": cfg.seed, "n_train": n_train}
        ds = C.Dataset(clean, noisy, [False] * len(clean), n_train, meta)
    else:
        n_train = 32 if args.n_train is None else args.n_train
        ds = C.make_dataset(n_train, args.n_val, args.size, cfg, seed=args.seed)
    C.write_dataset(d, ds)
    ev = evaluate(None, ds, indices=range(len(ds)), grid=())
    export_metrics(ev, d / "metrics.csv")
    stamp(args)
    check_run_dir(d, ["metrics.csv"])
    log.info("noisy PSNR %.2f dB over %d images", ev.row("noisy")["psnr"], len(ds))
    return 0


def cmd_train(args) -> int:
    cfg = train_config(args)
    ds = load_dataset(args)
    res = train(ds, cfg, args.out_dir)
    d = Path(args.out_dir)
    (d / "VERSION").write_text(f"ltv {__version__}\n")
    check_run_dir(d, ["runlog.csv"])
    log.info("best epoch %d: val PSNR %.3f dB", res.best_epoch, res.best_psnr)
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args)
    model = LTVModel.load(args.checkpoint) if args.checkpoint else None
    grid = DEFAULT_GRID if args.grid is None else tuple(float(v) for v in args.grid.split(","))
    ev = evaluate(model, ds, grid=grid, classical_iters=args.iters, threads=worker_count())
    d = stamp(args)
    export_metrics(ev, d / "metrics.csv")
    tex = [ds.textured[i] for i in ev.indices]
    if any(tex):
        export_metrics(ev.subset(tex), d / "metrics_textured.csv")
    check_run_dir(d, ["metrics.csv"])
    for row in ev.table():
        print(f"{row[0]:<32s} psnr {row[1]:7.3f} +- {row[2]:.3f}  ssim {row[3]:.4f} +- {row[4]:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = train_config(args)
    ds = load_dataset(args)
    arms = args.arms.split(",")
    unknown = [a for a in arms if a not in ABLATION_ARMS]
    if unknown:
        raise UsageError(f"unknown ablation arm(s): {', '.join(unknown)}")
    rows = ablate(ds, cfg, arms, args.out_dir)
    d = stamp(args, cfg.flat())
    check_run_dir(d, ["ablation.csv"])
    for r in rows:
        print(f"{r['arm']:<22s} dPSNR {r['delta_psnr']:+.3f}  dSSIM {r['delta_ssim']:+.4f}  dstd {r['delta_lambda_std']:+.4f}")
    return 0


def _write_lambda(d: Path, lam: np.ndarray) -> None:
    lo, hi = float(lam.min()), float(lam.max())
    norm = (lam - lo) / (hi - lo) if hi > lo else np.zeros_like(lam)
    io.save_pgm(d / "lambda.pgm", norm)
    io.write_kv(d / "lambda.txt", {"min": lo, "max": hi})
    io.save_ltvt(d / "lambda.ltvt", lam)


def _denoise_outputs(args, y, x_hat, lam) -> Path:
    d = stamp(args)
    io.save_pgm(d / "denoised.pgm", x_hat)
    if lam is not None:
        _write_lambda(d, lam)
    if args.reference is not None:
        ref = io.load_pgm(args.reference)
        if ref.shape != y.shape:
            raise ValueError(f"reference shape {ref.shape} does not match input {y.shape}")
        io.save_pgm(d / "error.pgm", np.abs(x_hat - ref))
        with open(d / "metrics.csv", "w") as f:
            f.write("image,psnr,ssim\n")
            f.write(f"noisy,{psnr(y, ref)!r},{float(ssim(y, ref))!r}\n")
            f.write(f"denoised,{psnr(x_hat, ref)!r},{float(ssim(x_hat, ref))!r}\n")
    return d


def cmd_denoise(args) -> int:
    if (args.checkpoint is None) == (args.lam is None):
        raise UsageError("denoise needs exactly one of --checkpoint or --lambda")
    y = io.load_pgm(args.input)
    if args.checkpoint is not None:
        model = LTVModel.load(args.checkpoint)
        if model.predictor_config.two_scale and (y.shape[0] % 2 or y.shape[1] % 2):
            raise ValueError(f"checkpoint uses the two-scale predictor, which needs even sides; input is {y.shape}")
        x_hat, lam = model.denoise(y)
    else:
        if args.lam < 0:
            raise UsageError("--lambda must be >= 0")
        x_hat = classical_tv(y, args.lam, args.iters)
        lam = np.full(y.shape, args.lam)
    _denoise_outputs(args, y, x_hat, lam)
    return 0


def cmd_classical_tv(args) -> int:
    if args.lam < 0:
        raise UsageError("--lambda must be >= 0")
    y = io.load_pgm(args.input)
    _denoise_outputs(args, y, classical_tv(y, args.lam, args.iters), None)
    return 0


def cmd_selftest(args) -> int:
    from . import selftest

    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    results = selftest.run(seed=args.seed)
    with open(d / "selftest.csv", "w") as f:
        f.write("check,passed,detail\n")
        for name, ok, detail in results:
            f.write(f"{name},{int(ok)},{detail}\n")
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    stamp(args)
    return 0 if all(ok for _, ok, _ in results) else 2


# ------------------------------------------------------------------- parser


def _common(p):
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)


def _data_args(p, n_train=32):
    p.add_argument("--data", type=Path, help="dataset directory (clean/, noisy/, meta.txt)")
    p.add_argument("--n-train", type=int, default=n_train)
    p.add_argument("--n-val", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    _noise_args(p)


def _noise_args(p):
    d = C.NoiseConfig()
    p.add_argument("--n0", type=float, default=d.n0)
    p.add_argument("--dose-fraction", type=float, default=d.dose_fraction)
    p.add_argument("--mode", choices=("sinogram", "image"), default=d.mode)
    p.add_argument("--gaussian-sigma", type=float, default=d.gaussian_sigma)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--n-angles", type=int, default=d.n_angles)
    p.add_argument("--detector-spacing", type=float, default=d.detector_spacing)


def _train_args(p):
    p.add_argument("--config", type=Path, help="key=value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--desk", action="store_true", help="start from the desk benchmark preset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-lambda", type=float)
    p.add_argument("--lr-solver", type=float)
    p.add_argument("--T", type=int, dest="T")


def build_parser() -> Parser:
    parser = Parser(prog="ltv", description="Learnable TV denoising for low-dose CT.")
    parser.add_argument("--version", action="version", version=f"ltv {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("phantom-gen", help="write clean phantoms as PGM")
    _common(p)
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-primitives", type=int, default=6)
    p.add_argument("--textured-every", type=int, default=2)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("simulate", help="make a paired (clean, noisy) dataset")
    _common(p)
    p.add_argument("--input-dir", type=Path, help="reuse clean/*.pgm from this directory")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    _noise_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the lambda predictor and solver parameters")
    _common(p)
    _data_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise one PGM image")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--iters", type=int, default=20, help="iterations in scalar-lambda mode")
    p.add_argument("--reference", type=Path, help="clean image for the error map")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="metrics table: noisy, classical TV grid, learned model")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--grid", help="comma-separated classical lambda values")
    p.add_argument("--iters", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="retrain with regularizers removed")
    _common(p)
    _data_args(p)
    _train_args(p)
    p.add_argument("--arms", default="baseline,no_tv_lambda,no_ent,no_tv_lambda_no_ent")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("classical-tv", help="scalar-lambda TV baseline on one PGM image")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--lambda", type=float, dest="lam", required=True)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--reference", type=Path)
    p.set_defaults(func=cmd_classical_tv)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    _common(p)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required", parser.format_usage())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        if exc.usage:
            print(exc.usage.rstrip(), file=sys.stderr)
        print(f"ltv: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingAborted, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"ltv: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
