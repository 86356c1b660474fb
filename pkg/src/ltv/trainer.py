"""End-to-end training, evaluation and ablation.

Each batch item is processed on its own tape; gradients are averaged in batch
order, clipped by global norm and applied with Adam using one learning rate
for the predictor and another for the solver scalars.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__, io
from . import tensor as T
from .ct_sim import Dataset
from .lambda_model import PredictorConfig, RampSchedule, lambda_max
from .model import LTVModel
from .objective import COMPONENTS, LOSS_CSV_HEADER, LossWeights, psnr, ssim, total_loss
from .solver import SolverParams, classical_tv

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_lambda: float = 2e-4
    lr_solver: float = 1e-5
    clip_norm: float = 1.0
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    plateau_threshold: float = 1e-4
    plateau_cooldown: int = 1
    seed: int = 0
    T: int = 20
    sigma_data: float = 1.0
    threads: int = 1
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    sched: RampSchedule = field(default_factory=RampSchedule)

    def __post_init__(self):
        if not (self.lr_lambda > 0 and self.lr_solver > 0):
            raise ValueError("learning rates must be positive")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def flat(self) -> dict:
        """Flat ``key -> value`` view, nested sections prefixed by name."""
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
            else:
                out[k] = v
        return out

    @classmethod
    def from_flat(cls, values: dict) -> "TrainConfig":
        """Inverse of :meth:`flat`; strings are coerced to the field types.

        Unknown keys raise ``KeyError``.
        """
        base = cls().flat()
        unknown = sorted(set(values) - set(base))
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        merged = {k: _coerce(values[k], base[k]) if k in values else v for k, v in base.items()}
        top, nested = {}, {"predictor": {}, "loss": {}, "sched": {}}
        for k, v in merged.items():
            head, _, tail = k.partition(".")
            if tail:
                nested[head][tail] = v
            else:
                top[k] = v
        return cls(
            **top,
            predictor=PredictorConfig(**nested["predictor"]),
            loss=LossWeights(**nested["loss"]),
            sched=RampSchedule(**nested["sched"]),
        )


def _coerce(raw, like):
    if not isinstance(raw, str):
        return type(like)(raw)
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


# Desk-scale benchmark preset (32/8 phantoms, 64x64).  With only a few dozen
# images per epoch, batch size 1 and a larger predictor rate are needed for
# the map to follow the lambda_max ramp; the smoothness and distribution terms
# are switched off because at this scale they cost fidelity (see README).
DESK_OVERRIDES = {
    "batch_size": 1,
    "lr_lambda": 1e-3,
    "loss.w_tv_lambda": 0.0,
    "loss.w_spatial": 0.0,
    "loss.w_var": 0.0,
    "loss.w_ent": 0.0,
}


def desk_config(**overrides) -> TrainConfig:
    """The desk benchmark preset; keyword overrides use flat (dotted) keys."""
    values = dict(DESK_OVERRIDES)
    values.update({k.replace("__", "."): v for k, v in overrides.items()})
    return TrainConfig.from_flat(values)


class TrainingAborted(RuntimeError):
    pass


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr) -> dict:
    """One bias-corrected Adam update.

    ``lr`` is a float or a ``{name: lr}`` mapping (one entry per parameter).
    Returns the new parameter dict; ``state`` is updated in place.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        rate = lr[name] if isinstance(lr, dict) else lr
        out[name] = p - rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


def clip_global_norm(grads: dict, clip_norm: float) -> dict:
    norm = global_norm(grads)
    if norm <= clip_norm:
        return dict(grads)
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


def plateau_decay(
    history: Sequence[float],
    lrs: tuple[float, float],
    factor: float = 0.5,
    patience: int = 3,
    threshold: float = 1e-4,
    cooldown: int = 1,
) -> tuple[float, float]:
    """Learning rates after replaying a validation-PSNR history.

    Both rates are multiplied by ``factor`` once the best value has not
    improved by more than ``threshold`` for ``patience`` epochs; after a decay
    the counter stays idle for ``cooldown`` epochs.
    """
    lr_a, lr_b = lrs
    best = -math.inf
    bad = 0
    cool = 0
    for value in history:
        if value > best + threshold:
            best = value
            bad = 0
        else:
            bad += 1
        if cool > 0:
            cool -= 1
            bad = 0
        if bad >= patience:
            lr_a *= factor
            lr_b *= factor
            cool = cooldown
            bad = 0
    return lr_a, lr_b


# ------------------------------------------------------------------ statistics


def lambda_stats(lams: Iterable, x_hats: Iterable) -> dict:
    """Mean/median/std of the maps and their pooled Pearson r with ``|grad x_hat|``."""
    lam = np.concatenate([np.asarray(T.value_of(l)).reshape(-1) for l in lams])
    g = np.concatenate([np.asarray(T.pixel_l2_norm(T.grad2d(T.value_of(x)))).reshape(-1) for x in x_hats])
    sl, sg = lam.std(), g.std()
    degenerate = bool(sl == 0 or sg == 0)
    if degenerate:
        r = 0.0
    else:
        r = float(np.mean((lam - lam.mean()) * (g - g.mean())) / (sl * sg))
    return {
        "lambda_mean": float(lam.mean()),
        "lambda_median": float(np.median(lam)),
        "lambda_std": float(sl),
        "lambda_r": r,
        "degenerate": degenerate,
    }


# ----------------------------------------------------------------------- runs


RUNLOG_HEADER = (
    ["epoch"]
    + [f"train_{k}" for k in COMPONENTS]
    + ["train_total", "val_psnr", "val_ssim", "lambda_max", "lr_lambda", "lr_solver"]
    + ["lambda_mean", "lambda_median", "lambda_std", "lambda_r"]
)


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epochs must increase")
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(RUNLOG_HEADER)
            for row in self.rows:
                w.writerow([_cell(row[k]) for k in RUNLOG_HEADER])


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


@dataclass
class TrainResult:
    model: LTVModel
    log: RunLog
    best_epoch: int
    best_psnr: float


def write_run_stamp(run_dir, config: dict) -> None:
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    io.write_kv(d / "config.txt", config)
    (d / "VERSION").write_text(f"ltv {__version__}\n")


def _item_grads(model: LTVModel, y, ref, t: float, weights: LossWeights):
    tape = T.Tape()
    x_hat, lam, leaves = model.forward(y, t, tape)
    report = total_loss(x_hat, ref, lam, weights, t, model.sched)
    grads = tape.backward(report.total)
    return {k: grads[v] for k, v in leaves.items()}, report


def validate(model: LTVModel, ds: Dataset, indices: Sequence[int], t: float, threads: int = 1):
    def one(i):
        x_hat, lam = model.denoise(ds.noisy[i], t)
        return x_hat, lam, psnr(x_hat, ds.clean[i]), float(ssim(x_hat, ds.clean[i]))

    results = _map(one, indices, threads)
    stats = lambda_stats([r[1] for r in results], [r[0] for r in results])
    return float(np.mean([r[2] for r in results])), float(np.mean([r[3] for r in results])), stats


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def train(
    ds: Dataset,
    cfg: TrainConfig = TrainConfig(),
    run_dir=None,
    model: Optional[LTVModel] = None,
) -> TrainResult:
    """Train a model on ``ds.train`` and validate on ``ds.val`` every epoch.

    With ``run_dir`` the echoed config, ``runlog.csv``, ``losses.csv`` and one
    checkpoint per epoch (plus a ``best`` marker) are written there.
    """
    if not len(ds.train) or not len(ds.val):
        raise ValueError("dataset needs nonempty train and validation splits")
    if set(ds.train) & set(ds.val):
        raise ValueError("train and validation splits overlap")
    if model is None:
        solver = SolverParams(sigma_data=cfg.sigma_data, T=cfg.T)
        model = LTVModel.initialize(cfg.predictor, cfg.seed, solver, cfg.sched)
    groups = model.groups()
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    lrs = (cfg.lr_lambda, cfg.lr_solver)
    history: list[float] = []
    runlog = RunLog()
    best_epoch, best_psnr = -1, -math.inf
    loss_rows = []

    ckpt_root = None
    if run_dir is not None:
        write_run_stamp(run_dir, cfg.flat())
        ckpt_root = Path(run_dir) / "checkpoints"
        ckpt_root.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(cfg.epochs):
        t = float(epoch)
        model.epoch = t
        order = rng.permutation(list(ds.train))
        sums = dict.fromkeys(list(COMPONENTS) + ["total"], 0.0)
        count = 0
        lr_map = {k: (lrs[0] if g == "predictor" else lrs[1]) for k, g in groups.items()}
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [int(i) for i in order[b0 : b0 + cfg.batch_size]]

            def work(i):
                try:
                    return _item_grads(model, ds.noisy[i], ds.clean[i], t, cfg.loss)
                except T.NonFiniteError as exc:
                    raise TrainingAborted(f"non-finite value in batch {b0 // cfg.batch_size} (item {i}): {exc}") from exc

            results = _map(work, batch, cfg.threads)
            for (_, rep), i in zip(results, batch):
                if not math.isfinite(rep.value):
                    raise TrainingAborted(f"NaN loss in batch {b0 // cfg.batch_size} (item {i}): {rep.components}")
            grads = {k: sum(r[0][k] for r in results) / len(results) for k in groups}
            grads = clip_global_norm(grads, cfg.clip_norm)
            model.set_parameters(adam_step(model.parameters(), grads, state, lr_map))
            batch_mean = {k: float(np.mean([r[1].components[k] for r in results])) for k in COMPONENTS}
            batch_mean["total"] = float(np.mean([r[1].value for r in results]))
            loss_rows.append([epoch, step] + [batch_mean[k] for k in COMPONENTS] + [batch_mean["total"]])
            for k in sums:
                sums[k] += batch_mean[k] * len(batch)
            count += len(batch)
            step += 1

        val_psnr, val_ssim, stats = validate(model, ds, ds.val, t, cfg.threads)
        row = {"epoch": epoch}
        row.update({f"train_{k}": sums[k] / count for k in COMPONENTS})
        row["train_total"] = sums["total"] / count
        row.update(
            val_psnr=val_psnr,
            val_ssim=val_ssim,
            lambda_max=lambda_max(t, model.sched),
            lr_lambda=lrs[0],
            lr_solver=lrs[1],
        )
        row.update({k: stats[k] for k in ("lambda_mean", "lambda_median", "lambda_std", "lambda_r")})
        runlog.append(row)
        log.info("epoch %d: loss %.5f val psnr %.3f ssim %.4f", epoch, row["train_total"], val_psnr, val_ssim)

        if ckpt_root is not None:
            name = f"epoch_{epoch:03d}"
            model.save(ckpt_root / name)
        if val_psnr > best_psnr:
            best_epoch, best_psnr = epoch, val_psnr
            if ckpt_root is not None:
                io.link_best(ckpt_root, name)

        history.append(val_psnr)
        lrs = plateau_decay(
            history,
            (cfg.lr_lambda, cfg.lr_solver),
            cfg.plateau_factor,
            cfg.plateau_patience,
            cfg.plateau_threshold,
            cfg.plateau_cooldown,
        )

    if run_dir is not None:
        runlog.write_csv(Path(run_dir) / "runlog.csv")
        with open(Path(run_dir) / "losses.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOSS_CSV_HEADER)
            for r in loss_rows:
                w.writerow([_cell(c) for c in r])
    return TrainResult(model, runlog, best_epoch, best_psnr)


# ------------------------------------------------------------------ evaluation

METRICS_HEADER = ["method", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"]
DEFAULT_GRID = tuple(float(v) for v in np.geomspace(0.01, 1.0, 10))


@dataclass
class EvalResult:
    """Per-image metrics for every method, in table order."""

    per_image: dict[str, dict[str, np.ndarray]]
    indices: list[int]

    def table(self) -> list[list]:
        rows = []
        for method, m in self.per_image.items():
            rows.append([method, m["psnr"].mean(), m["psnr"].std(), m["ssim"].mean(), m["ssim"].std()])
        return rows

    def row(self, method: str) -> dict:
        m = self.per_image[method]
        return {"psnr": float(m["psnr"].mean()), "ssim": float(m["ssim"].mean())}

    def subset(self, mask: Sequence[bool]) -> "EvalResult":
        """Restrict to a subset of images; the best-grid row is re-selected."""
        sel = np.asarray(mask, dtype=bool)
        per = {k: {mk: mv[sel] for mk, mv in v.items()} for k, v in self.per_image.items() if k != "classical_tv_best"}
        _add_best(per)
        ordered = {k: per[k] for k in self.per_image}
        return EvalResult(ordered, [i for i, s in zip(self.indices, sel) if s])


def grid_label(lam: float) -> str:
    return f"classical_tv[lambda={lam:.4g}]"


def _add_best(per: dict) -> None:
    grid = [k for k in per if k.startswith("classical_tv[")]
    if grid:
        best = max(grid, key=lambda k: per[k]["psnr"].mean())
        per["classical_tv_best"] = {k: v.copy() for k, v in per[best].items()}


def evaluate(
    model: Optional[LTVModel],
    ds: Dataset,
    indices: Optional[Sequence[int]] = None,
    grid: Sequence[float] = DEFAULT_GRID,
    classical_iters: int = 20,
    threads: int = 1,
) -> EvalResult:
    """PSNR/SSIM of the noisy input, classical TV over ``grid`` and the model.

    ``model=None`` leaves out the learned row.
    """
    idx = list(ds.val if indices is None else indices)
    methods = ["noisy"] + [grid_label(l) for l in grid]

    def one(i):
        y, ref = ds.noisy[i], ds.clean[i]
        outs = [y] + [classical_tv(y, l, classical_iters) for l in grid]
        if model is not None:
            outs.append(model.denoise(y)[0])
        return [(psnr(o, ref), float(ssim(o, ref))) for o in outs]

    results = _map(one, idx, threads)
    names = methods + (["ltv"] if model is not None else [])
    per = {}
    for j, name in enumerate(names):
        per[name] = {
            "psnr": np.array([r[j][0] for r in results]),
            "ssim": np.array([r[j][1] for r in results]),
        }
    _add_best(per)
    order = methods + (["classical_tv_best"] if len(grid) else []) + (["ltv"] if model is not None else [])
    return EvalResult({k: per[k] for k in order}, idx)


def export_metrics(result: EvalResult, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for row in result.table():
            w.writerow([row[0]] + [_cell(v) for v in row[1:]])
    return path


# -------------------------------------------------------------------- ablation

ABLATION_ARMS = {
    "baseline": {},
    "null": {},
    "no_tv_lambda": {"w_tv_lambda": 0.0},
    "no_ent": {"w_ent": 0.0},
    "no_tv_lambda_no_ent": {"w_tv_lambda": 0.0, "w_ent": 0.0},
}

ABLATION_HEADER = [
    "arm",
    "w_tv_lambda",
    "w_ent",
    "psnr",
    "ssim",
    "lambda_std",
    "delta_psnr",
    "delta_ssim",
    "delta_lambda_std",
]


def ablate(
    ds: Dataset,
    cfg: TrainConfig,
    arms: Sequence[str] = ("baseline", "no_tv_lambda", "no_ent", "no_tv_lambda_no_ent"),
    run_dir=None,
) -> list[dict]:
    """Retrain under each arm's loss weights (same seed) and compare to baseline.

    Deltas are ``arm - baseline`` on final validation PSNR, SSIM and std of
    the map.  The ``null`` arm changes nothing and must match the baseline.
    """
    arms = list(arms)
    if "baseline" not in arms:
        arms.insert(0, "baseline")
    rows = []
    for arm in arms:
        if arm not in ABLATION_ARMS:
            raise ValueError(f"unknown ablation arm {arm!r}")
        arm_cfg = replace(cfg, loss=replace(cfg.loss, **ABLATION_ARMS[arm]))
        sub = None if run_dir is None else Path(run_dir) / arm
        res = train(ds, arm_cfg, sub)
        last = res.log.rows[-1]
        rows.append(
            {
                "arm": arm,
                "w_tv_lambda": arm_cfg.loss.w_tv_lambda,
                "w_ent": arm_cfg.loss.w_ent,
                "psnr": last["val_psnr"],
                "ssim": last["val_ssim"],
                "lambda_std": last["lambda_std"],
            }
        )
    base = next(r for r in rows if r["arm"] == "baseline")
    for r in rows:
        r["delta_psnr"] = r["psnr"] - base["psnr"]
        r["delta_ssim"] = r["ssim"] - base["ssim"]
        r["delta_lambda_std"] = r["lambda_std"] - base["lambda_std"]
    if run_dir is not None:
        with open(Path(run_dir) / "ablation.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(ABLATION_HEADER)
            for r in rows:
                w.writerow([_cell(r[k]) for k in ABLATION_HEADER])
    return rows
