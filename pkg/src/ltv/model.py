"""The full denoiser: predictor weights, solver parameters and the ramp schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from . import tensor as T
from .lambda_model import ConvPredictor, PredictorConfig, RampSchedule, map_lambda
from .solver import SolverParams, unrolled_solve

SOLVER_KEYS = ("tau_raw", "sigma_raw", "theta_raw")


@dataclass
class LTVModel:
    predictor_config: PredictorConfig = field(default_factory=PredictorConfig)
    weights: dict = field(default_factory=dict)
    solver: SolverParams = field(default_factory=SolverParams)
    sched: RampSchedule = field(default_factory=RampSchedule)
    epoch: float = 0.0

    @classmethod
    def initialize(cls, predictor_config=PredictorConfig(), seed: int = 0, solver=None, sched=RampSchedule()):
        rng = np.random.default_rng(seed)
        weights = ConvPredictor(predictor_config).init_weights(rng)
        return cls(predictor_config, weights, solver or SolverParams(), sched, 0.0)

    @property
    def predictor(self) -> ConvPredictor:
        return ConvPredictor(self.predictor_config)

    def parameters(self) -> dict[str, np.ndarray]:
        """All learnable arrays keyed by name (solver scalars as 0-d arrays)."""
        out = {k: np.asarray(v, dtype=np.float64) for k, v in self.weights.items()}
        for k in SOLVER_KEYS:
            out[k] = np.asarray(getattr(self.solver, k), dtype=np.float64)
        return out

    def groups(self) -> dict[str, str]:
        return {k: ("solver" if k in SOLVER_KEYS else "predictor") for k in self.parameters()}

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            if k in SOLVER_KEYS:
                self.solver = replace(self.solver, **{k: float(v)})
            else:
                self.weights[k] = np.asarray(v, dtype=np.float64)

    def forward(self, y, t: float | None = None, tape: T.Tape | None = None):
        """Return ``(x_hat, lam, leaves)``.

        With a tape every learnable array becomes a leaf (returned by name) and
        ``x_hat``/``lam`` are Vars; otherwise plain arrays come back.
        """
        t = self.epoch if t is None else t
        params = self.parameters()
        leaves = {}
        if tape is not None:
            leaves = {k: tape.var(v) for k, v in params.items()}
            params = leaves
        weights = {k: params[k] for k in self.weights}
        solver = replace(self.solver, **{k: params[k] for k in SOLVER_KEYS})
        z = self.predictor(y, weights)
        lam = map_lambda(z, t, self.sched)
        x_hat = unrolled_solve(y, lam, solver)
        return x_hat, lam, leaves

    def denoise(self, y, t: float | None = None):
        x_hat, lam, _ = self.forward(np.asarray(y, dtype=np.float64), t)
        return x_hat, lam

    # ------------------------------------------------------------ persistence

    def save(self, directory) -> Path:
        params = self.parameters()
        roles = self.groups()
        meta = {f"predictor.{f.name}": getattr(self.predictor_config, f.name) for f in fields(PredictorConfig)}
        meta.update({f"sched.{k}": v for k, v in asdict(self.sched).items()})
        meta["solver.sigma_data"] = self.solver.sigma_data
        meta["solver.T"] = self.solver.T
        meta["epoch"] = float(self.epoch)
        return io.save_checkpoint(directory, params, roles, meta)

    @classmethod
    def load(cls, directory) -> "LTVModel":
        tensors, roles, meta = io.load_checkpoint(directory)
        pc = {}
        for f in fields(PredictorConfig):
            raw = meta.get(f"predictor.{f.name}")
            if raw is not None:
                pc[f.name] = _parse_like(raw, getattr(PredictorConfig(), f.name))
        sc = {}
        for k, default in asdict(RampSchedule()).items():
            raw = meta.get(f"sched.{k}")
            if raw is not None:
                sc[k] = _parse_like(raw, default)
        solver = SolverParams(
            *(float(tensors[k]) for k in SOLVER_KEYS),
            sigma_data=float(meta.get("solver.sigma_data", 1.0)),
            T=int(meta.get("solver.T", 20)),
        )
        weights = {k: v for k, v in tensors.items() if roles[k] == "predictor"}
        model = cls(PredictorConfig(**pc), weights, solver, RampSchedule(**sc), float(meta.get("epoch", 0.0)))
        model.predictor.check_weights(weights)
        return model


def _parse_like(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw
