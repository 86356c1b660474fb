"""Fast built-in invariant checks (a few seconds on one core)."""

from __future__ import annotations

import numpy as np

from . import io
from . import tensor as T
from .gradcheck import numeric_grad, rel_error
from .lambda_model import PredictorConfig, lambda_max, map_lambda
from .model import LTVModel
from .objective import LossWeights, total_loss
from .solver import SolverParams, classical_tv, unrolled_solve


def _adjoint(rng):
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(16, 16))
        p = rng.normal(size=(2, 16, 16))
        lhs = np.sum(T.grad2d(x) * p)
        rhs = -np.sum(x * T.div2d(p))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(p)))
    return worst <= 1e-10, f"max relative residual {worst:.2e}"


def _identity(rng):
    y = rng.uniform(size=(16, 16))
    ok = np.array_equal(unrolled_solve(y, np.zeros_like(y), SolverParams()), y)
    ok &= np.array_equal(classical_tv(y, 0.0), y)
    return bool(ok), "lambda = 0 returns the input"


def _feasibility(rng):
    y = rng.uniform(size=(16, 16))
    lam = rng.uniform(0, 1, size=(16, 16))
    worst = []
    unrolled_solve(y, lam, SolverParams(T=30), callback=lambda k, x, xb, p: worst.append(np.max(T.pixel_l2_norm(p) - lam)))
    return max(worst) <= 1e-12, f"max(|p| - lambda) = {max(worst):.2e}"


def _gradients(rng):
    model = LTVModel.initialize(PredictorConfig(depth=2, channels=3, head_scale=1.0), seed=int(rng.integers(1 << 31)))
    model.solver = SolverParams(T=3)
    y = rng.uniform(size=(8, 8))
    ref = np.clip(y + 0.05 * rng.normal(size=(8, 8)), 0, 1)
    base = model.parameters()

    def loss_at(params):
        m = LTVModel(model.predictor_config, dict(model.weights), model.solver, model.sched)
        m.set_parameters(params)
        x_hat, lam, _ = m.forward(y, 2.0)
        return total_loss(x_hat, ref, lam, LossWeights(), 2.0, m.sched).value

    tape = T.Tape()
    x_hat, lam, leaves = model.forward(y, 2.0, tape)
    grads = tape.backward(total_loss(x_hat, ref, lam, LossWeights(), 2.0, model.sched).total)
    worst = 0.0
    for name, leaf in leaves.items():
        idx = rng.choice(base[name].size, size=min(4, base[name].size), replace=False).tolist()
        fd = numeric_grad(lambda v, name=name: loss_at({**base, name: v}), base[name], index=idx)
        a, b = grads[leaf].reshape(-1)[idx], fd.reshape(-1)[idx]
        worst = max(worst, rel_error(a, b))
    return worst < 1e-4, f"worst relative error {worst:.2e} over {len(leaves)} parameter groups"


def _lambda_bounds(rng):
    z = rng.uniform(-1, 1, size=(32, 32))
    ok = True
    for t in (0.0, 7.5, 15.0, 30.0):
        lam = map_lambda(z, t)
        ok &= bool(lam.min() >= 1e-3 and lam.max() <= lambda_max(t) + 1e-12)
    return ok, "lambda within [lambda_min, lambda_max(t)]"


def _ltvt(rng):
    a = rng.normal(size=(3, 4, 5))
    ok = np.array_equal(io.decode_ltvt(io.encode_ltvt(a)), a)
    return bool(ok), "LTVT encode/decode is exact"


CHECKS = {
    "adjoint": _adjoint,
    "zero_lambda_identity": _identity,
    "dual_feasibility": _feasibility,
    "end_to_end_gradients": _gradients,
    "lambda_bounds": _lambda_bounds,
    "ltvt_round_trip": _ltvt,
}


def run(seed: int = 0) -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        rng = np.random.default_rng(seed)
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check, not a crashed run
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
