"""Unrolled primal-dual TV denoiser with a per-pixel regularization map.

One iteration::

    p     <- project_{|.| <= lam}(p + sigma * grad(x_bar))
    x_new <- (x + tau * div(p) + tau * w * y) / (1 + tau * w)
    x_bar <- x_new + theta * (x_new - x)

starting from ``x = x_bar = y`` and ``p = 0``.  The step sizes come from
unconstrained raw scalars through softplus and clamping so they can be
learned.  All functions work on plain arrays or on tape Vars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError

TAU_RANGE = (1e-4, 0.5)
SIGMA_RANGE = (1e-4, 0.5)

# textbook parameters of the non-learned baseline
CLASSICAL_TAU = 0.25
CLASSICAL_SIGMA = 0.25
CLASSICAL_THETA = 1.0


def inverse_softplus(v: float) -> float:
    return math.log(math.expm1(v))


@dataclass
class SolverParams:
    """Raw learnable scalars plus the fixed data weight and iteration count.

    The raw fields may hold floats or tape Vars.  Defaults map to
    ``tau = sigma = 0.25`` and ``theta = 0.9``.
    """

    tau_raw: object = inverse_softplus(0.25)
    sigma_raw: object = inverse_softplus(0.25)
    theta_raw: object = inverse_softplus(9.0)
    sigma_data: float = 1.0
    T: int = 20

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")

    @property
    def w_data(self) -> float:
        return 1.0 / self.sigma_data


def constrain(params: SolverParams):
    """Map raw scalars to ``(tau, sigma_d, theta)`` inside their stable ranges."""
    tau = T.clamp(T.softplus(params.tau_raw), *TAU_RANGE)
    sigma = T.clamp(T.softplus(params.sigma_raw), *SIGMA_RANGE)
    sp = T.softplus(params.theta_raw)
    theta = T.clamp(T.div(sp, T.affine(sp, 1.0, 1.0)), 0.0, 1.0)
    return tau, sigma, theta


def dual_step(p, x_bar, lam, sigma):
    return T.project_l2_ball(T.add(p, T.mul(sigma, T.grad2d(x_bar))), lam)


def primal_step(x, p, y, tau, w_data: float):
    # x + (tau*div(p) + tau*w*(y - x)) / (1 + tau*w): algebraically the usual
    # prox, written so that p = 0, x = y is an exact fixed point
    tw = T.affine(tau, w_data)
    num = T.add(T.mul(tau, T.div2d(p)), T.mul(tw, T.sub(y, x)))
    return T.add(x, T.div(num, T.affine(tw, 1.0, 1.0)))


def relax_step(x_new, x, theta):
    return T.add(x_new, T.mul(theta, T.sub(x_new, x)))


def primal_dual(
    y,
    lam,
    tau,
    sigma,
    theta,
    w_data: float,
    iters: int,
    callback: Callable | None = None,
):
    """Run ``iters`` primal-dual iterations and return the final primal image.

    ``callback(k, x, x_bar, p)`` is invoked after each iteration with the
    iterates (arrays or Vars).
    """
    yv = T.value_of(y)
    if yv.ndim != 2:
        raise ValueError(f"expected an H x W image, got {yv.shape}")
    if not np.all(np.isfinite(yv)):
        raise NonFiniteError("input image is not finite")
    if np.any(T.value_of(lam) < 0):
        raise ValueError("regularization map must be nonnegative")
    x = y
    x_bar = y
    p = np.zeros((2,) + yv.shape)
    for k in range(iters):
        try:
            p = dual_step(p, x_bar, lam, sigma)
            x_new = primal_step(x, p, y, tau, w_data)
            x_bar = relax_step(x_new, x, theta)
        except NonFiniteError as exc:
            raise NonFiniteError(f"solver iteration {k}: {exc}") from exc
        x = x_new
        if callback is not None:
            callback(k, x, x_bar, p)
    return x


def unrolled_solve(y, lam, params: SolverParams, callback: Callable | None = None):
    """Denoise ``y`` with map ``lam`` using the learnable step sizes."""
    tau, sigma, theta = constrain(params)
    return primal_dual(y, lam, tau, sigma, theta, params.w_data, params.T, callback)


def classical_tv(y, lam: float, iters: int = 20, sigma_data: float = 1.0):
    """Scalar-lambda TV baseline with fixed textbook step sizes; never taped."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    y = np.asarray(T.value_of(y), dtype=np.float64)
    lam_map = np.full(y.shape, float(lam))
    return primal_dual(y, lam_map, CLASSICAL_TAU, CLASSICAL_SIGMA, CLASSICAL_THETA, 1.0 / sigma_data, iters)


def total_variation(x) -> float:
    """Isotropic TV of an image, unsmoothed."""
    return float(np.sum(T.pixel_l2_norm(T.grad2d(np.asarray(x, dtype=np.float64)))))
