"""Per-pixel regularization map: a small conv predictor and the ramped rescaling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class RampSchedule:
    lambda_min: float = 1e-3
    lambda_max_start: float = 0.40
    lambda_max_end: float = 1.50
    ramp_epochs: float = 15
    epsilon_clip: float = 1e-3


def lambda_max(t: float, sched: RampSchedule = RampSchedule()) -> float:
    """Half-cosine ease from ``lambda_max_start`` to ``lambda_max_end``."""
    if t < 0:
        raise ValueError("epoch must be nonnegative")
    if t >= sched.ramp_epochs:
        return sched.lambda_max_end
    frac = (1.0 - math.cos(math.pi * t / sched.ramp_epochs)) / 2.0
    return sched.lambda_max_start + (sched.lambda_max_end - sched.lambda_max_start) * frac


def map_lambda(z, t: float, sched: RampSchedule = RampSchedule()):
    """Rescale logits in [-1, 1] to regularization strengths.

    ``s = clip((z + 1) / 2, eps, 1 - eps)`` and
    ``lam = lambda_min + s * (lambda_max(t) - lambda_min)``.
    """
    eps = sched.epsilon_clip
    s = T.clamp(T.affine(z, 0.5, 0.5), eps, 1.0 - eps)
    top = lambda_max(t, sched)
    return T.affine(s, top - sched.lambda_min, sched.lambda_min)


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 4
    channels: int = 16
    kernel: int = 3
    two_scale: bool = False
    head_scale: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        chans = [1] + [self.channels] * (self.depth - 1) + [1]
        return [(chans[i + 1], chans[i], self.kernel, self.kernel) for i in range(self.depth)]


class ConvPredictor:
    """Stack of same-padded convolutions with tanh between layers and a tanh head.

    With ``two_scale`` the same stack also runs on a 2x average-pooled input;
    the upsampled coarse logits are blended with the full-resolution logits
    through a learned weight clamped to [0, 1].

    Any object with ``init_weights(rng)``, ``weight_names()`` and
    ``__call__(y, weights)`` can stand in for this class.
    """

    def __init__(self, config: PredictorConfig = PredictorConfig()):
        self.config = config

    def weight_names(self) -> list[str]:
        names = []
        for i in range(self.config.depth):
            names += [f"conv{i}.weight", f"conv{i}.bias"]
        if self.config.two_scale:
            names.append("fuse")
        return names

    def init_weights(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        w = {}
        shapes = self.config.layer_shapes()
        for i, shape in enumerate(shapes):
            bound = 1.0 / math.sqrt(shape[1] * shape[2] * shape[3])
            k = rng.uniform(-bound, bound, size=shape)
            if i == len(shapes) - 1:
                k *= self.config.head_scale
            w[f"conv{i}.weight"] = k
            w[f"conv{i}.bias"] = np.zeros(shape[0])
        if self.config.two_scale:
            w["fuse"] = np.array(0.5)
        return w

    def check_weights(self, weights: dict) -> None:
        shapes = self.config.layer_shapes()
        for i, shape in enumerate(shapes):
            for name, expect in ((f"conv{i}.weight", shape), (f"conv{i}.bias", (shape[0],))):
                if name not in weights:
                    raise ValueError(f"missing predictor weight {name}")
                got = T.value_of(weights[name]).shape
                if got != expect:
                    raise ValueError(f"{name}: shape {got} does not match config {expect}")
        if self.config.two_scale and "fuse" not in weights:
            raise ValueError("missing predictor weight fuse")

    def _logits(self, h, weights):
        n = self.config.depth
        for i in range(n):
            h = T.conv2d(h, weights[f"conv{i}.weight"], weights[f"conv{i}.bias"])
            if i < n - 1:
                h = T.tanh(h)
        return h

    def __call__(self, y, weights):
        """Logit map ``z`` in [-1, 1] with the shape of ``y``."""
        self.check_weights(weights)
        yv = T.value_of(y)
        if yv.ndim != 2:
            raise ValueError(f"predictor expects an H x W image, got {yv.shape}")
        x = T.reshape(y, (1,) + yv.shape)
        a = self._logits(x, weights)
        if self.config.two_scale:
            coarse = T.upsample2(self._logits(T.avg_pool2(x), weights))
            alpha = T.clamp(weights["fuse"], 0.0, 1.0)
            a = T.add(T.mul(T.affine(alpha, -1.0, 1.0), a), T.mul(alpha, coarse))
        return T.tanh(T.reshape(a, yv.shape))


def predict_logits(y, config: PredictorConfig, weights):
    return ConvPredictor(config)(y, weights)
