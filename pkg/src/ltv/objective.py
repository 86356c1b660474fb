"""Training losses and image quality metrics.

The composite loss combines four families:

* image fidelity: MSE, ``1 - SSIM`` and an optional perceptual hook;
* spatial smoothness of the map: isotropic TV and an anisotropic L1 term;
* structure alignment between the map and ``|grad x_hat|``: a hinge band
  loss plus two dense L1 guidance terms;
* distribution of the map: negative standard deviation and negative
  soft-histogram entropy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .lambda_model import RampSchedule, lambda_max

EPS_NORM = 1e-8
SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
ENTROPY_BINS = 16
GUARD = 1e-12


@dataclass(frozen=True)
class LossWeights:
    w_ssim: float = 0.2
    w_perc: float = 0.0
    w_tv_lambda: float = 1e-3
    w_spatial: float = 1e-3
    w_align: float = 0.01
    w_edge: float = 0.01
    w_proj: float = 0.05
    w_var: float = 0.01
    w_ent: float = 0.05
    k_lo: float = 0.5
    k_hi: float = 2.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not 0 < self.k_lo < self.k_hi:
            raise ValueError("band coefficients need 0 < k_lo < k_hi")


# component name -> weight attribute (None means weight 1)
COMPONENTS = {
    "mse": None,
    "ssim": "w_ssim",
    "perc": "w_perc",
    "tv_lambda": "w_tv_lambda",
    "spatial": "w_spatial",
    "align": "w_align",
    "edge": "w_edge",
    "proj": "w_proj",
    "var": "w_var",
    "ent": "w_ent",
}


@dataclass
class LossReport:
    """Scalar loss (a Var when taped) plus plain-float components.

    ``components['ssim']`` holds ``1 - SSIM``; the total is the weighted sum.
    """

    total: object
    components: dict[str, float]
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def value(self) -> float:
        return float(T.value_of(self.total))

    def weighted_sum(self) -> float:
        acc = 0.0
        for name, attr in COMPONENTS.items():
            w = 1.0 if attr is None else getattr(self.weights, attr)
            acc += w * self.components[name]
        return acc

    def csv_row(self, epoch: int, step: int) -> list:
        return [epoch, step] + [self.components[k] for k in COMPONENTS] + [self.value]


LOSS_CSV_HEADER = ["epoch", "step"] + list(COMPONENTS) + ["total"]


# ------------------------------------------------------------------ fidelity


def mse(x, ref):
    return T.mean(T.square(T.sub(x, ref)))


def ssim(x, ref):
    """Mean SSIM over all valid 7x7 uniform windows (dynamic range 1)."""
    xv = T.value_of(x)
    if xv.shape[0] < SSIM_WINDOW or xv.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {xv.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    box = lambda a: T.box_filter(a, SSIM_WINDOW)  # noqa: E731
    mx, my = box(x), box(ref)
    mxx, myy, mxy = T.square(mx), T.square(my), T.mul(mx, my)
    vx = T.sub(box(T.square(x)), mxx)
    vy = T.sub(box(T.square(ref)), myy)
    cxy = T.sub(box(T.mul(x, ref)), mxy)
    num = T.mul(T.affine(mxy, 2.0, SSIM_C1), T.affine(cxy, 2.0, SSIM_C2))
    den = T.mul(T.affine(T.add(mxx, myy), 1.0, SSIM_C1), T.affine(T.add(vx, vy), 1.0, SSIM_C2))
    return T.mean(T.div(num, den))


def ssim_loss(x, ref):
    return T.affine(ssim(x, ref), -1.0, 1.0)


def psnr(x, ref) -> float:
    """PSNR in dB for [0, 1] images; ``inf`` when the images are identical."""
    err = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


# --------------------------------------------------------- map smoothness


def gradient_magnitude(x, eps: float = EPS_NORM):
    return T.pixel_norm_smooth(T.grad2d(x), eps)


def tv_of_lambda(lam, eps: float = EPS_NORM):
    return T.sum(gradient_magnitude(lam, eps))


def spatial_l1(lam):
    n = T.value_of(lam).size
    return T.affine(T.sum(T.abs(T.grad2d(lam))), 1.0 / n)


# ------------------------------------------------------ structure alignment


def proj_band_loss(lam, g, k_lo: float, k_hi: float):
    below = T.clamp(T.sub(T.affine(g, k_lo), lam), 0.0, math.inf)
    above = T.clamp(T.sub(lam, T.affine(g, k_hi)), 0.0, math.inf)
    return T.mean(T.add(T.square(below), T.square(above)))


def align_loss(lam, g):
    scale = T.div(T.mean(lam), T.clamp(T.mean(g), GUARD, math.inf))
    return T.mean(T.abs(T.sub(lam, T.mul(scale, g))))


def edge_loss(lam, g, lam_top: float):
    g_norm = T.div(g, T.clamp(T.max(g), GUARD, math.inf))
    return T.mean(T.abs(T.sub(T.affine(lam, 1.0 / lam_top), g_norm)))


# ------------------------------------------------------------- distribution


def var_loss(lam):
    return T.neg(T.std(lam))


def bin_probabilities(lam, lo: float, hi: float, bins: int = ENTROPY_BINS):
    width = (hi - lo) / bins
    centers = lo + width * (np.arange(bins) + 0.5)
    mass = T.soft_histogram(lam, centers, width)
    return T.div(mass, T.sum(mass))


def neg_entropy(p):
    """``sum p log p``; bins with vanishing mass contribute nothing."""
    return T.sum(T.mul(p, T.log(T.clamp(p, 1e-300, 1.0))))


def ent_loss(lam, lo: float, hi: float, bins: int = ENTROPY_BINS):
    return neg_entropy(bin_probabilities(lam, lo, hi, bins))


# ------------------------------------------------------------------ total


def total_loss(
    x_hat,
    ref,
    lam,
    weights: LossWeights = LossWeights(),
    t: float = 0.0,
    sched: RampSchedule = RampSchedule(),
    perceptual: Optional[Callable] = None,
) -> LossReport:
    """Weighted composite loss.

    ``perceptual(x_hat, ref)`` fills the perceptual slot; without a hook it
    contributes 0.
    """
    top = lambda_max(t, sched)
    g = gradient_magnitude(x_hat)
    terms = {
        "mse": mse(x_hat, ref),
        "ssim": ssim_loss(x_hat, ref),
        "perc": perceptual(x_hat, ref) if perceptual is not None else 0.0,
        "tv_lambda": tv_of_lambda(lam),
        "spatial": spatial_l1(lam),
        "align": align_loss(lam, g),
        "edge": edge_loss(lam, g, top),
        "proj": proj_band_loss(lam, g, weights.k_lo, weights.k_hi),
        "var": var_loss(lam),
        "ent": ent_loss(lam, sched.lambda_min, top),
    }
    total = None
    for name, attr in COMPONENTS.items():
        w = 1.0 if attr is None else getattr(weights, attr)
        if w == 0.0:
            continue
        term = T.affine(terms[name], w) if w != 1.0 else terms[name]
        total = term if total is None else T.add(total, term)
    if total is None:
        total = np.array(0.0)
    components = {k: float(T.value_of(v)) for k, v in terms.items()}
    return LossReport(total=total, components=components, weights=weights)
