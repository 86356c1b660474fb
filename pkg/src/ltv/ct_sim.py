"""Synthetic low-dose CT pairs: phantoms, parallel-beam projection, dose noise, FBP.

Image coordinates put the origin at the image centre with ``x`` to the right
(column) and ``y`` up (decreasing row).  A ray at angle ``theta`` and detector
offset ``t`` collects the points with ``x cos(theta) + y sin(theta) = t``.
Angles are ``a * pi / A`` for ``a = 0 .. A-1``; detector bins are equally
spaced (configurable pitch) and centred on the rotation axis.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from . import io

INTENSITIES = np.round(np.arange(0.2, 0.91, 0.1), 10)
MAX_ATTENUATION = 4.0


# -------------------------------------------------------------------- phantoms


@dataclass
class Primitive:
    kind: str  # "ellipse" | "rectangle"
    center: tuple[float, float]  # (x, y) in centred pixel units
    axes: tuple[float, float]  # semi-axes / half-widths
    angle: float  # radians
    intensity: float

    def mask(self, h: int, w: int) -> np.ndarray:
        x, y = pixel_coords(h, w)
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - self.center[0], y - self.center[1]
        u = c * dx + s * dy
        v = -s * dx + c * dy
        if self.kind == "ellipse":
            return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0
        return (np.abs(u) <= self.axes[0]) & (np.abs(v) <= self.axes[1])


@dataclass
class Phantom:
    image: np.ndarray
    description: list[Primitive]
    textured: bool = False


def pixel_coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.arange(w) - (w - 1) / 2.0
    y = (h - 1) / 2.0 - np.arange(h)
    return np.broadcast_to(x[None, :], (h, w)), np.broadcast_to(y[:, None], (h, w))


def texture_pattern(h: int, w: int, rng: np.random.Generator, amplitude: float = 0.1) -> np.ndarray:
    """Fine oblique grating (period 3-5 px) with a random orientation."""
    x, y = pixel_coords(h, w)
    ang = rng.uniform(0, math.pi)
    period = rng.uniform(3.0, 5.0)
    return amplitude * np.sin(2 * math.pi * (x * math.cos(ang) + y * math.sin(ang)) / period)


def make_phantom(h: int, w: int, n_primitives: int = 6, seed: int = 0, textured: bool = False) -> Phantom:
    """Piecewise-constant phantom; the first primitive is a centred body ellipse.

    Later primitives are painted over earlier ones.  With ``textured`` one
    extra rectangular patch receives a fine grating on top of the pieces.
    """
    if n_primitives < 1:
        raise ValueError("need at least one primitive")
    rng = np.random.default_rng(seed)
    img = np.zeros((h, w))
    prims = [
        Primitive(
            "ellipse",
            (0.0, 0.0),
            (rng.uniform(0.38, 0.47) * w, rng.uniform(0.38, 0.47) * h),
            0.0,
            float(rng.choice(INTENSITIES[:3])),
        )
    ]
    for _ in range(n_primitives - 1):
        kind = "ellipse" if rng.random() < 0.6 else "rectangle"
        center = (rng.uniform(-0.25, 0.25) * w, rng.uniform(-0.25, 0.25) * h)
        axes = (rng.uniform(0.05, 0.2) * w, rng.uniform(0.05, 0.2) * h)
        prims.append(Primitive(kind, center, axes, float(rng.uniform(0, math.pi)), float(rng.choice(INTENSITIES))))
    for prim in prims:
        img[prim.mask(h, w)] = prim.intensity
    if textured:
        patch = Primitive(
            "rectangle",
            (rng.uniform(-0.15, 0.15) * w, rng.uniform(-0.15, 0.15) * h),
            (rng.uniform(0.15, 0.22) * w, rng.uniform(0.15, 0.22) * h),
            0.0,
            0.0,
        )
        m = patch.mask(h, w) & prims[0].mask(h, w)
        img[m] += texture_pattern(h, w, rng)[m]
    return Phantom(np.clip(img, 0.0, 1.0), prims, textured)


def disk_image(h: int, w: int, radius: float, intensity: float = 1.0, supersample: int = 8) -> np.ndarray:
    """Area-weighted (anti-aliased) centred disk."""
    n = supersample
    off = (np.arange(n) + 0.5) / n - 0.5
    x, y = pixel_coords(h, w)
    acc = np.zeros((h, w))
    for dy in off:
        for dx in off:
            acc += ((x + dx) ** 2 + (y + dy) ** 2) <= radius * radius
    return intensity * acc / (n * n)


# ------------------------------------------------------------------ projection


@dataclass
class Sinogram:
    values: np.ndarray  # A x D
    angles: np.ndarray
    image_shape: tuple[int, int]
    spacing: float = 1.0


def default_detectors(h: int, w: int, spacing: float = 1.0) -> int:
    return int(math.ceil(math.hypot(h, w) / spacing)) + 2


def detector_positions(d: int, spacing: float = 1.0) -> np.ndarray:
    return (np.arange(d) - (d - 1) / 2.0) * spacing


@functools.lru_cache(maxsize=8)
def projection_matrix(h: int, w: int, n_angles: int, n_det: int, spacing: float = 1.0) -> sp.csr_matrix:
    """Sparse ray-driven projector: unit-step samples, bilinear weights."""
    angles = np.arange(n_angles) * math.pi / n_angles
    t = detector_positions(n_det, spacing)
    half = math.hypot(h, w) / 2.0 + 1.0
    s = np.arange(-math.ceil(half), math.ceil(half) + 1, dtype=np.float64)
    blocks = []
    for th in angles:
        c, sn = math.cos(th), math.sin(th)
        x = t[:, None] * c - s[None, :] * sn
        y = t[:, None] * sn + s[None, :] * c
        col = x + (w - 1) / 2.0
        row = (h - 1) / 2.0 - y
        c0, r0 = np.floor(col), np.floor(row)
        fc, fr = col - c0, row - r0
        rays = np.broadcast_to(np.arange(n_det)[:, None], col.shape)
        rr, cc, ww, ray_idx = [], [], [], []
        for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
            ri, ci = r0 + dr, c0 + dc
            ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w) & (wt > 0)
            rr.append(ri[ok])
            cc.append(ci[ok])
            ww.append(wt[ok])
            ray_idx.append(rays[ok])
        pix = (np.concatenate(rr) * w + np.concatenate(cc)).astype(np.int64)
        blk = sp.coo_matrix((np.concatenate(ww), (np.concatenate(ray_idx), pix)), shape=(n_det, h * w))
        blocks.append(blk.tocsr())
    return sp.vstack(blocks, format="csr")


def radon(image, n_angles: int = 180, n_det: Optional[int] = None, spacing: float = 1.0) -> Sinogram:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    d = default_detectors(h, w, spacing) if n_det is None else n_det
    if d * spacing < math.hypot(h, w):
        raise ValueError(f"{d} detector bins do not cover the image diagonal")
    m = projection_matrix(h, w, n_angles, d, spacing)
    vals = (m @ img.reshape(-1)).reshape(n_angles, d)
    return Sinogram(vals, np.arange(n_angles) * math.pi / n_angles, (h, w), spacing)


def backproject(sino: Sinogram) -> np.ndarray:
    """Exact transpose of :func:`radon`."""
    h, w = sino.image_shape
    a, d = sino.values.shape
    m = projection_matrix(h, w, a, d, sino.spacing)
    return (m.T @ sino.values.reshape(-1)).reshape(h, w)


def ramp_filter(n_pad: int) -> np.ndarray:
    """Ram-Lak frequency response built from its discrete spatial kernel."""
    n = np.concatenate((np.arange(1, n_pad // 2 + 1, 2), np.arange(n_pad // 2 - 1, 0, -2)))
    h = np.zeros(n_pad)
    h[0] = 0.25
    h[1::2] = -1.0 / (np.pi * n) ** 2
    return np.real(np.fft.fft(h))


def filter_sinogram(values: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    d = values.shape[1]
    n_pad = max(64, 1 << int(math.ceil(math.log2(2 * d))))
    f = np.fft.fft(values, n=n_pad, axis=1) * ramp_filter(n_pad)[None, :]
    return np.real(np.fft.ifft(f, axis=1))[:, :d] / spacing


def fbp(sino: Sinogram, clip: bool = True) -> np.ndarray:
    """Ramp-filtered, pixel-driven linear-interpolation back-projection."""
    h, w = sino.image_shape
    a, d = sino.values.shape
    filt = filter_sinogram(sino.values, sino.spacing)
    t = detector_positions(d, sino.spacing)
    x, y = pixel_coords(h, w)
    out = np.zeros((h, w))
    for k, th in enumerate(sino.angles):
        tp = x * math.cos(th) + y * math.sin(th)
        out += np.interp(tp, t, filt[k], left=0.0, right=0.0)
    out *= math.pi / a
    return np.clip(out, 0.0, 1.0) if clip else out


# ----------------------------------------------------------------------- noise


@dataclass(frozen=True)
class NoiseConfig:
    n0: float = 4096.0
    dose_fraction: float = 0.10
    mode: str = "sinogram"
    gaussian_sigma: float = 0.08
    seed: int = 0
    mu: Optional[float] = None  # None: scale so the thickest ray is ~4 mean free paths
    n_angles: int = 180
    detector_spacing: float = 0.5

    def __post_init__(self):
        if not 0 < self.dose_fraction <= 1:
            raise ValueError("dose_fraction must lie in (0, 1]")
        if self.n0 * self.dose_fraction < 1:
            raise ValueError("n0 * dose_fraction must be at least 1")
        if self.mode not in ("sinogram", "image"):
            raise ValueError(f"unknown noise mode {self.mode!r}")

    @property
    def photons(self) -> float:
        return self.n0 * self.dose_fraction


def _poisson_inversion(mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(mean.shape)
    k = np.zeros(mean.shape, dtype=np.int64)
    p = np.exp(-mean)
    cdf = p.copy()
    active = u > cdf
    step = 0
    while active.any() and step < 1000:
        step += 1
        idx = np.nonzero(active)[0]
        k[idx] += 1
        p[idx] *= mean[idx] / k[idx]
        cdf[idx] += p[idx]
        active[idx] = u[idx] > cdf[idx]
    return k


def _poisson_ptrs(mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # transformed rejection with squeeze (Hormann 1993), valid for mean >= 10
    out = np.zeros(mean.shape, dtype=np.int64)
    pending = np.arange(mean.size)
    slam = np.sqrt(mean)
    loglam = np.log(mean)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2)
    while pending.size:
        m, aa, bb = mean[pending], a[pending], b[pending]
        uu = rng.random(pending.size) - 0.5
        vv = rng.random(pending.size)
        us = 0.5 - np.abs(uu)
        k = np.floor((2 * aa / us + bb) * uu + m + 0.43)
        accept = (us >= 0.07) & (vv <= vr[pending])
        reject = (k < 0) | ((us < 0.013) & (vv > us))
        with np.errstate(divide="ignore", invalid="ignore"):
            lhs = np.log(vv * inv_alpha[pending] / (aa / (us * us) + bb))
            rhs = -m + k * loglam[pending] - gammaln(np.maximum(k, 0) + 1)
        accept |= ~reject & (lhs <= rhs)
        out[pending[accept]] = k[accept].astype(np.int64)
        pending = pending[~accept]
    return out


def poisson(mean, rng: np.random.Generator) -> np.ndarray:
    """Seeded Poisson draws: inversion below mean 30, PTRS rejection above."""
    mean = np.asarray(mean, dtype=np.float64)
    flat = mean.reshape(-1)
    if np.any(flat < 0):
        raise ValueError("Poisson mean must be nonnegative")
    out = np.zeros(flat.size, dtype=np.int64)
    small = flat < 30
    if small.any():
        out[small] = _poisson_inversion(flat[small], rng)
    if (~small).any():
        out[~small] = _poisson_ptrs(flat[~small], rng)
    return out.reshape(mean.shape)


def attenuation_scale(sino: Sinogram, cfg: NoiseConfig) -> float:
    if cfg.mu is not None:
        return cfg.mu
    top = float(sino.values.max())
    return MAX_ATTENUATION / top if top > 0 else 1.0


def apply_dose_noise(sino: Sinogram, cfg: NoiseConfig) -> Sinogram:
    """Beer-Lambert photon counts with Poisson noise, mapped back to line integrals."""
    mu = attenuation_scale(sino, cfg)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.photons
    counts = poisson(n * np.exp(-mu * sino.values), rng).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    noisy = -np.log(counts / n) / mu
    return Sinogram(noisy, sino.angles, sino.image_shape, sino.spacing)


def image_domain_noise(image, cfg: NoiseConfig) -> np.ndarray:
    """Scaled Poisson plus Gaussian noise applied directly to the image."""
    img = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.photons
    out = poisson(np.clip(img, 0, None) * n, rng) / n
    if cfg.gaussian_sigma > 0:
        out = out + cfg.gaussian_sigma * rng.standard_normal(img.shape)
    return np.clip(out, 0.0, 1.0)


def simulate(image, cfg: NoiseConfig) -> np.ndarray:
    """Noisy counterpart of a clean image under ``cfg``."""
    if cfg.mode == "image":
        return image_domain_noise(image, cfg)
    sino = radon(image, cfg.n_angles, spacing=cfg.detector_spacing)
    return fbp(apply_dose_noise(sino, cfg))


# --------------------------------------------------------------------- dataset


@dataclass
class Dataset:
    clean: list[np.ndarray]
    noisy: list[np.ndarray]
    textured: list[bool]
    n_train: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.clean)

    @property
    def train(self) -> range:
        return range(self.n_train)

    @property
    def val(self) -> range:
        return range(self.n_train, len(self.clean))


def make_dataset(
    n_train: int,
    n_val: int,
    size: int = 64,
    cfg: NoiseConfig = NoiseConfig(),
    seed: int = 0,
    n_primitives: int = 6,
    textured_every: int = 2,
) -> Dataset:
    """Paired phantoms; image ``i`` uses seed ``seed ^ i`` (noise: ``cfg.seed ^ i``).

    Every ``textured_every``-th image carries the texture overlay (0 disables it).
    """
    clean, noisy, tex = [], [], []
    for i in range(n_train + n_val):
        textured = textured_every > 0 and i % textured_every == 1
        ph = make_phantom(size, size, n_primitives, seed ^ i, textured)
        clean.append(ph.image)
        tex.append(textured)
        noisy.append(simulate(ph.image, _with_seed(cfg, cfg.seed ^ i)))
    meta = {
        "n0": cfg.n0,
        "dose_fraction": cfg.dose_fraction,
        "mode": cfg.mode,
        "gaussian_sigma": cfg.gaussian_sigma,
        "seed": cfg.seed,
        "mu": "auto" if cfg.mu is None else cfg.mu,
        "n_angles": cfg.n_angles,
        "detector_spacing": cfg.detector_spacing,
        "phantom_seed": seed,
        "size": size,
        "n_train": n_train,
        "n_val": n_val,
        "textured": ",".join(str(i) for i, t in enumerate(tex) if t),
    }
    return Dataset(clean, noisy, tex, n_train, meta)


def _with_seed(cfg: NoiseConfig, seed: int) -> NoiseConfig:
    return replace(cfg, seed=seed)


def write_dataset(directory, ds: Dataset) -> Path:
    d = Path(directory)
    (d / "clean").mkdir(parents=True, exist_ok=True)
    (d / "noisy").mkdir(parents=True, exist_ok=True)
    for i, (c, n) in enumerate(zip(ds.clean, ds.noisy)):
        io.save_pgm(d / "clean" / f"{i:04d}.pgm", c)
        io.save_pgm(d / "noisy" / f"{i:04d}.pgm", n)
    io.write_kv(d / "meta.txt", ds.meta)
    return d


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    meta = io.read_kv(d / "meta.txt")
    files = sorted((d / "clean").glob("*.pgm"))
    clean = [io.load_pgm(f) for f in files]
    noisy = [io.load_pgm(d / "noisy" / f.name) for f in files]
    tex_idx = {int(s) for s in meta.get("textured", "").split(",") if s}
    n_train = int(meta.get("n_train", len(clean)))
    return Dataset(clean, noisy, [i in tex_idx for i in range(len(clean))], n_train, meta)
