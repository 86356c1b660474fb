import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from ltv import tensor as T
from ltv.ct_sim import NoiseConfig, make_dataset
from ltv.gradcheck import check_grad, numeric_grad
from ltv.lambda_model import RampSchedule, lambda_max
from ltv.objective import (
    COMPONENTS,
    LOSS_CSV_HEADER,
    LossWeights,
    align_loss,
    bin_probabilities,
    edge_loss,
    ent_loss,
    gradient_magnitude,
    mse,
    neg_entropy,
    proj_band_loss,
    psnr,
    spatial_l1,
    ssim,
    ssim_loss,
    total_loss,
    tv_of_lambda,
    var_loss,
)
from ltv.solver import SolverParams, unrolled_solve

from oracles import ssim_reference

ZERO = LossWeights(**{f: 0.0 for f in COMPONENTS.values() if f})


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# --------------------------------------------------------------------- mse


def test_mse_values(rng):
    x = rng.uniform(size=(4, 4))
    assert mse(x, x) == 0
    assert mse(np.ones((2, 2)), np.zeros((2, 2))) == 1


def test_mse_gradient(rng):
    x, ref = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    tape = T.Tape()
    xv = tape.var(x)
    tape.backward(mse(xv, ref))
    np.testing.assert_allclose(xv.grad, 2 * (x - ref) / x.size, rtol=1e-14)
    fd = numeric_grad(lambda a: mse(a, ref), x)
    np.testing.assert_allclose(xv.grad, fd, rtol=1e-6, atol=1e-10)


# -------------------------------------------------------------------- ssim


def test_ssim_identity(rng):
    x = rng.uniform(size=(12, 12))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_checkerboard_complement_negative():
    x = (np.indices((12, 12)).sum(axis=0) % 2).astype(float)
    assert ssim(x, 1 - x) < 0


def test_ssim_constant_shift_matches_reference():
    x = np.full((10, 10), 0.4)
    y = x + 0.1
    assert ssim(x, y) == pytest.approx(ssim_reference(x, y), abs=1e-6)


def test_ssim_random_matches_reference(rng):
    x, y = rng.uniform(size=(11, 9)), rng.uniform(size=(11, 9))
    assert ssim(x, y) == pytest.approx(ssim_reference(x, y), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((6, 10)), np.zeros((6, 10)))


def test_ssim_loss_complement(rng):
    x, y = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    assert ssim_loss(x, y) == pytest.approx(1 - ssim(x, y), abs=1e-15)


# -------------------------------------------------------------------- psnr


def test_psnr_values(rng):
    x = rng.uniform(size=(4, 4))
    assert psnr(x, x) == math.inf
    assert psnr(np.full((2, 2), 0.1), np.zeros((2, 2))) == pytest.approx(20.0, abs=1e-12)


def test_psnr_matches_image_noise_model():
    # image-domain noise: per-pixel N(0, x/n + s^2) clipped to [0, 1]; the
    # expected squared error of a clipped Gaussian has a closed form
    cfg = NoiseConfig(mode="image", seed=11)
    ds = make_dataset(0, 6, 64, cfg, seed=3)
    n, s = cfg.photons, cfg.gaussian_sigma
    observed, predicted = [], []
    for clean, noisy in zip(ds.clean, ds.noisy):
        sd = np.sqrt(clean / n + s * s)
        a, b = (0 - clean) / sd, (1 - clean) / sd  # clip limits in std units
        # E[clip(Z)^2] for Z ~ N(0, 1) on [a, b], tails collapsed onto the limits
        inner = (norm.cdf(b) - norm.cdf(a)) - (b * norm.pdf(b) - a * norm.pdf(a))
        m2 = sd * sd * (inner + a * a * norm.cdf(a) + b * b * norm.sf(b))
        predicted.append(10 * np.log10(1 / m2.mean()))
        observed.append(psnr(noisy, clean))
    assert abs(np.mean(observed) - np.mean(predicted)) < 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_symmetry(seed):
    r = np.random.default_rng(seed)
    x, y = r.uniform(size=(9, 9)), r.uniform(size=(9, 9))
    assert mse(x, y) == mse(y, x)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-14)
    assert psnr(x, y) == psnr(y, x)


# --------------------------------------------------------------- smoothness


def test_tv_lambda_constant():
    assert tv_of_lambda(np.full((5, 5), 0.3)) <= 25 * 1e-8 + 1e-20


def test_tv_lambda_vertical_step():
    lam = np.array([[0.0, 0.0], [1.0, 1.0]])
    # two unit vertical differences; the other six entries contribute eps each
    assert tv_of_lambda(lam) == pytest.approx(2.0, abs=1e-7)


@pytest.mark.parametrize("c", [0.5, 3.0, 17.0])
def test_tv_lambda_homogeneous(rng, c):
    lam = rng.uniform(size=(8, 8))
    assert tv_of_lambda(c * lam, eps=1e-12) == pytest.approx(c * tv_of_lambda(lam, eps=1e-12), rel=1e-6)


def test_spatial_l1_values():
    assert spatial_l1(np.full((3, 3), 2.0)) == 0
    assert spatial_l1(np.array([[0.0, 1.0]])) == 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_spatial_l1_nonnegative(seed):
    assert spatial_l1(np.random.default_rng(seed).normal(size=(6, 6))) >= 0


# ---------------------------------------------------------------- alignment


def test_band_boundary_zero(rng):
    g = rng.uniform(0.1, 1, size=(6, 6))
    assert proj_band_loss(0.5 * g, g, 0.5, 2.0) == 0


def test_band_arithmetic():
    assert proj_band_loss(np.full((3, 3), 0.2), np.zeros((3, 3)), 0.5, 2.0) == pytest.approx(0.04, rel=1e-14)


def test_band_flat_inside(rng):
    g = rng.uniform(0.1, 1, size=(6, 6))
    tape = T.Tape()
    lam = tape.var(1.2 * g)
    tape.backward(proj_band_loss(lam, g, 0.5, 2.0))
    assert np.all(lam.grad == 0)


def test_align_exact_scale(rng):
    g = rng.uniform(0.1, 1, size=(6, 6))
    assert align_loss(0.37 * g, g) == pytest.approx(0.0, abs=1e-15)


def test_edge_constant_maps():
    lam = np.full((4, 4), 0.3)
    g = np.full((4, 4), 2.0)
    assert edge_loss(lam, g, 1.2) == pytest.approx(abs(0.3 / 1.2 - 1), rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_alignment_nonnegative(seed):
    r = np.random.default_rng(seed)
    lam, g = r.uniform(0, 1.5, size=(6, 6)), r.uniform(0, 1, size=(6, 6))
    assert align_loss(lam, g) >= 0
    assert edge_loss(lam, g, 1.5) >= 0
    assert proj_band_loss(lam, g, 0.5, 2.0) >= 0


# ------------------------------------------------------------- distribution


def test_var_loss_values():
    assert abs(var_loss(np.full((4, 4), 0.6))) < 1e-15
    assert var_loss(np.array([0.0, 0.0, 1.0, 1.0])) == -0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_var_loss_nonpositive(seed):
    assert var_loss(np.random.default_rng(seed).normal(size=10)) <= 0


def test_neg_entropy_extremes():
    one_hot = np.zeros(16)
    one_hot[3] = 1.0
    assert neg_entropy(one_hot) == 0.0
    nearly = np.full(16, 1e-9)
    nearly[3] = 1 - 15e-9
    assert -1e-6 < neg_entropy(nearly) < 0
    assert neg_entropy(np.full(16, 1 / 16)) == pytest.approx(-math.log(16), abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_neg_entropy_bounds(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(16))
    v = neg_entropy(p)
    assert -math.log(16) - 1e-12 <= v <= 0


def test_bin_probabilities_normalized(rng):
    p = bin_probabilities(rng.uniform(0, 1.5, size=(8, 8)), 1e-3, 1.5)
    assert p.shape == (16,)
    assert p.sum() == pytest.approx(1.0, abs=1e-14)


def test_ent_loss_gradient(rng):
    lam = rng.uniform(0.0, 1.5, size=(8, 8))
    assert check_grad(lambda a: ent_loss(a, 1e-3, 1.5), [lam])[0] < 1e-4


# ---------------------------------------------------------------- gradients

TERMS = {
    "ssim": lambda x, lam, ref, g: ssim_loss(x, ref),
    "tv_lambda": lambda x, lam, ref, g: tv_of_lambda(lam),
    "spatial": lambda x, lam, ref, g: spatial_l1(lam),
    "proj": lambda x, lam, ref, g: proj_band_loss(lam, gradient_magnitude(x), 0.5, 2.0),
    "align": lambda x, lam, ref, g: align_loss(lam, gradient_magnitude(x)),
    "edge": lambda x, lam, ref, g: edge_loss(lam, gradient_magnitude(x), 1.5),
    "var": lambda x, lam, ref, g: var_loss(lam),
    "ent": lambda x, lam, ref, g: ent_loss(lam, 1e-3, 1.5),
}


@pytest.mark.parametrize("name", sorted(TERMS))
def test_term_gradients(rng, name):
    x = rng.uniform(size=(8, 8))
    lam = rng.uniform(0.05, 1.4, size=(8, 8))
    ref = rng.uniform(size=(8, 8))
    errs = check_grad(lambda a, b: TERMS[name](a, b, ref, None), [x, lam])
    assert max(errs) < 1e-4


@pytest.mark.parametrize("name", sorted(TERMS))
def test_degenerate_inputs_are_finite(name):
    x = np.full((8, 8), 0.5)
    lam = np.full((8, 8), 0.2)
    tape = T.Tape()
    xv, lv = tape.var(x), tape.var(lam)
    loss = TERMS[name](xv, lv, x, None)
    grads = tape.backward(loss)
    assert np.isfinite(loss.value)
    assert np.all(np.isfinite(grads[xv])) and np.all(np.isfinite(grads[lv]))


# -------------------------------------------------------------------- total


def test_total_fidelity_only_identical(rng):
    x = rng.uniform(size=(8, 8))
    rep = total_loss(x, x, np.full((8, 8), 0.1), ZERO)
    assert rep.value == 0


def test_weights_validation():
    assert LossWeights().w_ent == 0.05
    with pytest.raises(ValueError):
        LossWeights(w_ssim=-1.0)
    with pytest.raises(ValueError):
        LossWeights(w_edge=math.nan)
    with pytest.raises(ValueError):
        LossWeights(k_lo=2.0, k_hi=1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 20))
def test_report_identity(seed, t):
    r = np.random.default_rng(seed)
    x, ref = r.uniform(size=(8, 8)), r.uniform(size=(8, 8))
    lam = r.uniform(1e-3, lambda_max(t), size=(8, 8))
    w = LossWeights(*r.uniform(0, 1, size=9))
    rep = total_loss(x, ref, lam, w, t, perceptual=lambda a, b: mse(a, b))
    assert rep.value == pytest.approx(rep.weighted_sum(), rel=1e-12)


def test_perceptual_hook_defaults_to_zero(rng):
    x, ref = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    rep = total_loss(x, ref, np.full((8, 8), 0.2), replace(LossWeights(), w_perc=1.0))
    assert rep.components["perc"] == 0.0


def test_csv_row_layout(rng):
    x, ref = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    rep = total_loss(x, ref, np.full((8, 8), 0.2))
    row = rep.csv_row(3, 17)
    assert len(row) == len(LOSS_CSV_HEADER)
    assert row[:2] == [3, 17] and row[-1] == rep.value


def test_end_to_end_lambda_pixel_gradient(rng):
    y = rng.uniform(size=(8, 8))
    ref = np.clip(y + 0.05 * rng.normal(size=(8, 8)), 0, 1)
    lam0 = rng.uniform(0.05, 0.5, size=(8, 8))
    params = SolverParams(T=3)
    sched = RampSchedule()

    def build(lam):
        return total_loss(unrolled_solve(y, lam, params), ref, lam, LossWeights(), 2.0, sched).total

    tape = T.Tape()
    lv = tape.var(lam0)
    tape.backward(build(lv))
    idx = [int(i) for i in rng.choice(64, size=5, replace=False)]
    fd = numeric_grad(build, lam0, index=idx)
    a, b = lv.grad.reshape(-1)[idx], fd.reshape(-1)[idx]
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-4
