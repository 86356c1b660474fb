import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltv import ct_sim as C
from ltv.objective import psnr

from oracles import chord_length, ellipse_raster


# ------------------------------------------------------------------ phantoms


def test_phantom_deterministic():
    a = C.make_phantom(32, 40, seed=9, textured=True)
    b = C.make_phantom(32, 40, seed=9, textured=True)
    assert np.array_equal(a.image, b.image)
    assert a.description == b.description


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(1, 10), st.booleans())
def test_phantom_range(seed, n, textured):
    ph = C.make_phantom(24, 24, n, seed, textured)
    assert ph.image.min() >= 0 and ph.image.max() <= 1
    assert len(ph.description) == n
    assert all(p.intensity in C.INTENSITIES for p in ph.description)


def test_single_primitive_matches_raster():
    ph = C.make_phantom(33, 48, n_primitives=1, seed=2)
    body = ph.description[0]
    assert body.kind == "ellipse" and body.center == (0.0, 0.0)
    ref = ellipse_raster(33, 48, *body.axes)
    got = ph.image > 0
    iou = np.sum(got & ref) / np.sum(got | ref)
    assert iou == 1.0


def test_phantom_needs_a_primitive():
    with pytest.raises(ValueError):
        C.make_phantom(8, 8, n_primitives=0)


def test_texture_changes_only_inside_body():
    plain = C.make_phantom(48, 48, seed=5).image
    tex = C.make_phantom(48, 48, seed=5, textured=True).image
    assert not np.array_equal(plain, tex)
    assert np.all(tex[plain == 0] == 0)


# ---------------------------------------------------------------- projection


def test_zero_image_zero_sinogram():
    assert np.all(C.radon(np.zeros((16, 16)), 30).values == 0)


def test_disk_chord_profile():
    # relative to the peak chord, over all bins except the 1-px rim where the
    # chord's slope is unbounded and bilinear sampling cannot follow it
    r, level = 20.0, 0.8
    img = C.disk_image(64, 64, r, level)
    sino = C.radon(img, 180, n_det=128, spacing=1.0)
    t = C.detector_positions(128, 1.0)
    ref = level * chord_length(t, r)
    err = np.abs(sino.values - ref[None, :]) / ref.max()
    assert err[:, np.abs(t) <= r - 1].max() < 0.02


def test_rotation_permutes_rows():
    img = C.make_phantom(32, 32, seed=4).image
    a = C.radon(img, 180).values
    b = C.radon(np.rot90(img), 180).values
    np.testing.assert_allclose(b[90:], a[:90], atol=1e-10)
    np.testing.assert_allclose(b[:90], a[90:, ::-1], atol=1e-10)


@pytest.mark.parametrize("spacing", [1.0, 0.5])
def test_projector_adjoint(spacing):
    r = np.random.default_rng(8)
    for _ in range(5):
        x = r.normal(size=(16, 16))
        sino = C.radon(x, 24, spacing=spacing)
        s = r.normal(size=sino.values.shape)
        lhs = np.sum(sino.values * s)
        rhs = np.sum(x * C.backproject(C.Sinogram(s, sino.angles, (16, 16), spacing)))
        assert abs(lhs - rhs) <= 1e-6 * abs(lhs)


def test_detector_coverage_enforced():
    with pytest.raises(ValueError):
        C.radon(np.zeros((32, 32)), 10, n_det=20)


# ----------------------------------------------------------------------- fbp


def test_fbp_zero():
    sino = C.Sinogram(np.zeros((30, 50)), np.arange(30) * math.pi / 30, (16, 16))
    assert np.all(C.fbp(sino) == 0)


def test_fbp_linear():
    img = C.make_phantom(32, 32, seed=1).image
    sino = C.radon(img, 60)
    scaled = C.Sinogram(2.5 * sino.values, sino.angles, sino.image_shape, sino.spacing)
    np.testing.assert_allclose(C.fbp(scaled, clip=False), 2.5 * C.fbp(sino, clip=False), rtol=1e-12, atol=1e-12)


def test_fbp_disk_round_trip():
    img = C.disk_image(64, 64, 20.0, 0.8)
    assert psnr(C.fbp(C.radon(img, 180)), img) > 25


# --------------------------------------------------------------------- noise


def test_noise_config_validation():
    with pytest.raises(ValueError):
        C.NoiseConfig(dose_fraction=0.0)
    with pytest.raises(ValueError):
        C.NoiseConfig(dose_fraction=1.5)
    with pytest.raises(ValueError):
        C.NoiseConfig(n0=5, dose_fraction=0.1)
    with pytest.raises(ValueError):
        C.NoiseConfig(mode="fan")


@pytest.mark.parametrize("mean", [0.5, 4.0, 29.0, 30.0, 400.0, 1e6])
def test_poisson_moments(mean):
    draws = C.poisson(np.full(200_000, mean), np.random.default_rng(3))
    se = math.sqrt(mean / draws.size)
    assert abs(draws.mean() - mean) < 5 * se
    assert draws.var() == pytest.approx(mean, rel=0.03)


def test_poisson_small_mean_pmf():
    draws = C.poisson(np.full(200_000, 2.0), np.random.default_rng(4))
    for k in range(5):
        pmf = math.exp(-2.0) * 2.0**k / math.factorial(k)
        assert np.mean(draws == k) == pytest.approx(pmf, abs=0.005)


def test_poisson_seeded():
    m = np.linspace(0, 100, 50)
    assert np.array_equal(C.poisson(m, np.random.default_rng(1)), C.poisson(m, np.random.default_rng(1)))


def test_dose_noise_vanishing_limit():
    sino = C.radon(C.make_phantom(32, 32, seed=0).image, 60)
    out = C.apply_dose_noise(sino, C.NoiseConfig(n0=1e12, dose_fraction=1.0))
    assert np.sqrt(np.mean((out.values - sino.values) ** 2)) < 1e-4


def test_dose_noise_delta_method_variance():
    s, mu = 2.0, 0.5
    sino = C.Sinogram(np.full((100, 100), s), np.zeros(100), (8, 8))
    cfg = C.NoiseConfig(n0=4096, dose_fraction=0.1, mu=mu, seed=12)
    noisy = C.apply_dose_noise(sino, cfg).values
    predicted = math.exp(mu * s) / (cfg.photons * mu * mu)
    assert noisy.var() == pytest.approx(predicted, rel=0.10)


def test_dose_noise_seeded_and_starvation_safe():
    sino = C.Sinogram(np.full((10, 10), 50.0), np.zeros(10), (4, 4))
    cfg = C.NoiseConfig(n0=10, dose_fraction=0.1, mu=1.0, seed=3)
    a, b = C.apply_dose_noise(sino, cfg).values, C.apply_dose_noise(sino, cfg).values
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))
    # every ray is starved and clamped to one photon out of one: -log(1/1)/mu = 0
    assert np.all(a == 0.0)


def test_image_noise_identity_limit():
    img = C.make_phantom(32, 32, seed=2).image
    out = C.image_domain_noise(img, C.NoiseConfig(n0=1e12, dose_fraction=1.0, gaussian_sigma=0.0, mode="image"))
    assert np.max(np.abs(out - img)) < 1e-4


def test_image_noise_std():
    cfg = C.NoiseConfig(mode="image", seed=5)
    out = C.image_domain_noise(np.full((1000, 1000), 0.5), cfg)
    expected = math.sqrt(0.5 / cfg.photons + cfg.gaussian_sigma**2)
    assert out.std() == pytest.approx(expected, rel=0.05)
    assert np.array_equal(out, C.image_domain_noise(np.full((1000, 1000), 0.5), cfg))


def test_psnr_falls_with_dose():
    levels = []
    for f in (1.0, 0.5, 0.25, 0.1):
        ds = C.make_dataset(0, 4, 32, C.NoiseConfig(dose_fraction=f, n_angles=90), seed=1)
        levels.append(np.mean([psnr(n, c) for n, c in zip(ds.noisy, ds.clean)]))
    assert all(b < a for a, b in zip(levels, levels[1:]))


# ------------------------------------------------------------------- dataset


def test_dataset_determinism_and_splits():
    cfg = C.NoiseConfig(n_angles=60)
    a = C.make_dataset(3, 2, 24, cfg, seed=7)
    b = C.make_dataset(3, 2, 24, cfg, seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a.noisy, b.noisy))
    assert list(a.train) == [0, 1, 2] and list(a.val) == [3, 4]
    assert a.textured == [False, True, False, True, False]
    # image i uses phantom seed (seed ^ i)
    assert np.array_equal(a.clean[3], C.make_phantom(24, 24, 6, 7 ^ 3, True).image)


def test_dataset_round_trip(tmp_path):
    ds = C.make_dataset(2, 1, 16, C.NoiseConfig(mode="image"), seed=1)
    C.write_dataset(tmp_path, ds)
    assert sorted(p.name for p in (tmp_path / "clean").iterdir()) == ["0000.pgm", "0001.pgm", "0002.pgm"]
    back = C.read_dataset(tmp_path)
    assert back.n_train == 2 and back.textured == ds.textured
    for a, b in zip(ds.noisy, back.noisy):
        assert np.max(np.abs(a - b)) <= 0.5 / 65535 + 1e-15
    assert back.meta["mode"] == "image"
