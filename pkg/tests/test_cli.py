import numpy as np
import pytest

from ltv import io
from ltv.cli import check_run_dir, main
from ltv.ct_sim import make_phantom

TINY = ["--n-train", "2", "--n-val", "1", "--size", "16", "--mode", "image"]


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "in.pgm"
    rng = np.random.default_rng(0)
    clean = make_phantom(24, 24, seed=1).image
    io.save_pgm(path, np.clip(clean + 0.05 * rng.normal(size=clean.shape), 0, 1))
    ref = tmp_path / "ref.pgm"
    io.save_pgm(ref, clean)
    return path, ref


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    args = ["train", "--out-dir", str(d), *TINY, "--epochs", "1", "--set", "predictor.channels=2"]
    assert main(args) == 0
    return d


def test_no_args_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_named(capsys, tmp_path):
    assert main(["selftest", "--out-dir", str(tmp_path), "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_selftest_passes(tmp_path):
    assert main(["selftest", "--out-dir", str(tmp_path)]) == 0
    rows = (tmp_path / "selftest.csv").read_text().splitlines()[1:]
    assert rows and all(r.split(",")[1] == "1" for r in rows)


def test_missing_input_is_runtime_error(tmp_path):
    assert main(["classical-tv", "--out-dir", str(tmp_path), "--input", str(tmp_path / "nope.pgm"), "--lambda", "0.1"]) == 2


@pytest.mark.parametrize("extra", [[], ["--lambda", "0.1", "--checkpoint", "x"]])
def test_denoise_needs_one_source(tmp_path, image, extra):
    assert main(["denoise", "--out-dir", str(tmp_path / "o"), "--input", str(image[0]), *extra]) == 1


def test_zero_lambda_is_identity(tmp_path, image):
    out = tmp_path / "o"
    assert main(["denoise", "--out-dir", str(out), "--input", str(image[0]), "--lambda", "0"]) == 0
    assert np.array_equal(io.load_pgm(out / "denoised.pgm"), io.load_pgm(image[0]))


def test_repeat_denoise_is_bit_identical(tmp_path, image, trained):
    ckpt = str(trained / "checkpoints" / "best")
    for name in ("a", "b"):
        assert main(["denoise", "--out-dir", str(tmp_path / name), "--input", str(image[0]), "--checkpoint", ckpt]) == 0
    for f in ("denoised.pgm", "lambda.pgm", "lambda.ltvt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_lambda_sidecar_round_trip(tmp_path, image, trained):
    out = tmp_path / "o"
    ckpt = str(trained / "checkpoints" / "best")
    assert main(["denoise", "--out-dir", str(out), "--input", str(image[0]), "--checkpoint", ckpt]) == 0
    lam = io.load_ltvt(out / "lambda.ltvt")
    kv = io.read_kv(out / "lambda.txt")
    lo, hi = float(kv["min"]), float(kv["max"])
    assert lo == lam.min() and hi == lam.max()
    back = lo + io.load_pgm(out / "lambda.pgm") * (hi - lo)
    assert np.max(np.abs(back - lam)) <= (hi - lo) / 65535


def test_reference_writes_error_map(tmp_path, image):
    out = tmp_path / "o"
    args = ["classical-tv", "--out-dir", str(out), "--input", str(image[0]), "--lambda", "0.05", "--reference", str(image[1])]
    assert main(args) == 0
    err = io.load_pgm(out / "error.pgm")
    expected = np.abs(io.load_pgm(out / "denoised.pgm") - io.load_pgm(image[1]))
    assert np.max(np.abs(err - expected)) <= 1.0 / 65535
    header, noisy, denoised = (out / "metrics.csv").read_text().splitlines()
    assert header == "image,psnr,ssim"
    assert float(denoised.split(",")[1]) > float(noisy.split(",")[1])


def test_unknown_config_key(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path), *TINY, "--set", "no_such_key=1"]) == 1
    assert "no_such_key" in capsys.readouterr().err


def test_flags_override_config(tmp_path, trained):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs=5\npredictor.channels=2\nlr_lambda=0.5\n")
    out = tmp_path / "run"
    assert main(["train", "--out-dir", str(out), *TINY, "--config", str(cfg), "--epochs", "1", "--set", "lr_lambda=0.01"]) == 0
    stamped = io.read_kv(out / "config.txt")
    assert stamped["epochs"] == "1"
    assert float(stamped["lr_lambda"]) == 0.01
    assert stamped["predictor.channels"] == "2"


def test_run_dir_manifest(trained):
    check_run_dir(trained, ["runlog.csv"])
    assert (trained / "VERSION").read_text().strip()
    with pytest.raises(RuntimeError, match="missing"):
        check_run_dir(trained / "checkpoints", ["runlog.csv"])


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("LTV_THREADS", "zero")
    assert main(["train", "--out-dir", str(tmp_path), *TINY, "--epochs", "1"]) == 1
    monkeypatch.setenv("LTV_THREADS", "1")
    out = tmp_path / "run"
    assert main(["train", "--out-dir", str(out), *TINY, "--epochs", "1", "--set", "predictor.channels=2"]) == 0
    assert io.read_kv(out / "config.txt")["threads"] == "1"


def test_eval_and_simulate(tmp_path, trained):
    ds = tmp_path / "ds"
    assert main(["simulate", "--out-dir", str(ds), *TINY]) == 0
    assert (ds / "metrics.csv").read_text().startswith("method,")
    ev = tmp_path / "ev"
    ckpt = str(trained / "checkpoints" / "best")
    assert main(["eval", "--out-dir", str(ev), "--data", str(ds), "--checkpoint", ckpt, "--grid", "0.05,0.1"]) == 0
    methods = [r.split(",")[0] for r in (ev / "metrics.csv").read_text().splitlines()[1:]]
    assert methods[0] == "noisy" and "classical_tv_best" in methods and methods[-1] == "ltv"
