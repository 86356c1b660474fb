import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ltv import io


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(-1e6, 1e6)))
def test_ltvt_round_trip(arr):
    back = io.decode_ltvt(io.encode_ltvt(arr))
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_ltvt_layout():
    buf = io.encode_ltvt(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"LTVT"
    assert buf[4] == 1 and buf[5] == 2
    assert struct.unpack_from("<II", buf, 6) == (1, 3)
    assert struct.unpack_from("<3d", buf, 14) == (1.0, 2.0, 3.0)
    assert len(buf) == 14 + 24


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + bytes([2]) + b[5:],
        lambda b: b[:-1],
        lambda b: b + b"\0",
        lambda b: b[:7],
    ],
)
def test_ltvt_rejects_corruption(mutate):
    with pytest.raises(io.FormatError):
        io.decode_ltvt(mutate(io.encode_ltvt(np.ones((2, 2)))))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12), elements=st.floats(0, 1)))
def test_pgm_quantization_bound(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    io.save_pgm(path, img)
    back = io.load_pgm(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / 65535


def test_pgm_header_and_clipping(tmp_path):
    path = tmp_path / "a.pgm"
    io.save_pgm(path, np.array([[-1.0, 0.5, 2.0]]))
    buf = path.read_bytes()
    assert buf.startswith(b"P5\n3 1\n65535\n")
    np.testing.assert_allclose(io.load_pgm(path), [[0.0, 32768 / 65535, 1.0]])


def test_pgm_reads_comments_and_8bit(tmp_path):
    path = tmp_path / "b.pgm"
    path.write_bytes(b"P5\n# made elsewhere\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(io.load_pgm(path), [[0.0, 1.0]])


def test_pgm_rejects_bad_input(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(io.FormatError):
        io.load_pgm(path)
    path.write_bytes(b"P5\n4 4\n65535\n\x00\x00")
    with pytest.raises(io.FormatError):
        io.load_pgm(path)
    with pytest.raises(io.FormatError):
        io.save_pgm(path, np.zeros((2, 2, 2)))


def test_kv_parsing():
    text = "# header\nalpha = 1\n\nbeta=two # trailing\n  gamma=x=y\n"
    assert io.parse_kv(text) == {"alpha": "1", "beta": "two", "gamma": "x=y"}
    with pytest.raises(io.FormatError, match=":2:"):
        io.parse_kv("a=1\nnot a pair\n")


def test_kv_round_trip(tmp_path):
    items = {"lr": 1e-3, "name": "run", "n": 4, "third": 1 / 3}
    io.write_kv(tmp_path / "c.txt", items)
    back = io.read_kv(tmp_path / "c.txt")
    assert float(back["third"]) == 1 / 3
    assert back["name"] == "run" and back["n"] == "4"


def test_checkpoint_round_trip(tmp_path):
    tensors = {"w": np.arange(6.0).reshape(2, 3), "s": np.array(0.25)}
    roles = {"w": "predictor", "s": "solver"}
    io.save_checkpoint(tmp_path / "ck", tensors, roles, {"epoch": 3.0})
    manifest = (tmp_path / "ck" / "manifest.txt").read_text().splitlines()
    assert "w 2x3 predictor" in manifest and "s scalar solver" in manifest
    got, got_roles, meta = io.load_checkpoint(tmp_path / "ck")
    assert got_roles == roles and meta == {"epoch": "3.0"}
    assert all(np.array_equal(got[k], tensors[k]) for k in tensors)


def test_checkpoint_shape_mismatch(tmp_path):
    io.save_checkpoint(tmp_path, {"w": np.zeros((2, 3))}, {"w": "predictor"})
    io.save_ltvt(tmp_path / "w.ltvt", np.zeros((3, 2)))
    with pytest.raises(io.FormatError):
        io.load_checkpoint(tmp_path)


def test_link_best(tmp_path):
    (tmp_path / "epoch_000").mkdir()
    (tmp_path / "epoch_001").mkdir()
    io.link_best(tmp_path, "epoch_000")
    io.link_best(tmp_path, "epoch_001")
    assert (tmp_path / "best.txt").read_text().strip() == "epoch_001"
    assert (tmp_path / "best").resolve() == (tmp_path / "epoch_001").resolve()
