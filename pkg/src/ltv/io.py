"""File formats: LTVT tensors, 16-bit PGM images, checkpoints, key=value files.

LTVT layout::

    b"LTVT" | u8 version (=1) | u8 rank | rank x u32 LE extents | f64 LE payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LTVT"
VERSION = 1
PGM_MAXVAL = 65535


class FormatError(ValueError):
    pass


# ----------------------------------------------------------------------- LTVT


def encode_ltvt(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    if arr.ndim > 255:
        raise FormatError("rank too large for LTVT")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_ltvt(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("not an LTVT tensor (bad magic)")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported LTVT version {version}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated LTVT header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 8 * n:
        raise FormatError(f"LTVT payload size mismatch: expected {8 * n} bytes, got {len(buf) - off}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)


def save_ltvt(path, arr) -> None:
    Path(path).write_bytes(encode_ltvt(arr))


def load_ltvt(path) -> np.ndarray:
    return decode_ltvt(Path(path).read_bytes())


# ------------------------------------------------------------------------ PGM


def save_pgm(path, image) -> None:
    """Write a [0, 1] image as binary 16-bit PGM (values are clipped)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"PGM needs an H x W image, got {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii"))
        f.write(q.tobytes())


def _pgm_tokens(buf: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1


def load_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    (w, h, maxval), pos = _pgm_tokens(buf, 3)
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h
    if len(buf) - pos < n * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: truncated PGM payload")
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


# ---------------------------------------------------------- key=value files


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(), str(path))


def write_kv(path, items: dict) -> None:
    with open(path, "w") as f:
        for k, v in items.items():
            f.write(f"{k}={_fmt(v)}\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(directory, tensors: dict[str, np.ndarray], roles: dict[str, str], meta: dict | None = None) -> Path:
    """Write each tensor as ``<name>.ltvt`` plus ``manifest.txt``.

    Manifest lines are ``name shape role`` with the shape written as
    ``AxBxC`` (``scalar`` for rank 0).  ``meta`` goes in as ``# key=value``
    header comments.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}={_fmt(v)}" for k, v in (meta or {}).items()]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        save_ltvt(d / f"{name}.ltvt", arr)
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {roles[name]}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    return d


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict[str, str], dict[str, str]]:
    d = Path(directory)
    tensors, roles, meta = {}, {}, {}
    for raw in (d / "manifest.txt").read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k.strip()] = v.strip()
            continue
        name, shape, role = line.split()
        arr = load_ltvt(d / f"{name}.ltvt")
        expect = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        if arr.shape != expect:
            raise FormatError(f"{name}: manifest shape {expect} but file holds {arr.shape}")
        tensors[name] = arr
        roles[name] = role
    return tensors, roles, meta


def link_best(checkpoint_root, target_name: str) -> None:
    """Point ``<root>/best`` at a checkpoint directory, plus ``best.txt``."""
    root = Path(checkpoint_root)
    link = root / "best"
    if link.is_symlink() or link.exists():
        link.unlink()
    try:
        os.symlink(target_name, link)
    except OSError:
        pass
    (root / "best.txt").write_text(target_name + "\n")
