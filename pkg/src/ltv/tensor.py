"""Reverse-mode differentiation over float64 numpy arrays.

Plain ``numpy.ndarray`` values are the tensors.  A :class:`Tape` records the
operations applied to its :class:`Var` leaves; :meth:`Tape.backward` then walks
the records in exact reverse order and accumulates gradients.

Every operation in this module accepts either arrays or Vars.  Called with
arrays only it returns an array and records nothing, so the same code path
serves both the learned solver and the untaped classical baseline.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
of them must be a scalar.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NonFiniteError",
    "Tape",
    "Var",
    "value_of",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "affine",
    "clamp",
    "tanh",
    "softplus",
    "sqrt",
    "abs",
    "exp",
    "log",
    "square",
    "reshape",
    "sum",
    "mean",
    "std",
    "max",
    "grad2d",
    "div2d",
    "pixel_l2_norm",
    "pixel_norm_smooth",
    "project_l2_ball",
    "conv2d",
    "box_filter",
    "avg_pool2",
    "upsample2",
    "soft_histogram",
]

DIV_EPS = 1e-300


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "id", "requires_grad", "grad")

    def __init__(self, value, tape: "Tape", id: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.id = id
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, id={self.id}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


Operand = Union[Var, np.ndarray, float, int]


class Tape:
    """Ordered record of operations; supports a single backward pass."""

    def __init__(self):
        self._records: list[tuple[int, tuple, Callable]] = []
        self._leaves: list[Var] = []
        self._next_id = 0
        self.consumed = False

    def __len__(self):
        return len(self._records)

    def var(self, value, requires_grad: bool = True) -> Var:
        """Register a leaf."""
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, "leaf")
        v = Var(arr, self, self._new_id(), requires_grad)
        if requires_grad:
            self._leaves.append(v)
        return v

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def _record(self, out: Var, parents: tuple, backward: Callable) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        self._records.append((out.id, parents, backward))

    def backward(self, loss: Var) -> dict:
        """Propagate d(loss)/d(leaf) for every requires-grad leaf.

        Gradients are stored on ``leaf.grad`` and returned as a ``{leaf: grad}``
        dict.  The tape cannot be reused afterwards.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("loss must be a Var recorded on this tape")
        if loss.value.shape != ():
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.value.shape}")
        if self.consumed:
            raise RuntimeError("double backward is not supported; the tape was already consumed")
        self.consumed = True
        grads = {loss.id: np.ones((), dtype=np.float64)}
        for out_id, parents, fn in reversed(self._records):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not (isinstance(parent, Var) and parent.requires_grad):
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        result = {}
        for leaf in self._leaves:
            g = grads.get(leaf.id)
            leaf.grad = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.value.shape)
            result[leaf] = leaf.grad
        self._records.clear()
        return result


def backward(loss: Var) -> dict:
    return loss.tape.backward(loss)


def value_of(x) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {name}")


def _make(name: str, out: np.ndarray, parents: tuple, backward: Callable):
    """Wrap an op result; record it if any parent needs a gradient."""
    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, name)
    tape = None
    for p in parents:
        if isinstance(p, Var):
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ValueError(f"{name}: operands live on different tapes")
    if tape is None:
        return out
    needs = any(isinstance(p, Var) and p.requires_grad for p in parents)
    v = Var(out, tape, tape._new_id(), needs)
    if needs:
        tape._record(v, parents, backward)
    return v


def _binary_shapes(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


# ---------------------------------------------------------------- elementwise


def add(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    _binary_shapes("add", av, bv)
    return _make("add", av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    _binary_shapes("sub", av, bv)
    return _make("sub", av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    _binary_shapes("mul", av, bv)
    return _make("mul", av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    _binary_shapes("div", av, bv)
    if np.any(np.abs(bv) < DIV_EPS):
        raise ZeroDivisionError("div: denominator magnitude below 1e-300")
    out = av / bv

    def bw(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _make("div", out, (a, b), bw)


def neg(a: Operand):
    return _make("neg", -value_of(a), (a,), lambda g: (-g,))


def affine(a: Operand, scale: float, shift: float = 0.0):
    """``scale * a + shift`` with constant coefficients."""
    return _make("affine", scale * value_of(a) + shift, (a,), lambda g: (scale * g,))


def clamp(a: Operand, lo: float, hi: float):
    # hard zero gradient outside [lo, hi], no straight-through
    av = value_of(a)
    inside = (av >= lo) & (av <= hi)
    return _make("clamp", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def tanh(a: Operand):
    out = np.tanh(value_of(a))
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Operand):
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    # sigmoid without overflow
    sig = np.exp(-np.logaddexp(0.0, -av))
    return _make("softplus", out, (a,), lambda g: (g * sig,))


def sqrt(a: Operand):
    av = value_of(a)
    if np.any(av < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(av)
    safe = np.where(out > 0, out, 1.0)
    # subgradient 0 at exactly 0
    return _make("sqrt", out, (a,), lambda g: (np.where(out > 0, g * 0.5 / safe, 0.0),))


def abs(a: Operand):  # noqa: A001 - mirrors numpy naming
    av = value_of(a)
    return _make("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def exp(a: Operand):
    with np.errstate(over="ignore"):  # overflow is reported by _make
        out = np.exp(value_of(a))
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Operand):
    av = value_of(a)
    if np.any(av <= 0):
        raise ValueError("log: non-positive input")
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def square(a: Operand):
    av = value_of(a)
    return _make("square", av * av, (a,), lambda g: (2.0 * g * av,))


def reshape(a: Operand, shape):
    av = value_of(a)
    return _make("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


# ----------------------------------------------------------------- reductions


def sum(a: Operand):  # noqa: A001
    av = value_of(a)
    if av.size == 0:
        raise ValueError("sum of empty tensor")
    return _make("sum", av.sum(), (a,), lambda g: (np.full(av.shape, float(g)),))


def mean(a: Operand):
    av = value_of(a)
    if av.size == 0:
        raise ValueError("mean of empty tensor")
    n = av.size
    return _make("mean", av.mean(), (a,), lambda g: (np.full(av.shape, float(g) / n),))


def std(a: Operand):
    """Population standard deviation; gradient is 0 at constant input."""
    av = value_of(a)
    if av.size == 0:
        raise ValueError("std of empty tensor")
    centred = av - av.mean()
    out = np.sqrt(np.mean(centred * centred))

    def bw(g):
        if out == 0.0:
            return (np.zeros_like(av),)
        return (float(g) * centred / (av.size * out),)

    return _make("std", out, (a,), bw)


def max(a: Operand):  # noqa: A001
    """Global maximum; the gradient goes to the first argmax."""
    av = value_of(a)
    if av.size == 0:
        raise ValueError("max of empty tensor")
    idx = int(np.argmax(av))

    def bw(g):
        out = np.zeros(av.size)
        out[idx] = float(g)
        return (out.reshape(av.shape),)

    return _make("max", av.reshape(-1)[idx], (a,), bw)


# ------------------------------------------------------------ image operators


def _grad2d_np(x: np.ndarray) -> np.ndarray:
    out = np.zeros((2,) + x.shape)
    with np.errstate(over="ignore"):  # overflow is reported by _make
        out[0, :, :-1] = x[:, 1:] - x[:, :-1]
        out[1, :-1, :] = x[1:, :] - x[:-1, :]
    return out


def _div2d_np(p: np.ndarray) -> np.ndarray:
    px, py = p[0], p[1]
    d = np.zeros(px.shape)
    if px.shape[1] > 1:
        d[:, 0] += px[:, 0]
        d[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
        d[:, -1] -= px[:, -2]
    if px.shape[0] > 1:
        d[0, :] += py[0, :]
        d[1:-1, :] += py[1:-1, :] - py[:-2, :]
        d[-1, :] -= py[-2, :]
    return d


def grad2d(x: Operand):
    """Forward differences with Neumann boundary.

    Channel 0 differences along each row (horizontal, ``x[:, j+1] - x[:, j]``),
    channel 1 along each column (vertical).  The last difference in each
    direction is zero.
    """
    xv = value_of(x)
    if xv.ndim != 2:
        raise ValueError(f"grad2d expects an H x W image, got shape {xv.shape}")
    return _make("grad2d", _grad2d_np(xv), (x,), lambda g: (-_div2d_np(g),))


def div2d(p: Operand):
    """Negative adjoint of :func:`grad2d`."""
    pv = value_of(p)
    if pv.ndim != 3 or pv.shape[0] != 2:
        raise ValueError(f"div2d expects a 2 x H x W field, got shape {pv.shape}")
    return _make("div2d", _div2d_np(pv), (p,), lambda g: (-_grad2d_np(g),))


def _check_field(name: str, pv: np.ndarray) -> None:
    if pv.ndim != 3 or pv.shape[0] != 2:
        raise ValueError(f"{name} expects a 2 x H x W field, got shape {pv.shape}")


def pixel_l2_norm(p: Operand):
    """Per-pixel magnitude of a vector field; subgradient 0 where it vanishes."""
    pv = value_of(p)
    _check_field("pixel_l2_norm", pv)
    out = np.sqrt(pv[0] ** 2 + pv[1] ** 2)
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        scale = np.where(out > 0, g / safe, 0.0)
        return (pv * scale,)

    return _make("pixel_l2_norm", out, (p,), bw)


def pixel_norm_smooth(p: Operand, eps: float = 1e-8):
    """``sqrt(p0**2 + p1**2 + eps**2)``, differentiable everywhere."""
    pv = value_of(p)
    _check_field("pixel_norm_smooth", pv)
    out = np.sqrt(pv[0] ** 2 + pv[1] ** 2 + eps * eps)
    return _make("pixel_norm_smooth", out, (p,), lambda g: (pv * (g / out),))


def project_l2_ball(q: Operand, radius: Operand, floor: float = 1e-12):
    """Project each pixel vector of ``q`` onto the disc of the given radius.

    ``q * min(1, radius / max(|q|, floor))``; ``radius`` is a scalar or H x W.
    """
    qv, rv = value_of(q), value_of(radius)
    _check_field("project_l2_ball", qv)
    if rv.shape not in ((), qv.shape[1:]):
        raise ValueError(f"project_l2_ball: radius shape {rv.shape} does not match field {qv.shape}")
    if np.any(rv < 0):
        raise ValueError("project_l2_ball: negative radius")
    norm = np.sqrt(qv[0] ** 2 + qv[1] ** 2)
    den = np.maximum(norm, floor)
    outside = np.broadcast_to(rv < den, norm.shape)
    factor = np.where(outside, rv / den, 1.0)
    out = qv * factor

    def bw(g):
        dot = g[0] * qv[0] + g[1] * qv[1]
        gq = np.where(outside, factor * (g - qv * (dot / den**2)), g)
        gr = np.where(outside, dot / den, 0.0)
        return gq, _unbroadcast(gr, rv.shape)

    return _make("project_l2_ball", out, (q, radius), bw)


def conv2d(x: Operand, k: Operand, bias: Operand | None = None):
    """Zero-padded 'same' cross-correlation.

    ``x`` is Cin x H x W, ``k`` is Cout x Cin x kh x kw with odd kh, kw and
    ``bias`` has length Cout.
    """
    xv, kv = value_of(x), value_of(k)
    if xv.ndim != 3 or kv.ndim != 4:
        raise ValueError(f"conv2d: bad ranks x{xv.shape} k{kv.shape}")
    cout, cin, kh, kw = kv.shape
    if xv.shape[0] != cin:
        raise ValueError(f"conv2d: input has {xv.shape[0]} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel extents must be odd")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xv, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # cin, H, W, kh, kw
    out = np.tensordot(kv, win, axes=([1, 2, 3], [0, 3, 4]))
    parents: tuple = (x, k)
    if bias is not None:
        bv = value_of(bias)
        if bv.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bv.shape}, expected ({cout},)")
        out = out + bv[:, None, None]
        parents = (x, k, bias)

    def bw(g):
        gk = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
        gx = np.tensordot(kv[:, :, ::-1, ::-1], gwin, axes=([0, 2, 3], [0, 3, 4]))
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(1, 2))

    return _make("conv2d", out, parents, bw)


def _box_valid(xv: np.ndarray, size: int) -> np.ndarray:
    c = np.cumsum(np.cumsum(np.pad(xv, ((1, 0), (1, 0))), axis=0), axis=1)
    return c[size:, size:] - c[:-size, size:] - c[size:, :-size] + c[:-size, :-size]


def box_filter(x: Operand, size: int):
    """Mean over every fully contained ``size`` x ``size`` window."""
    xv = value_of(x)
    if xv.ndim != 2:
        raise ValueError("box_filter expects an H x W image")
    if xv.shape[0] < size or xv.shape[1] < size:
        raise ValueError(f"image {xv.shape} smaller than {size}x{size} window")
    area = float(size * size)
    out = _box_valid(xv, size) / area

    def bw(g):
        gp = np.pad(g, size - 1)
        return (_box_valid(gp, size) / area,)

    return _make("box_filter", out, (x,), bw)


def avg_pool2(x: Operand):
    """2x2 mean pooling of a C x H x W tensor with even H, W."""
    xv = value_of(x)
    c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2 needs even spatial extents")
    out = xv.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return _make("avg_pool2", out, (x,), lambda g: (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0,))


def upsample2(x: Operand):
    """Nearest-neighbour 2x upsampling of a C x H x W tensor."""
    xv = value_of(x)
    c, h, w = xv.shape
    out = np.repeat(np.repeat(xv, 2, axis=1), 2, axis=2)
    return _make("upsample2", out, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),))


def soft_histogram(x: Operand, centers, bandwidth: float):
    """Gaussian-kernel bin masses ``m_b = sum_i exp(-(x_i - c_b)^2 / (2 h^2))``."""
    xv = value_of(x)
    c = np.asarray(centers, dtype=np.float64)
    d = xv.reshape(-1)[None, :] - c[:, None]
    k = np.exp(-(d * d) / (2.0 * bandwidth * bandwidth))

    def bw(g):
        gx = -(g[:, None] * k * d).sum(axis=0) / (bandwidth * bandwidth)
        return (gx.reshape(xv.shape),)

    return _make("soft_histogram", k.sum(axis=1), (x,), bw)
