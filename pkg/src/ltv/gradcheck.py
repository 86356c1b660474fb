"""Central-difference gradient checks against the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``.

    ``index`` restricts the probe to a list of flat indices; other entries of
    the result stay zero.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    probe = range(flat.size) if index is None else index
    for i in probe:
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def tape_grads(build: Callable, inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Run ``build(*vars)`` on a fresh tape and return the input gradients."""
    tape = Tape()
    vs = [tape.var(a) for a in inputs]
    loss = build(*vs)
    tape.backward(loss)
    return [v.grad for v in vs]


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_grad(build: Callable, inputs: Sequence[np.ndarray], h: float = 1e-5) -> list[float]:
    """Relative error of tape gradients vs. central differences, per input.

    ``build`` maps Vars (or plain arrays) to a scalar; it must be pure so the
    array path serves as the finite-difference oracle.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    analytic = tape_grads(build, inputs)
    errors = []
    for k in range(len(inputs)):

        def f(xk, k=k):
            args = list(inputs)
            args[k] = xk
            return build(*args)

        errors.append(rel_error(analytic[k], numeric_grad(f, inputs[k], h)))
    return errors
