# %% [markdown]
# # Image operators and the gradient tape
#
# The discrete gradient uses forward differences with a zero difference at the
# last row and column.  Its negative adjoint is the divergence, and the pair
# passes the inner-product identity to rounding error.

# %%
import numpy as np

from ltv import tensor as T
from ltv.gradcheck import check_grad

rng = np.random.default_rng(0)
x = rng.normal(size=(16, 16))
p = rng.normal(size=(2, 16, 16))
lhs = np.sum(T.grad2d(x) * p)
rhs = -np.sum(x * T.div2d(p))
print(f"<grad x, p> = {lhs:.12f}   -<x, div p> = {rhs:.12f}")

# %% [markdown]
# Every op records a backward closure on the active tape.  Passing plain arrays
# runs the same code without recording, which makes finite differences a
# free oracle.

# %%
def smoothed_tv(a):
    return T.sum(T.pixel_norm_smooth(T.grad2d(a)))


tape = T.Tape()
xv = tape.var(x)
tape.backward(smoothed_tv(xv))
print("gradient norm:", np.linalg.norm(xv.grad))
print("relative error vs central differences:", check_grad(smoothed_tv, [x])[0])

# %% [markdown]
# Non-finite values stop the computation at the op that produced them.

# %%
try:
    T.exp(np.array([1.0, 800.0]))
except T.NonFiniteError as exc:
    print("caught:", exc)
