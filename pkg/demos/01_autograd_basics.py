"""A tour of the tensor core: forward ops, reverse-mode grads, checking.

The whole detector runs on a single Tensor class wrapping a numpy array.
This demo builds a tiny computation, walks the backward pass, and shows
the finite-difference checker that every kernel in the test suite is
held against.
"""

import numpy as np

from efh.autograd import Tensor, backward, grad_check, matmul, softmax
from efh.nn import make_rng

rng = make_rng(0)

# ---- forward: a two-layer scorer ---------------------------------------
x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
w1 = Tensor(rng.normal(size=(8, 16)) * 0.3, requires_grad=True)
w2 = Tensor(rng.normal(size=(16, 3)) * 0.3, requires_grad=True)

hidden = matmul(x, w1).gelu()
scores = softmax(matmul(hidden, w2), axis=1)
print("scores (rows sum to 1):")
print(np.round(scores.data, 3))

# ---- backward: gradients of a scalar loss ------------------------------
loss = ((scores - Tensor(np.eye(4, 3))) ** 2).sum()
grads = backward(loss)
print(f"\nloss = {float(loss.data):.4f}")
print(f"dL/dw1 shape {grads[w1].shape}, mean |g| = {np.abs(grads[w1]).mean():.5f}")
print(f"dL/dw2 shape {grads[w2].shape}, mean |g| = {np.abs(grads[w2]).mean():.5f}")

# ---- verification: central finite differences --------------------------
def f(xx, ww1, ww2):
    h = matmul(xx, ww1).gelu()
    s = softmax(matmul(h, ww2), axis=1)
    return ((s - Tensor(np.eye(4, 3))) ** 2).sum()

err = grad_check(f, [Tensor(x.data.copy()), Tensor(w1.data.copy()),
                     Tensor(w2.data.copy())])
print(f"\nmax relative error vs finite differences: {err:.2e}")
assert err < 1e-6
print("gradients verified.")
