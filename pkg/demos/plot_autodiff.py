"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a small computation from ``planktomae.tensor`` kernels, run backward,
and compare the gradients against central finite differences.
"""

import numpy as np

from planktomae import tensor as T
from planktomae.gradcheck import check_gradients, numerical_grad
from planktomae.tensor import Tensor, no_grad

rng = np.random.default_rng(0)

# a layer-normed linear map followed by a softmax, reduced to a scalar
x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
w = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
gain, bias = Tensor(np.ones(6)), Tensor(np.zeros(6))
r = rng.standard_normal((4, 3))


def forward(x, w):
    return (T.softmax(T.linear(T.layer_norm(x, gain, bias), w), axis=-1) * r).sum()


loss = forward(x, w)
loss.backward()
print("loss:", loss.item())
print("d loss / d w:\n", np.round(w.grad, 4))

# the same gradient by brute force: nudge each weight up and down
def scalar():
    with no_grad():
        return forward(Tensor(x.data), Tensor(w.data)).item()


numeric = numerical_grad(scalar, w.data)
print("max |analytic - numeric|:", np.abs(w.grad - numeric).max())

# check_gradients does the whole comparison and returns the worst relative error
err = check_gradients(forward, [x.data, w.data])
print(f"worst elementwise relative error: {err:.1e}")
