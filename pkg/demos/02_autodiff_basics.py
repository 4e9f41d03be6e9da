"""
Reverse-mode autodiff on a tape
===============================

The tensor layer records ops only while a ``Tape`` is active and at least
one input requires a gradient. Gradients come from replaying the tape in
reverse.
"""
from __future__ import annotations

import numpy as np

from compmotion.tensor import ParameterStore, adamw_step, grad_check
from compmotion.tensor import core as F
from compmotion.tensor.core import Tape

# %%
# A closed-form check: for loss = ||W x||^2 the gradient is 2 (W x) x^T.
W = F.tensor([[1.0, 2.0], [0.5, -1.0]], requires_grad=True)
x = F.tensor([3.0, -1.0])
with Tape() as tape:
    y = F.matmul(W, F.reshape(x, (2, 1)))
    loss = F.sum(F.square(y))
g = tape.gradient(loss, W)
wx = W.data @ x.data
print("tape gradient:\n", g)
print("closed form:\n", 2 * np.outer(wx, x.data))

# %%
# Finite differences in float64 agree to about 1e-10 for a small network.
with F.default_dtype(np.float64):
    rng = np.random.default_rng(0)
    w1, w2 = rng.normal(size=(4, 8)), rng.normal(size=(8, 1))
    inp = F.tensor(rng.normal(size=(5, 4)))

    def mlp(a, b):
        return F.mean(F.square(F.matmul(F.gelu(F.matmul(inp, a)), b)))

    print("max relative error:", grad_check(mlp, [w1, w2]))

# %%
# Fitting a line with AdamW through a ParameterStore.
store = ParameterStore()
slope = store.add("line.slope", np.zeros(1))
bias = store.add("line.bias", np.zeros(1))
xs = np.linspace(-1, 1, 32)
ys = 3.0 * xs - 0.5
for step in range(300):
    with Tape() as tape:
        pred = F.add(F.mul(F.tensor(xs), slope), bias)
        loss = F.mse(pred, F.tensor(ys))
    grads = tape.gradient(loss, dict(store.items()))
    adamw_step(store, grads, lr=0.05)
print(f"slope {slope.data[0]:.3f}  bias {bias.data[0]:.3f}  loss {loss.item():.2e}")
