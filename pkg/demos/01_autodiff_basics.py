#!/usr/bin/env python3
# A tour of the tensor engine: build a graph, run backward, and verify a
# gradient against central finite differences by hand.

import numpy as np

from hvt import tensor as T
from hvt.tensor import Tensor

# Tensors wrap numpy arrays; float32 by default, float64 on request.
x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True, dtype=np.float64)
w = Tensor(np.array([[0.5], [-1.0]]), requires_grad=True, dtype=np.float64)

# Ops compose into a graph. Softmax, layer norm, GELU, matmul, reductions,
# reshapes and slicing are all differentiable.
logits = T.matmul(x, w)                  # (2, 1)
probs = T.softmax(logits, axis=0)
loss = (probs * probs).sum()
print("loss =", float(loss.numpy()))

# backward() populates .grad on every requires_grad tensor it can reach.
# Gradients are overwritten on each call, never accumulated.
loss.backward()
print("dloss/dw =\n", w.grad)

# Check one entry against the numeric derivative: nudge w[0,0] both ways.
h = 1e-6
def loss_at(delta):
    w_shift = w.numpy().copy()
    w_shift[0, 0] += delta
    l = (lambda p: (p * p).sum())(T.softmax(T.matmul(
        Tensor(x.numpy(), dtype=np.float64),
        Tensor(w_shift, dtype=np.float64)), axis=0))
    return float(l.numpy())

numeric = (loss_at(h) - loss_at(-h)) / (2 * h)
print(f"analytic {w.grad[0, 0]:+.10f}  vs numeric {numeric:+.10f}")

# Broadcasting is deliberately narrow: equal shapes, scalars, or a
# trailing-axes (bias-style) match. Anything else is an explicit op.
tokens = Tensor(np.zeros((4, 3)), dtype=np.float64)
bias = Tensor(np.array([1.0, 2.0, 3.0]), dtype=np.float64)
print("bias broadcast:", (tokens + bias).shape)

col = Tensor(np.arange(4.0).reshape(4, 1), dtype=np.float64)
expanded = T.broadcast_to(col, (4, 3))   # row-wise expansion must be explicit
print("explicit expand:", expanded.shape)

# Deterministic random streams: identical keys give identical draws, and
# child streams are independent of each other.
a = T.RngStream(42).child("weights").normal(size=3)
b = T.RngStream(42).child("weights").normal(size=3)
print("stream reproducible:", np.array_equal(a, b))
