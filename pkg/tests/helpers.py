"""Shared oracles for the test suite.

The finite-difference machinery lives here, deliberately independent of the
autodiff engine: it perturbs raw numpy arrays and calls an opaque scalar
function, so it can never inherit a bug from the backward pass it checks.
"""

import numpy as np

FD_STEP = 1e-4


def numeric_grad(f, arrays, index, h=FD_STEP):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. one array.

    Arrays must be float64 for the O(h^2) truncation error to dominate.
    """
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(*arrays)
        flat[i] = orig - h
        fm = f(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(analytic, numeric):
    """Max elementwise |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_grads(build_loss, arrays, tol=1e-3, h=FD_STEP):
    """Compare backward grads against finite differences for every array.

    ``build_loss`` maps the raw arrays to a scalar Tensor with the inputs
    wrapped as requires_grad leaves; it must also return those leaves.
    Returns the worst relative error over all inputs.
    """
    loss, leaves = build_loss(*arrays)
    loss.backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(*arrs):
            l, _ = build_loss(*arrs)
            return float(l.numpy())

        num = numeric_grad(f, [a.copy() for a in arrays], i, h=h)
        worst = max(worst, rel_err(leaf.grad, num))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst
