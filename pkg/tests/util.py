"""Shared test helpers: finite-difference gradient checking.

Checks run in float64: the kernels are dtype-polymorphic and central
differences at eps=1e-3 cannot resolve a 1e-4 relative tolerance through
float32 rounding noise.
"""

import numpy as np

from corrsig.tensor import Tensor


def numeric_grad(fn, tensors, wrt, eps=1e-3):
    """Central finite differences of scalar fn(*tensors) w.r.t. tensors[wrt]."""
    base = tensors[wrt].data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(*tensors).item()
        flat[i] = orig - eps
        fm = fn(*tensors).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def gradcheck(fn, tensors, eps=1e-3, rtol=1e-4, atol=1e-6):
    """Assert analytic gradients of scalar fn(*tensors) match central FDs.

    Every tensor must be float64 with requires_grad=True.
    """
    for t in tensors:
        assert t.dtype == np.float64, "gradcheck requires float64 tensors"
        t.grad = None
    loss = fn(*tensors)
    loss.backward()
    for idx, t in enumerate(tensors):
        ana = t.grad
        assert ana is not None, "no gradient reached input %d" % idx
        num = numeric_grad(fn, tensors, idx, eps=eps)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), atol / rtol)
        rel = np.abs(ana - num) / denom
        worst = float(rel.max())
        assert worst <= rtol, (
            "input %d: worst relative grad error %.3g > %.3g" % (idx, worst, rtol))


def rand_t(rng, *shape, lo=-1.0, hi=1.0):
    """Random float64 leaf tensor with values in [lo, hi]."""
    data = rng.uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=True)
