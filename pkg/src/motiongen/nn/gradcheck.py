"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def grad_check(f, inputs, eps=1e-5):
    """Compare analytic gradients of scalar f(*inputs) against central differences.

    Runs in whatever dtype the inputs carry; callers should pass float64
    tensors. Returns the max elementwise relative error over all inputs,
    with the denominator floored at 1e-6 so near-zero gradients compare on
    an absolute scale.
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        x.grad = None
    out = f(*inputs)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: non-finite function value")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    worst = 0.0
    for x, ga in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(*inputs).data)
            flat[i] = orig - eps
            lo = float(f(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("grad_check: non-finite value during perturbation")
            fd = (hi - lo) / (2.0 * eps)
            denom = max(abs(fd), abs(gflat[i]), 1e-6)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst
