"""Central finite-difference gradient checking, shared by the test suites.

All checks run in float64. The reported error is relative with a unit floor,
|analytic - numeric| / max(|numeric|, 1), so near-zero derivatives are
compared absolutely instead of blowing up the denominator.
"""

import numpy as np

from .tensor import no_grad, zero_grads


def fd_check(f, tensors, step=1e-5, points=5, seed=0):
    """Max error of analytic grads of f() against central differences.

    f is a zero-argument callable returning a scalar DiffTensor; it must
    close over `tensors`, which are the leaves to check (float64). `points`
    coordinates are sampled per tensor.
    """
    rng = np.random.default_rng(seed)
    zero_grads(tensors)
    loss = f()
    loss.backward()
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        n = t.data.size
        picks = rng.choice(n, size=min(points, n), replace=False)
        for flat in picks:
            pos = np.unravel_index(flat, t.data.shape)
            orig = t.data[pos]
            with no_grad():
                t.data[pos] = orig + step
                fp = f().item()
                t.data[pos] = orig - step
                fm = f().item()
                t.data[pos] = orig
            numeric = (fp - fm) / (2.0 * step)
            analytic = grad[pos]
            err = abs(analytic - numeric) / max(abs(numeric), 1.0)
            worst = max(worst, err)
    return worst


def rand64(rng, *shape):
    """A float64 standard-normal array, the staple input of the oracle tests."""
    return rng.standard_normal(shape, dtype=np.float64)
