"""Pure-numpy reference kernels.

These are the semantics of record. The numba backend matches elementwise
kernels bit-for-bit; reductions (abs_sum, sq_sum) may differ from numpy's
pairwise summation in the last ulp. Each backend is individually
deterministic. Keep both files in sync when adding a kernel.
"""

import numpy as np

BACKEND_NAME = "numpy"


def relu(x):
    return np.maximum(x, 0.0)


def relu_mask(x):
    """Derivative mask of relu; the derivative at exactly 0 is taken as 0."""
    return (x > 0.0).astype(np.float64)


def sign(x):
    return np.sign(x)


def axpy(a, c, b):
    """a + c * b with scalar c."""
    return a + c * b


def abs_sum(x):
    return float(np.sum(np.abs(x)))


def sq_sum(x):
    return float(np.dot(x, x))


def all_finite(x):
    return bool(np.isfinite(x).all())


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam step; returns fresh (p, m, v) arrays.

    `t` is the step count *after* this update (caller increments first).
    """
    m2 = beta1 * m + (1.0 - beta1) * g
    v2 = beta2 * v + (1.0 - beta2) * (g * g)
    mhat = m2 / (1.0 - beta1**t)
    vhat = v2 / (1.0 - beta2**t)
    p2 = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p2, m2, v2
