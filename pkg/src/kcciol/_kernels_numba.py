"""Numba-jitted twins of the numpy kernels.

Fused single-pass loops avoid the intermediate temporaries numpy allocates
for expressions like ``beta1 * m + (1 - beta1) * g``. All kernels take and
return float64 arrays. ``cache=True`` persists compilation across runs.
"""

import numpy as np
from numba import njit

BACKEND_NAME = "numba"


def _flat(x):
    # ravel() must be a view for the out-parameter pattern below
    return np.ascontiguousarray(x).ravel()


@njit(cache=True)
def _relu_impl(flat, out):
    for i in range(flat.size):
        v = flat[i]
        out[i] = v if v > 0.0 else 0.0


def relu(x):
    out = np.empty(x.shape, dtype=np.float64)
    _relu_impl(_flat(x), out.ravel())
    return out


@njit(cache=True)
def _relu_mask_impl(flat, out):
    for i in range(flat.size):
        out[i] = 1.0 if flat[i] > 0.0 else 0.0


def relu_mask(x):
    out = np.empty(x.shape, dtype=np.float64)
    _relu_mask_impl(_flat(x), out.ravel())
    return out


@njit(cache=True)
def _sign_impl(flat, out):
    for i in range(flat.size):
        v = flat[i]
        if v > 0.0:
            out[i] = 1.0
        elif v < 0.0:
            out[i] = -1.0
        else:
            out[i] = 0.0


def sign(x):
    out = np.empty(x.shape, dtype=np.float64)
    _sign_impl(_flat(x), out.ravel())
    return out


@njit(cache=True)
def _axpy_impl(a, c, b, out):
    for i in range(a.size):
        out[i] = a[i] + c * b[i]


def axpy(a, c, b):
    """a + c * b with scalar c."""
    out = np.empty(a.shape, dtype=np.float64)
    _axpy_impl(_flat(a), float(c), _flat(b), out.ravel())
    return out


@njit(cache=True)
def _abs_sum_impl(flat):
    acc = 0.0
    for i in range(flat.size):
        acc += abs(flat[i])
    return acc


def abs_sum(x):
    return float(_abs_sum_impl(_flat(x)))


@njit(cache=True)
def _sq_sum_impl(flat):
    acc = 0.0
    for i in range(flat.size):
        acc += flat[i] * flat[i]
    return acc


def sq_sum(x):
    return float(_sq_sum_impl(_flat(x)))


@njit(cache=True)
def _all_finite_impl(flat):
    for i in range(flat.size):
        if not np.isfinite(flat[i]):
            return False
    return True


def all_finite(x):
    return bool(_all_finite_impl(_flat(x)))


@njit(cache=True)
def _adam_impl(p, g, m, v, t, lr, beta1, beta2, eps, p2, m2, v2):
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i in range(p.size):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        m2[i] = mi
        v2[i] = vi
        p2[i] = p[i] - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam step; returns fresh (p, m, v) arrays.

    `t` is the step count *after* this update (caller increments first).
    """
    p2 = np.empty_like(p)
    m2 = np.empty_like(m)
    v2 = np.empty_like(v)
    _adam_impl(_flat(p), _flat(g), _flat(m), _flat(v), float(t), lr, beta1, beta2, eps, p2, m2, v2)
    return p2, m2, v2
