"""Plain-SGD and Adam update rules over flat parameter vectors.

Both update functions are pure: they never modify their inputs and return
fresh arrays, so repeated calls with identical arguments give identical
results. Gradients that flow *through* an update (the inner-loop unroll)
are taped in the metalearner instead; these functions are the outer-loop /
evaluation-time updates where no higher-order gradient is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import NumericError, UsageError


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initial(cls, n_params: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), t=0, beta1=beta1, beta2=beta2, eps=eps)


def _check_pair(params, grad):
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise UsageError(f"parameter/gradient length mismatch: {params.shape} vs {grad.shape}")
    return params, grad


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """params - lr * grad."""
    params, grad = _check_pair(params, grad)
    if lr < 0:
        raise UsageError("learning rate must be >= 0")
    return backend.axpy(params, -lr, grad)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam step; returns (new state, new params)."""
    params, grad = _check_pair(params, grad)
    if state.m.shape != params.shape or state.v.shape != params.shape:
        raise UsageError("Adam state dimensions do not match the parameters")
    t = state.t + 1
    p2, m2, v2 = backend.adam_update(params, grad, state.m, state.v, t, lr, state.beta1, state.beta2, state.eps)
    if not backend.all_finite(p2):
        raise NumericError("non-finite parameters after Adam update")
    p2.flags.writeable = False  # lets ParameterStore adopt the array without copying
    return AdamState(m=m2, v=v2, t=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps), p2
