"""Kernel backend selection.

The hot inner-loop kernels exist twice: numba-jitted loops and pure numpy.
``KCCIOL_BACKEND=numpy`` forces the fallback; ``KCCIOL_BACKEND=numba``
forces the jitted path (import error if numba is unavailable). Unset, numba
is used when importable. Matrix products always go through BLAS and are not
part of the backend switch.

``benchmarks/backend_bench.py`` compares the two on workload shapes.
"""

import os

from .errors import ConfigError

_CHOICE = os.environ.get("KCCIOL_BACKEND", "").strip().lower()

if _CHOICE not in ("", "numba", "numpy"):
    raise ConfigError(f"KCCIOL_BACKEND must be 'numba' or 'numpy', got {_CHOICE!r}")

if _CHOICE == "numpy":
    from . import _kernels_numpy as kernels
elif _CHOICE == "numba":
    from . import _kernels_numba as kernels
else:
    try:
        from . import _kernels_numba as kernels
    except ImportError:
        from . import _kernels_numpy as kernels

BACKEND_NAME = kernels.BACKEND_NAME

relu = kernels.relu
relu_mask = kernels.relu_mask
sign = kernels.sign
axpy = kernels.axpy
abs_sum = kernels.abs_sum
sq_sum = kernels.sq_sum
all_finite = kernels.all_finite
adam_update = kernels.adam_update
