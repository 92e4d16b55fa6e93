"""Hot sequential scans with a numba fast path and a pure-numpy fallback.

The two recurrences here (the selective-state update and the
confidence-weighted moving average) are the only loops in the package
that cannot be vectorized, so they dominate CPU time when compiled out.

Backend selection, decided once at import time:

* ``HNET_KERNELS=numba`` -- require the JIT path, raise if numba is missing.
* ``HNET_KERNELS=numpy`` -- force the pure-numpy reference path.
* unset or ``auto``      -- numba when importable, numpy otherwise.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

import os
import warnings

from . import numpy_impl

_choice = os.environ.get("HNET_KERNELS", "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(f"HNET_KERNELS must be auto|numba|numpy, got {_choice!r}")

if _choice == "numpy":
    _impl = numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        warnings.warn("numba unavailable; falling back to pure-numpy kernels")
        _impl = numpy_impl
        BACKEND = "numpy"

ssm_scan_fwd = _impl.ssm_scan_fwd
ssm_scan_bwd = _impl.ssm_scan_bwd
ssm_step_fwd = _impl.ssm_step_fwd
ema_scan_fwd = _impl.ema_scan_fwd
ema_scan_bwd = _impl.ema_scan_bwd
