"""Selects the compiled kernels when available, else the numpy fallback.

Set INFDELAY_PURE_PYTHON=1 to force the fallback.
"""
import os

from . import _kernels_py

if os.environ.get("INFDELAY_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

lag_sum = _impl.lag_sum
euler_linear = _impl.euler_linear
