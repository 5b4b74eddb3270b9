"""Kernel selection: the compiled extension when importable, numpy otherwise.

Set ``ABPLIFT_PURE_PYTHON=1`` to force the numpy implementation.
"""
from __future__ import annotations

import os

from . import _kernels_py

_force_py = os.environ.get("ABPLIFT_PURE_PYTHON", "").strip() not in ("", "0")

if _force_py:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"

BASE_BINARY = _kernels_py.BASE_BINARY
BASE_SPHERE = _kernels_py.BASE_SPHERE

nested_log_expect = _impl.nested_log_expect
gray_scan = _impl.gray_scan
log_two_cosh_array = _impl.log_two_cosh_array
log_half_erfc_array = _impl.log_half_erfc_array
