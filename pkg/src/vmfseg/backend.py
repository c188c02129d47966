"""Kernel backend selection.

The compiled extension (vmfseg._kernels, Cython) is preferred; the
pure-numpy module (vmfseg._kernels_py) is the fallback. Selection
happens once at import. Set VMFSEG_PURE=1 to force the fallback, e.g.
to benchmark or to rule the extension out when debugging.
"""

from __future__ import annotations

import os

from vmfseg import _kernels_py

_FORCE_PURE = os.environ.get("VMFSEG_PURE", "").strip().lower() in {"1", "true", "yes"}

if not _FORCE_PURE:
    try:
        from vmfseg import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "numpy"
else:
    _impl = _kernels_py
    BACKEND = "numpy"

assign = _impl.assign
segment_sums = _impl.segment_sums


def backend_name() -> str:
    """Name of the active kernel backend: 'compiled' or 'numpy'."""
    return BACKEND
