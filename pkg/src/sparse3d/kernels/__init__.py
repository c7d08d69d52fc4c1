"""Local compute kernels and region copy loops.

The compiled core is used when it imported cleanly; set ``SPARSE3D_PURE=1``
to force the NumPy fallback. Both backends produce bitwise identical output.
"""

import os

from . import _fallback

try:
    if os.environ.get("SPARSE3D_PURE"):
        raise ImportError("pure backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _fallback
    BACKEND = "python"

BACKENDS = {"python": _fallback}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl

sddmm = _impl.sddmm
spmm = _impl.spmm
gather_regions = _impl.gather_regions
scatter_regions = _impl.scatter_regions
pack_rows = _impl.pack_rows
unpack_rows = _impl.unpack_rows

from .local import LocalDense, local_sddmm, local_spmm, resolve  # noqa: E402

__all__ = [
    "BACKEND", "BACKENDS", "LocalDense", "local_sddmm", "local_spmm", "resolve",
    "sddmm", "spmm", "gather_regions", "scatter_regions", "pack_rows", "unpack_rows",
]
