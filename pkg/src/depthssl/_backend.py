"""Kernel backend selection.

Prefers the compiled `depthssl._kernels` extension; falls back to the pure
NumPy `depthssl._kernels_py`.  Set ``DEPTHSSL_PURE=1`` to force the
fallback.  Both backends are bit-identical by construction.
"""

from __future__ import annotations

import os

if os.environ.get("DEPTHSSL_PURE"):
    from . import _kernels_py as kernels
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as kernels


def kernel_backend() -> str:
    """Name of the active kernel backend ("cython" or "python")."""
    return kernels.BACKEND
