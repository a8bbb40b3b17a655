"""Kernel backend selection.

Two interchangeable implementations of the hot kernels exist: a Cython
extension (latentfluid._kernels) and a pure numpy fallback (_kernels_np).
The compiled one is used when importable; set LATENTFLUID_BACKEND=numpy or
=compiled to force a choice. Both produce bitwise-identical results.
"""

from __future__ import annotations

import os

from . import _kernels_np

try:
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:
    _compiled = None


def get_backend(name: str):
    """Return the kernel module for an explicit backend name."""
    if name == "numpy":
        return _kernels_np
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernel backend requested but the extension is not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r} (expected 'numpy' or 'compiled')")


def available_backends() -> list[str]:
    names = ["numpy"]
    if _compiled is not None:
        names.append("compiled")
    return names


_requested = os.environ.get("LATENTFLUID_BACKEND", "auto").lower()
if _requested in ("", "auto"):
    _impl = _compiled if _compiled is not None else _kernels_np
elif _requested in ("numpy", "compiled", "cython"):
    _impl = get_backend("compiled" if _requested == "cython" else _requested)
else:
    raise ValueError(f"LATENTFLUID_BACKEND={_requested!r} not recognized")

ACTIVE = _impl.NAME

scatter_add_rows = _impl.scatter_add_rows
grid_query = _impl.grid_query
sph_density = _impl.sph_density
sph_accel = _impl.sph_accel
