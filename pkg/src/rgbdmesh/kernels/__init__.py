"""Backend selection for the body-model kernels.

The compiled extension (``_speedups``, Cython) is used when it importable;
otherwise the pure-numpy reference implementation is. Both expose the same
four functions with identical semantics. Set ``RGBDMESH_KERNELS=py`` to force
the reference backend, ``RGBDMESH_KERNELS=cy`` to require the compiled one
(raising if it is missing).
"""

from __future__ import annotations

import os

from . import reference

_choice = os.environ.get("RGBDMESH_KERNELS", "auto").lower()
if _choice not in ("auto", "py", "numpy", "cy", "compiled"):
    raise ValueError(
        f"RGBDMESH_KERNELS={_choice!r}: expected auto, py, numpy, cy, or compiled"
    )

_impl = reference
_BACKEND = "numpy"
if _choice not in ("py", "numpy"):
    try:
        from . import _speedups as _compiled  # type: ignore[attr-defined]

        _impl = _compiled
        _BACKEND = "compiled"
    except ImportError:
        if _choice in ("cy", "compiled"):
            raise ImportError(
                "RGBDMESH_KERNELS requested the compiled backend but the "
                "rgbdmesh.kernels._speedups extension is not built"
            )


def backend() -> str:
    """Name of the active kernel backend: 'compiled' or 'numpy'."""
    return _BACKEND


rodrigues_batch = _impl.rodrigues_batch
rodrigues_batch_backward = _impl.rodrigues_batch_backward
body_forward = _impl.body_forward
body_backward = _impl.body_backward
