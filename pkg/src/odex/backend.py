"""Selects the convolution backend at import time.

Prefers the compiled extension and falls back to the NumPy
implementation when it is not built. ODEX_BACKEND=cython|numpy forces
a specific one (cython raises if the extension is missing).
"""

import os

_requested = os.environ.get("ODEX_BACKEND", "auto").strip().lower() or "auto"
if _requested not in ("auto", "cython", "numpy"):
    raise RuntimeError(f"ODEX_BACKEND must be auto, cython or numpy, got {_requested!r}")

if _requested == "numpy":
    from . import _kernels_np as _impl
elif _requested == "cython":
    from . import _kernels as _impl  # type: ignore[no-redef]
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        from . import _kernels_np as _impl

BACKEND = _impl.BACKEND_NAME
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
