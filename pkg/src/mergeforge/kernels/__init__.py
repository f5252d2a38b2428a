"""Kernel backend selection.

The compiled extension is preferred; the numpy implementation is the
fallback. MERGEFORGE_BACKEND=numpy|cython forces a choice (cython raises
if the extension is missing). Both backends are bit-identical.
"""

import os

_requested = os.environ.get("MERGEFORGE_BACKEND", "auto").strip().lower()

if _requested in ("auto", "", "cython"):
    try:
        from . import _cykernels as backend
    except ImportError:
        if _requested == "cython":
            raise
        from . import _numpy_backend as backend
elif _requested in ("numpy", "python"):
    from . import _numpy_backend as backend
else:
    raise ValueError(
        f"unknown MERGEFORGE_BACKEND {_requested!r}; expected 'auto', 'cython' or 'numpy'"
    )

backend_name = backend.NAME


def get_backend(name: str):
    """Explicit backend lookup, used by tests and the benchmark."""
    if name == "numpy":
        from . import _numpy_backend
        return _numpy_backend
    if name == "cython":
        from . import _cykernels
        return _cykernels
    raise ValueError(f"unknown backend {name!r}")
