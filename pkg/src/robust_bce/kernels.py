"""Backend selection for the numerical hot loops.

The compiled extension is used when it imports cleanly; otherwise, or when
``ROBUST_BCE_PURE=1`` is set, the numpy fallback is used.  ``BACKEND`` names
the active choice.
"""

import os

from . import _fallback

if os.environ.get("ROBUST_BCE_PURE", "0") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"

range_predict = _impl.range_predict
knn_search = _impl.knn_search
quad_forms = _impl.quad_forms

__all__ = ["BACKEND", "range_predict", "knn_search", "quad_forms"]
