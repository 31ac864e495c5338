"""Hot geometry / matching kernels with a numba path and a pure-numpy path.

The backend is chosen once at import time. Set ``CASCADE_SGG_NO_NUMBA=1``
to force the numpy implementation (numba missing also falls back).
"""

import os

from . import _numpy as numpy_backend

_DISABLED = os.environ.get("CASCADE_SGG_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by CASCADE_SGG_NO_NUMBA")
    from . import _numba as numba_backend
    NUMBA_AVAILABLE = True
except ImportError:
    numba_backend = None
    NUMBA_AVAILABLE = False

_active = numba_backend if NUMBA_AVAILABLE else numpy_backend

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"

paired_iou = _active.paired_iou
pairwise_iou = _active.pairwise_iou
nms_keep = _active.nms_keep
greedy_match_ranks = _active.greedy_match_ranks

__all__ = [
    "BACKEND",
    "NUMBA_AVAILABLE",
    "numba_backend",
    "numpy_backend",
    "paired_iou",
    "pairwise_iou",
    "nms_keep",
    "greedy_match_ranks",
]
