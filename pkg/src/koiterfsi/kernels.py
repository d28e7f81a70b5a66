"""Kernel dispatch: use the compiled extension when present, else numpy.

``BACKEND`` records which implementation was selected at import time.
"""

from __future__ import annotations

try:
    from ._kernels import bilinear, cutoff_eval, radial_inverse, stream_push

    BACKEND = "cython"
except ImportError:  # pragma: no cover - exercised only without a compiler
    from ._kernels_py import bilinear, cutoff_eval, radial_inverse, stream_push

    BACKEND = "python"

__all__ = ["BACKEND", "bilinear", "cutoff_eval", "radial_inverse", "stream_push"]
