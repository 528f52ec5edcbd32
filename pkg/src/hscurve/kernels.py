"""Backend selection for the hot kernels.

The compiled extension ``_ckernels`` is used when it imports; otherwise the
numpy fallback in ``_pykernels`` takes over. Set ``HSCURVE_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _pykernels

fourier_eval = _pykernels.fourier_eval

if os.environ.get("HSCURVE_PURE_PYTHON") == "1":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

closest_points = _impl.closest_points
double_reflection = _impl.double_reflection

__all__ = ["BACKEND", "closest_points", "double_reflection", "fourier_eval"]
