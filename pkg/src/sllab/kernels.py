"""Backend selection for the hot reductions.

The compiled extension is used when importable; set ``SLLAB_PURE_PYTHON=1``
to force the NumPy implementation.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("SLLAB_PURE_PYTHON", "0") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

tilt_reduce = _impl.tilt_reduce
tilt_mean_cov_batch = _impl.tilt_mean_cov_batch
neumaier_sum = _impl.neumaier_sum


def backends():
    """Return ``{name: module}`` for every backend that imports."""
    out = {"python": _fallback}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
