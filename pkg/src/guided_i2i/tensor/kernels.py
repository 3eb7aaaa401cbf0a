"""Kernel backend selection.

The compiled extension is used when importable; set ``GI2I_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels

_pure = os.environ.get("GI2I_PURE_PYTHON", "").strip() not in ("", "0")

if _pure:
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
group_norm_forward = _impl.group_norm_forward
group_norm_backward = _impl.group_norm_backward
kmeans_dp_tables = _impl.kmeans_dp_tables


def available_backends():
    """Map backend name -> kernel module for every importable implementation."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["compiled"] = _ckernels
    except ImportError:
        pass
    return out
