"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy versions
are used. Set ``NARCP_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

if os.environ.get("NARCP_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

wrap_angle = _impl.wrap_angle
unicycle_advance = _impl.unicycle_advance
gae = _impl.gae
value_iteration = _impl.value_iteration


def backends():
    """Return the available backend modules keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
