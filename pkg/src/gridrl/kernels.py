"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the pure-Python
twin.  ``GRIDRL_KERNELS=python`` forces the fallback.
"""
import os

from . import _kernels_py

_forced = os.environ.get("GRIDRL_KERNELS", "").lower()

if _forced == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _kernels_py

BACKEND = _impl.BACKEND
components = _impl.components
dc_angles = _impl.dc_angles
dc_network = _impl.dc_network
sumtree_set = _impl.sumtree_set
sumtree_find = _impl.sumtree_find


def backends():
    """All importable backends, keyed by name (used by parity tests and benchmarks)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
        out["cython"] = _kernels
    except ImportError:
        pass
    return out
