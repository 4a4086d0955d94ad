"""Hot-kernel dispatch.

The numba versions are used unless ``PREDAMM_DISABLE_NUMBA`` is set to a
truthy value (or numba cannot be imported), in which case the pure-numpy
reference path runs instead. Both paths are importable directly for tests
and the benchmark as ``numpy_impl`` / ``numba_impl``.
"""
import os

from . import _kernels_np as numpy_impl

_FLAG = "PREDAMM_DISABLE_NUMBA"


def _numba_requested():
    return os.environ.get(_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


try:
    from . import _kernels_nb as numba_impl
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

USING_NUMBA = numba_impl is not None and _numba_requested()
_impl = numba_impl if USING_NUMBA else numpy_impl

scan_event = _impl.scan_event
event_indices = _impl.event_indices
load_x = _impl.load_x
simpson_sum = _impl.simpson_sum
load_branch_integral = _impl.load_branch_integral

__all__ = [
    "USING_NUMBA",
    "numpy_impl",
    "numba_impl",
    "scan_event",
    "event_indices",
    "load_x",
    "simpson_sum",
    "load_branch_integral",
]
