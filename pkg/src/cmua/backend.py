"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy
fallback is used. Set ``CMUA_BACKEND=python`` to force the fallback.
"""

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

_backends = {"python": _fallback}
try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None
else:
    _backends["cython"] = _kernels

_requested = os.environ.get("CMUA_BACKEND", "").strip().lower()
if _requested and _requested not in ("python", "cython"):
    raise ImportError(f"CMUA_BACKEND must be 'python' or 'cython', got {_requested!r}")
if _requested == "cython" and _kernels is None:
    raise ImportError("CMUA_BACKEND=cython but the compiled extension is not available")

_active = _requested or ("cython" if _kernels is not None else "python")
_threads = 1
if _active == "python" and not _requested:
    log.debug("compiled kernels unavailable; using numpy fallback")


def available():
    return sorted(_backends)


def name():
    return _active


def use(backend):
    """Switch the active backend (``"cython"`` or ``"python"``)."""
    global _active
    if backend not in _backends:
        raise ValueError(f"backend {backend!r} not available; have {available()}")
    _active = backend


def set_threads(n):
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def threads():
    return _threads


def conv2d_forward(x, w, bias=None):
    return _backends[_active].conv2d_forward(x, w, bias, _threads)


def conv2d_weight_grad(x, dy, k):
    return _backends[_active].conv2d_weight_grad(x, dy, k)
