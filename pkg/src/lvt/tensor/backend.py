"""Kernel backend selection.

The compiled kernels are used when the extension is importable; setting
``LVT_PURE_PYTHON=1`` forces the numpy fallback. ``use_backend`` swaps the
active module at runtime (tests and the benchmark compare both).
"""
import os

from . import _kernels_py

try:
    from . import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

_BACKENDS = {"python": _kernels_py}
if _kernels_c is not None:
    _BACKENDS["cython"] = _kernels_c

if os.environ.get("LVT_PURE_PYTHON") or _kernels_c is None:
    active = _kernels_py
    name = "python"
else:
    active = _kernels_c
    name = "cython"


def available():
    return sorted(_BACKENDS)


def use_backend(backend):
    """Select ``"python"`` or ``"cython"`` kernels; returns the previous name."""
    global active, name
    if backend not in _BACKENDS:
        raise ValueError(f"backend {backend!r} not available (have {available()})")
    prev = name
    active = _BACKENDS[backend]
    name = backend
    return prev
