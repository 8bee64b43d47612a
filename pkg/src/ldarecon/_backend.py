"""Select the convolution kernel implementation at import time.

The compiled extension is used when it is importable, unless the
environment variable ``LDARECON_PURE_PYTHON`` is set to a non-empty value.
"""
import os

from ldarecon import _pykernels

try:
    if os.environ.get("LDARECON_PURE_PYTHON"):
        raise ImportError("pure-python backend forced by environment")
    from ldarecon import _ckernels
except ImportError:
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

BACKEND = "cython" if _ckernels is not None else "python"
kernels = BACKENDS[BACKEND]


def get(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        return kernels
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"backend {name!r} not available; have {sorted(BACKENDS)}") from None
