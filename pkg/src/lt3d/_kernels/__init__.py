"""Hot-kernel dispatch.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is selected at import. Set ``LT3D_PURE_PYTHON=1`` to force the
fallback, or call :func:`use_backend` at runtime.
"""
import os

from . import _numpy

try:
    from . import _native
except ImportError:  # extension not built
    _native = None

_BACKENDS = {"numpy": _numpy}
if _native is not None:
    _BACKENDS["cython"] = _native

_active = _numpy


def available_backends():
    return tuple(_BACKENDS)


def backend_name():
    return "cython" if _active is _native and _native is not None else "numpy"


def use_backend(name):
    """Switch the kernel implementation; returns the previous backend name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {available_backends()}")
    prev = backend_name()
    _active = _BACKENDS[name]
    return prev


def im2col(x, kd, kh, kw, sd, sh, sw):
    return _active.im2col(x, kd, kh, kw, sd, sh, sw)


def col2im(cols, dp, hp, wp, c, kd, kh, kw, sd, sh, sw):
    return _active.col2im(cols, dp, hp, wp, c, kd, kh, kw, sd, sh, sw)


def nearest_sq_dists(a, b):
    return _active.nearest_sq_dists(a, b)


if _native is not None and os.environ.get("LT3D_PURE_PYTHON", "") not in ("1", "true", "yes"):
    use_backend("cython")
