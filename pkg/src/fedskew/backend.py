"""Kernel backend selection.

The hot inner loops (sequential SGD steps) are compiled with numba when it is
available.  Setting ``FEDSKEW_BACKEND=numpy`` forces the pure-numpy fallback;
``FEDSKEW_BACKEND=numba`` demands the compiled path and raises if numba cannot
be imported.  The default (``auto``) tries numba and silently falls back.

Comparing the two lanes: ``python benchmarks/benchmark_kernels.py``.
"""

from __future__ import annotations

import os

_ENV_VAR = "FEDSKEW_BACKEND"
_VALID = ("auto", "numba", "numpy")

_requested = os.environ.get(_ENV_VAR, "auto").lower()
if _requested not in _VALID:
    raise RuntimeError(
        f"{_ENV_VAR}={_requested!r} is not one of {_VALID}"
    )

if _requested == "numpy":
    _active = "numpy"
    _njit = None
else:
    try:
        from numba import njit as _njit

        _active = "numba"
    except ImportError:
        if _requested == "numba":
            raise RuntimeError(
                f"{_ENV_VAR}=numba but numba is not importable"
            )
        _active = "numpy"
        _njit = None


def active_backend() -> str:
    """Name of the kernel lane in use: 'numba' or 'numpy'."""
    return _active


def jit_kernel(func):
    """Compile ``func`` with numba on the numba lane; identity otherwise.

    Kernel bodies are written in the numba-supported numpy subset so the
    exact same code runs on both lanes.
    """
    if _active == "numba":
        return _njit(cache=True)(func)
    return func
