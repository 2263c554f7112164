"""Backend selection for the hot kernels.

The compiled extension is used when importable; otherwise (or when
``MCEM_SSM_BACKEND=python``) the pure-numpy fallback is used. Both expose
the same functions.
"""

import os

from . import _pykernels

_requested = os.environ.get("MCEM_SSM_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _pykernels
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _pykernels

BACKEND = "python" if _impl is _pykernels else "cython"

psd_cholesky = _impl.psd_cholesky
psd_solve = _impl.psd_solve
kalman_filter = _impl.kalman_filter
ffbs_backward = _impl.ffbs_backward
rts_smoother = _impl.rts_smoother
draw_missing = _impl.draw_missing


def get_backend(name):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")
