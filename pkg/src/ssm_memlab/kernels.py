"""Backend selection for the scan kernels.

The compiled extension is used when it imported cleanly; otherwise the numpy
fallback is used. Setting ``SSM_MEMLAB_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _scan_py

BACKEND = "python"
_impl = _scan_py

if os.environ.get("SSM_MEMLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _scan_ext as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _scan_py


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def layer_forward(a_bar, delta, bp, cp, u, h0):
    """Returns ``(h, y_state)``; see ``_scan_py.layer_forward``."""
    return _impl.layer_forward(_c(a_bar), _c(delta), _c(bp), _c(cp), _c(u), _c(h0))


def layer_backward(delta, A, bp, cp, u, a_bar, h, h0, grad_y):
    """Returns ``(g_delta, g_A, g_bp, g_cp, g_u, g_h0)``; see ``_scan_py.layer_backward``."""
    return _impl.layer_backward(_c(delta), _c(A), _c(bp), _c(cp), _c(u), _c(a_bar), _c(h), _c(h0), _c(grad_y))


def backends():
    """Return every importable backend module keyed by name."""
    found = {"python": _scan_py}
    try:
        from . import _scan_ext

        found["cython"] = _scan_ext
    except ImportError:
        pass
    return found
