"""Kernel dispatch: the compiled extension when importable, else the numpy reference.

Set ``RISMRL_PURE_PYTHON=1`` to force the reference implementation.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("RISMRL_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

sfp_sweep = _impl.sfp_sweep
trace_inv_gram = _impl.trace_inv_gram

__all__ = ["BACKEND", "sfp_sweep", "trace_inv_gram"]
