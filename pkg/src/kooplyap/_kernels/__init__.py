"""Kernel backend selection.

The compiled extension (`kooplyap._kernels._native`) is preferred when it
imports cleanly; otherwise the numpy fallback is used. Override with the
environment variable KL_BACKEND:

  KL_BACKEND=auto    pick native if available (default)
  KL_BACKEND=python  force the numpy implementation
  KL_BACKEND=native  require the compiled extension, fail loudly otherwise
"""

import os

from . import numpy_backend

_choice = os.environ.get("KL_BACKEND", "auto").lower()
if _choice not in ("auto", "python", "native"):
    raise ValueError(f"KL_BACKEND must be auto|python|native, got {_choice!r}")

BACKEND = "python"
_impl = numpy_backend
if _choice in ("auto", "native"):
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        if _choice == "native":
            raise ImportError(
                "KL_BACKEND=native but kooplyap._kernels._native is not built"
            ) from None

monomial_values = _impl.monomial_values
monomial_jacobian = _impl.monomial_jacobian
poly_eval = _impl.poly_eval
rk4_rollout = _impl.rk4_rollout

__all__ = [
    "BACKEND",
    "monomial_values",
    "monomial_jacobian",
    "poly_eval",
    "rk4_rollout",
]
