"""Backend switch for the compiled kernels.

Set ``CAUSTICA_DISABLE_NUMBA=1`` to force the pure-numpy code paths (useful
for debugging, coverage, or platforms without numba).
"""

from __future__ import annotations

import os

_FALSY = {"", "0", "false", "no", "off"}

try:  # pragma: no cover - exercised implicitly
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

NUMBA_AVAILABLE = _numba is not None
USE_NUMBA = NUMBA_AVAILABLE and (
    os.environ.get("CAUSTICA_DISABLE_NUMBA", "0").strip().lower() in _FALSY
)


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if _numba is None:
        return fn
    return _numba.njit(cache=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
