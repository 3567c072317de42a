"""Kernel backend selection: compiled extension if built, pure fallback otherwise.

Set EVOCAST_PURE_PUSH=1 to force the pure-Python path (used by the
benchmark and the backend-equivalence tests).
"""

from __future__ import annotations

import os

from . import _push_pure

try:
    from . import _push as _push_ext
except ImportError:  # extension not built; fall back silently
    _push_ext = None


def _use_pure() -> bool:
    return _push_ext is None or os.environ.get("EVOCAST_PURE_PUSH", "") == "1"


def backend_name() -> str:
    return "pure" if _use_pure() else "compiled"


def forward_push(indptr, indices, seed, alpha, eps):
    if _use_pure():
        return _push_pure.forward_push(indptr, indices, seed, alpha, eps)
    return _push_ext.forward_push(indptr, indices, int(seed), alpha, eps)
