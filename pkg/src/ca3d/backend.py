"""Kernel backend selection: compiled core if importable, NumPy fallback otherwise.

Set CA3D_FORCE_FALLBACK=1 to skip the compiled module (used by the backend
equivalence tests and the kernel benchmark). CA3D_THREADS caps the row
parallelism of the compiled matmul; per-element reduction order is fixed, so
results are bit-identical at any thread count.
"""

import os

from . import _fallback

try:  # pragma: no cover - exercised indirectly via BACKEND
    from . import _native
except ImportError:  # pragma: no cover
    _native = None

if os.environ.get("CA3D_FORCE_FALLBACK") == "1":
    _impl = _fallback
else:
    _impl = _native if _native is not None else _fallback

BACKEND = "native" if _impl is not _fallback else "fallback"


def _thread_count():
    try:
        return max(1, int(os.environ.get("CA3D_THREADS", "1")))
    except ValueError:
        return 1


def round_half(x):
    return _impl.round_half(x)


def matmul_half(a, b):
    return _impl.matmul_half(a, b, _thread_count())


def sum_half_rows(x):
    return _impl.sum_half_rows(x)


def implementations():
    """All available kernel backends, keyed by name (for tests/benchmarks)."""
    impls = {"fallback": _fallback}
    if _native is not None:
        impls["native"] = _native
    return impls
