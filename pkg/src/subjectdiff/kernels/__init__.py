"""Mask-selection kernels with a compiled backend and a numpy fallback.

The backend is chosen once at import: the Cython extension when it is built
and ``SUBJECTDIFF_PURE_PYTHON`` is unset, otherwise the fallback.  Both
produce identical outputs.

``topk_order`` always uses numpy's stable argsort: on every grid size we
benchmark it beats the compiled qsort, so only ``allocate_subjects`` is
dispatched.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("SUBJECTDIFF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _native as _impl  # noqa: F811
        BACKEND = "native"
    except ImportError:
        _impl = _fallback

topk_order = _fallback.topk_order
allocate_subjects = _impl.allocate_subjects


def backends():
    """Available implementations, keyed by name."""
    out = {"python": _fallback}
    try:
        from . import _native
        out["native"] = _native
    except ImportError:
        pass
    return out
