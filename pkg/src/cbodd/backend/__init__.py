"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy reference
implementation is the fallback.  ``CBODD_BACKEND=reference`` or
``CBODD_BACKEND=compiled`` forces a choice (the latter raises if the
extension was not built).  Both backends expose the same functions and
agree to floating-point reduction-order differences.
"""

import os

from cbodd.backend import reference

_requested = os.environ.get("CBODD_BACKEND", "auto")

if _requested in ("auto", "compiled"):
    try:
        from cbodd.backend import _fastkern as _impl
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = reference
elif _requested == "reference":
    _impl = reference
else:
    raise RuntimeError(
        f"CBODD_BACKEND must be 'auto', 'compiled' or 'reference', got {_requested!r}"
    )

ACTIVE_BACKEND: str = _impl.BACKEND_NAME

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight
