"""Kernel dispatch: use the compiled core when importable, else numpy.

Set ``HYBRIDATTN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("HYBRIDATTN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

matmul = _impl.matmul
decay_scan = _impl.decay_scan
round_bf16 = _impl.round_bf16
