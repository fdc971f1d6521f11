"""Hot convolution kernels.

The compiled ``_im2col`` extension is used when it was built; otherwise the
NumPy implementation in ``_fallback`` is selected. Set ``LEFORMER_PURE_PYTHON=1``
to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"

if os.environ.get("LEFORMER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _im2col as _compiled
    except ImportError:
        _compiled = None
else:
    _compiled = None

if _compiled is not None:
    im2col = _compiled.im2col
    col2im = _compiled.col2im
    BACKEND = "cython"
else:
    im2col = _fallback.im2col
    col2im = _fallback.col2im

__all__ = ["im2col", "col2im", "BACKEND"]
