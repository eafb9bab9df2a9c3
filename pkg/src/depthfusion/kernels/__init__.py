"""Backend selection for the convolution patch kernels.

The compiled Cython extension is preferred; the numpy fallback is selected
automatically when it is missing. ``DEPTHFUSION_KERNELS=numpy`` or
``DEPTHFUSION_KERNELS=compiled`` forces a backend (the latter raises if the
extension did not build). Both backends are bit-identical; see
``bench/bench_kernels.py`` for the speed comparison.
"""

import os

from . import conv_numpy

_requested = os.environ.get("DEPTHFUSION_KERNELS", "auto").strip().lower()
if _requested not in ("auto", "compiled", "numpy"):
    raise ValueError(f"DEPTHFUSION_KERNELS must be 'compiled' or 'numpy', got {_requested!r}")

if _requested == "numpy":
    _impl = conv_numpy
    backend = "numpy"
else:
    try:
        from . import _convops as _impl
        backend = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = conv_numpy
        backend = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
