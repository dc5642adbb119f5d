"""Kernel backend selection.

The hot kernels (softmax, layernorm, gelu, the optimizer update) exist twice:
jitted with numba and in pure numpy. The environment variable
``ATTNCONV_BACKEND`` picks one:

    ATTNCONV_BACKEND=numba   force the jitted kernels (error if numba missing)
    ATTNCONV_BACKEND=numpy   force the pure-numpy fallback
    unset                    numba when importable, else numpy

The choice is fixed per process; the determinism guarantees of the tensor
library hold within one backend, not across backends (the jitted kernels
reduce strictly left-to-right, numpy reduces pairwise).
"""

import os

from . import _kernels_numpy

_requested = os.environ.get("ATTNCONV_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"ATTNCONV_BACKEND={_requested!r} not understood; use 'numba' or 'numpy'"
    )

if _requested == "numpy":
    _impl = _kernels_numpy
    _name = "numpy"
else:
    try:
        from . import _kernels_numba as _impl

        _name = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = _kernels_numpy
        _name = "numpy"


def backend_name() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return _name


softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
adamw_step = _impl.adamw_step
