"""Kernel backend selection.

The compiled extension is preferred when importable; otherwise the numpy
fallback is used. ``MOECL_KERNELS=python`` forces the fallback (used by
the benchmark to compare both backends in one process).
"""

import os

from . import _numpy_kernels

if os.environ.get("MOECL_KERNELS", "").lower() == "python":
    _impl = _numpy_kernels
    BACKEND = "python"
else:
    try:
        from . import _fastkernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _numpy_kernels
        BACKEND = "python"

gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
adamw_step = _impl.adamw_step

numpy_backend = _numpy_kernels
