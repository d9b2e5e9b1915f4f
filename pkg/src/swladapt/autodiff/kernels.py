"""Backend selection for the convolution kernels.

The compiled extension is preferred when importable; set
``SWLADAPT_KERNELS=python`` or ``SWLADAPT_KERNELS=cython`` to force one side
(forcing an unavailable backend raises at import).
"""

import os

import numpy as np

from . import _numpykernels

try:
    from . import _fastkernels
except ImportError:
    _fastkernels = None

_requested = os.environ.get("SWLADAPT_KERNELS", "auto").lower()
if _requested == "python":
    _impl = _numpykernels
elif _requested == "cython":
    if _fastkernels is None:
        raise ImportError("SWLADAPT_KERNELS=cython but the compiled extension is missing")
    _impl = _fastkernels
elif _requested == "auto":
    _impl = _fastkernels if _fastkernels is not None else _numpykernels
else:
    raise ValueError(f"unknown SWLADAPT_KERNELS value: {_requested!r}")


def backend_name():
    return "cython" if _impl is _fastkernels else "python"


def has_compiled_backend():
    return _fastkernels is not None


def get_backend(name):
    """Return a kernel module by name, for benchmarks and equality tests."""
    if name == "python":
        return _numpykernels
    if name == "cython":
        if _fastkernels is None:
            raise ImportError("compiled kernel extension not available")
        return _fastkernels
    raise ValueError(name)


def im2col(x, kernel, stride, pad_left, pad_right):
    return _impl.im2col(np.ascontiguousarray(x), kernel, stride, pad_left, pad_right)


def col2im(cols, kernel, stride, pad_left, pad_right, length):
    return _impl.col2im(np.ascontiguousarray(cols), kernel, stride, pad_left, pad_right, length)
