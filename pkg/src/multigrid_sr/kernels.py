"""Kernel backend selection.

The compiled extension is used when it was built; set ``MULTIGRID_SR_PURE=1``
to force the numpy implementations.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_impl = _pykernels
BACKEND = "python"


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Switch the process-wide kernel implementation ("cython" or "python")."""
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available; have {available_backends()}")
    _impl = _BACKENDS[name]
    BACKEND = name


if _ckernels is not None and os.environ.get("MULTIGRID_SR_PURE") != "1":
    set_backend("cython")


def _contig(a):
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def im2col(x, k, stride, oh, ow):
    return _impl.im2col(_contig(x), k, stride, oh, ow)


def col2im(cols, channels, height, width, k, stride, oh, ow):
    return _impl.col2im(_contig(cols), channels, height, width, k, stride, oh, ow)


def accumulate_window(acc, weight_acc, patch, window, row, col):
    _impl.accumulate_window(acc, weight_acc, _contig(patch), _contig(window), row, col)
