"""Numpy versions of the compiled kernels in ``_ckernels.pyx``.

Both modules expose the same three functions with the same semantics, so the
test-suite can run one against the other.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, oh, ow):
    """Unfold ``x`` of shape (N, C, H, W) into (N, C*k*k, oh*ow) columns.

    ``x`` must already carry any padding; the window at output position
    (oy, ox) starts at (oy*stride, ox*stride).
    """
    n, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (N, C, oh, ow, k, k) -> (N, C, k, k, oh, ow)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, oh * ow)


def col2im(cols, channels, height, width, k, stride, oh, ow):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    n = cols.shape[0]
    out = np.zeros((n, channels, height, width), dtype=cols.dtype)
    cols = cols.reshape(n, channels, k, k, oh, ow)
    for ki in range(k):
        rows = slice(ki, ki + (oh - 1) * stride + 1, stride)
        for kj in range(k):
            out[:, :, rows, kj : kj + (ow - 1) * stride + 1 : stride] += cols[:, :, ki, kj]
    return out


def accumulate_window(acc, weight_acc, patch, window, row, col):
    """In-place ``acc += patch*window`` and ``weight_acc += window`` at an offset."""
    ph, pw = window.shape
    acc[:, row : row + ph, col : col + pw] += patch * window
    weight_acc[row : row + ph, col : col + pw] += window
