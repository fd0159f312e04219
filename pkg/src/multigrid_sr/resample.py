"""Bicubic (Catmull-Rom) resampling by power-of-two factors.

Resampling is separable, so each direction is a dense (out, in) matrix built
once per (size, factor, direction) and applied with
:func:`~multigrid_sr.tensor.separable_linear`.  That keeps it differentiable
and makes the adjoint exact.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import Tensor, separable_linear

CUBIC_A = -0.5
FACTORS = (2, 4, 8, 16)


@dataclass(frozen=True)
class ScaleFactor:
    factor: int
    direction: str = "down"

    def __post_init__(self):
        if self.factor not in FACTORS:
            raise ValueError(f"scale factor must be one of {FACTORS}, got {self.factor}")
        if self.direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {self.direction!r}")

    def out_size(self, size):
        if self.direction == "up":
            return size * self.factor
        return -(-size // self.factor)


def cubic(x, a=CUBIC_A):
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=256)
def resize_matrix(in_size, factor, direction):
    """Row-stochastic (out, in) resampling matrix with edge-clamped taps.

    Downscaling widens the kernel by ``factor`` (antialiasing).  Output pixel
    centres map to input coordinates with the half-pixel convention.
    """
    sf = ScaleFactor(factor, direction)
    out_size = sf.out_size(in_size)
    i = np.arange(out_size, dtype=np.float64)
    if direction == "up":
        centre = (i + 0.5) / factor - 0.5
        width = 1.0
    else:
        centre = (i + 0.5) * factor - 0.5
        width = float(factor)
    radius = 2.0 * width
    first = np.floor(centre - radius).astype(int) + 1
    n_taps = int(np.ceil(2 * radius)) + 1
    taps = first[:, None] + np.arange(n_taps)[None, :]
    w = cubic((taps - centre[:, None]) / width)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), n_taps)
    np.add.at(mat, (rows, np.clip(taps, 0, in_size - 1).ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


def bicubic(img, factor, direction="down"):
    """Resample the two trailing axes of ``img`` by ``factor``.

    Accepts a :class:`Tensor` (result is recorded on the tape) or a plain
    ndarray (result is an ndarray).
    """
    sf = ScaleFactor(factor, direction)
    h, w = img.shape[-2:]
    if h < 4 or w < 4:
        raise ValueError(f"bicubic needs an image of at least 4x4, got {h}x{w}")
    rows = resize_matrix(h, sf.factor, sf.direction)
    cols = resize_matrix(w, sf.factor, sf.direction)
    if isinstance(img, Tensor):
        return separable_linear(img, rows, cols)
    arr = np.asarray(img)
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    return (rows.astype(dtype) @ arr.astype(dtype) @ cols.T.astype(dtype)).astype(dtype)


def downscale(img, factor):
    """S_f: bicubic downscale by ``factor`` (identity for factor 1)."""
    if factor == 1:
        return img
    return bicubic(img, factor, "down")


def upscale(img, factor):
    if factor == 1:
        return img
    return bicubic(img, factor, "up")


def pre_upscale(img, factor=16, like=None):
    """Bicubic upscale, then crop top-left to ``like``'s spatial size if given.

    This is the generator's input convention: the network sees the low
    resolution image already brought to the output size.
    """
    up = upscale(img, factor)
    if like is not None:
        th, tw = like
        up = up[..., :th, :tw]
    return up
