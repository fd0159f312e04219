"""Overlapping-patch inference for images of arbitrary size.

The low-resolution image is bicubic-upscaled once, a single noise channel is
drawn for the whole output, and the generator runs on overlapping square
patches of both.  Patch outputs are weighted by a 2-D Hamming window,
accumulated, and divided by the accumulated weight.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import generator as G
from . import kernels
from .resample import pre_upscale
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

FIDELITY_STRIDE = 128
PERCEPTUAL_STRIDE = 64


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch: int
    stride: int
    origins: tuple

    def __len__(self):
        return len(self.origins)


def axis_origins(size, patch, stride):
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def plan_tiles(height, width, patch, stride):
    """Grid origins at multiples of ``stride``, last row/column flush with the border."""
    if patch > min(height, width):
        raise ValueError(f"patch {patch} is larger than the image ({height}x{width})")
    if not 1 <= stride <= patch:
        raise ValueError(f"stride must be in [1, {patch}], got {stride}")
    rows = axis_origins(height, patch, stride)
    cols = axis_origins(width, patch, stride)
    return PatchGrid(height, width, patch, stride, tuple((r, c) for r in rows for c in cols))


def hamming_window(size):
    """``0.54 - 0.46 cos(2 pi n / (N - 1))`` for n = 0 .. N-1."""
    if size < 2:
        raise ValueError(f"window needs at least 2 samples, got {size}")
    n = np.arange(size, dtype=np.float64)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / (size - 1))


def hamming_window_2d(patch):
    """Separable 2-D Hamming window (outer product of two 1-D windows)."""
    w = hamming_window(patch)
    return np.outer(w, w)


@dataclass
class MemoryCounter:
    """Tracks bytes held by the tiling engine's working buffers."""

    current: int = 0
    peak: int = 0
    events: list = field(default_factory=list)

    def alloc(self, nbytes, what=""):
        self.current += int(nbytes)
        self.peak = max(self.peak, self.current)
        self.events.append((what, int(nbytes)))

    def free(self, nbytes):
        self.current -= int(nbytes)


@dataclass(frozen=True)
class TileConfig:
    patch: int = 128
    stride: int = 64
    amplitude: float = 0.0
    seed: int = 0
    scale: int = 16
    workers: int = 1


def upscale_image(lr_image, plan, weights, config=TileConfig(), *, network=None,
                  order=None, counter=None, on_patch=None):
    """Upscale a (3, h, w) low-resolution image by ``config.scale``.

    ``network(rgb_patch, noise_patch)`` replaces the generator when given
    (tests use the identity).  ``order`` permutes the patch processing order;
    ``on_patch(origin, noise_patch)`` observes each patch's noise.
    Accumulation always happens in a fixed order so the result is
    deterministic regardless of ``config.workers``.
    """
    img = lr_image.data if isinstance(lr_image, Tensor) else np.asarray(lr_image, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got shape {img.shape}")
    counter = counter if counter is not None else MemoryCounter()
    if network is None:
        weights.check(plan)

        def network(rgb, noise):
            with no_grad():
                return G.forward(Tensor(rgb[None]), noise[None], plan, weights).data[0]

    big = pre_upscale(img.astype(np.float32), config.scale)
    _, H, W = big.shape
    counter.alloc(big.nbytes, "pre-upscaled input")
    noise = G.noise_channel((H, W), G.NoiseConfig(config.amplitude, config.seed))[0]
    counter.alloc(noise.nbytes, "noise")

    patch = min(config.patch, H, W)
    grid = plan_tiles(H, W, patch, min(config.stride, patch))
    window = hamming_window_2d(patch).astype(np.float32)
    acc = np.zeros((3, H, W), dtype=np.float32)
    weight_acc = np.zeros((H, W), dtype=np.float32)
    counter.alloc(acc.nbytes + weight_acc.nbytes + window.nbytes, "accumulators")

    indices = list(range(len(grid))) if order is None else list(order)
    if sorted(indices) != list(range(len(grid))):
        raise ValueError("order must be a permutation of the patch indices")

    def run(i):
        r, c = grid.origins[i]
        rgb = big[:, r : r + patch, c : c + patch]
        nz = noise[r : r + patch, c : c + patch]
        if on_patch is not None:
            on_patch((r, c), nz)
        out = np.asarray(network(rgb, nz), dtype=np.float32)
        if out.shape != (3, patch, patch):
            raise ValueError(f"network returned shape {out.shape} for a {patch}px patch")
        return out

    patch_bytes = 3 * patch * patch * 4
    workers = max(1, int(config.workers))
    if workers == 1:
        for i in indices:
            counter.alloc(patch_bytes, "patch output")
            out = run(i)
            r, c = grid.origins[i]
            kernels.accumulate_window(acc, weight_acc, out, window, r, c)
            counter.free(patch_bytes)
    else:
        # bounded in-flight window keeps memory at O(workers * patch^2)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for start in range(0, len(indices), workers):
                chunk = indices[start : start + workers]
                counter.alloc(patch_bytes * len(chunk), "patch outputs")
                for i, out in zip(chunk, pool.map(run, chunk)):
                    r, c = grid.origins[i]
                    kernels.accumulate_window(acc, weight_acc, out, window, r, c)
                counter.free(patch_bytes * len(chunk))
    log.debug("blended %d patches of %dpx (stride %d)", len(grid), patch, grid.stride)
    return acc / weight_acc[None]


def ensemble_upscale(lr_image, systems, config=TileConfig(), **kwargs):
    """Average of :func:`upscale_image` over several (plan, weights) systems."""
    if not systems:
        raise ValueError("ensemble needs at least one system")
    total = None
    shape = None
    for plan, weights in systems:
        out = upscale_image(lr_image, plan, weights, config, **kwargs)
        if shape is not None and out.shape != shape:
            raise ValueError(f"ensemble members disagree on output shape: {shape} vs {out.shape}")
        shape = out.shape
        total = out.astype(np.float64) if total is None else total + out
    return (total / len(systems)).astype(np.float32)
