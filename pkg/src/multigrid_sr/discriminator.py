"""Multi-scale discriminator.

The input image enters at four scales {x, S2 x, S4 x, S8 x}.  Each scale is
preprocessed by :func:`vnsc` and passed through its own 4-layer CNN whose last
layer halves the resolution, so the features line up with the next scale.
Global average pooling and a linear head give one score per image.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .resample import downscale
from .tensor import ConvSpec, ShapeError, Tensor

SCALES = (1, 2, 4, 8)
DESK_WIDTHS = (32, 32, 48, 64)
VNSC_WINDOW = 7
VNSC_EPS = 1e-4
SC_CHANNELS = VNSC_WINDOW * VNSC_WINDOW


@lru_cache(maxsize=64)
def _edge_pad_matrix(size, radius):
    idx = np.clip(np.arange(-radius, size + radius), 0, size - 1)
    mat = np.zeros((size + 2 * radius, size))
    mat[np.arange(size + 2 * radius), idx] = 1.0
    return mat


def _box_mean(x, radius):
    """Edge-clamped (2r+1)^2 box average over the trailing axes."""
    h, w = x.shape[-2:]
    padded = T.separable_linear(x, _edge_pad_matrix(h, radius), _edge_pad_matrix(w, radius))
    n = 2 * radius + 1
    acc = None
    for dy in range(n):
        for dx in range(n):
            tap = padded[..., dy : dy + h, dx : dx + w]
            acc = tap if acc is None else acc + tap
    return T.scale(acc, 1.0 / (n * n))


def vnsc(img, window=VNSC_WINDOW, eps=VNSC_EPS):
    """Variance normalisation followed by a shift correlator.

    Luminance (channel mean) is normalised by its local mean and standard
    deviation over a ``window`` x ``window`` neighbourhood; the correlator
    then emits ``n(p) * n(p + d)`` for every displacement d in the same
    neighbourhood, giving ``window**2`` channels at the input resolution.
    """
    x = img if isinstance(img, Tensor) else Tensor(img)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.shape[1] != 3:
        raise ShapeError("vnsc", "channels", 3, x.shape[1])
    r = window // 2
    lum = x.mean(axis=1, keepdims=True)
    # subtracting one pixel keeps constant images exactly zero; vnsc is shift invariant
    lum = lum - Tensor(lum.data[:, :, :1, :1].copy())
    m = _box_mean(lum, r)
    var = T.clamp_min(_box_mean(T.square(lum), r) - T.square(m), 0.0)
    sigma = T.sqrt(var + eps * eps)
    n = (lum - m) / (sigma + eps)
    h, w = n.shape[-2:]
    npad = T.separable_linear(n, _edge_pad_matrix(h, r), _edge_pad_matrix(w, r))
    chans = [
        n * npad[..., dy : dy + h, dx : dx + w]
        for dy in range(window)
        for dx in range(window)
    ]
    return T.concat_channels(chans)


def layer_specs(widths=DESK_WIDTHS):
    """ConvSpecs of each scale's CNN (4 layers, last one stride 2)."""
    specs = []
    prev = 0
    for width in widths:
        cin = SC_CHANNELS + prev
        specs.append(
            [
                ConvSpec(cin, width, 3, 1, 1),
                ConvSpec(width, width, 3, 1, 1),
                ConvSpec(width, width, 3, 1, 1),
                ConvSpec(width, width, 3, 2, 1),
            ]
        )
        prev = width
    return specs


class DiscriminatorWeights:
    """Per-scale CNN parameters (never shared) plus the linear head."""

    def __init__(self, widths, layers, head):
        self.widths = tuple(widths)
        self.layers = layers
        self.head = head

    def parameters(self):
        out = [t for level in self.layers for pair in level for t in pair]
        return out + list(self.head)

    def named_parameters(self):
        for s, level in enumerate(self.layers):
            for j, (w, b) in enumerate(level):
                yield f"D/{s}/{j}:weight", w
                yield f"D/{s}/{j}:bias", b
        yield "D/head:weight", self.head[0]
        yield "D/head:bias", self.head[1]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype, requires_grad=None):
        layers = [[(w.astype(dtype, requires_grad), b.astype(dtype, requires_grad)) for w, b in lv] for lv in self.layers]
        head = tuple(t.astype(dtype, requires_grad) for t in self.head)
        return DiscriminatorWeights(self.widths, layers, head)

    def check(self):
        specs = layer_specs(self.widths)
        if len(self.layers) != len(SCALES):
            raise ValueError(f"expected {len(SCALES)} CNNs, got {len(self.layers)}")
        for s, (level, level_specs) in enumerate(zip(self.layers, specs)):
            for j, ((w, b), spec) in enumerate(zip(level, level_specs)):
                if w.shape != spec.weight_shape() or b.shape != (spec.out_channels,):
                    raise ValueError(f"discriminator scale {s} layer {j}: bad shapes {w.shape} {b.shape}")
        if self.head[0].shape != (self.widths[-1], 1) or self.head[1].shape != (1,):
            raise ValueError("discriminator head has the wrong shape")


def init_discriminator(widths=DESK_WIDTHS, seed=0, dtype=np.float32):
    if len(widths) != len(SCALES):
        raise ValueError(f"need {len(SCALES)} widths, got {len(widths)}")
    rng = np.random.default_rng(seed)

    def param(shape, std):
        return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)

    layers = []
    for level_specs in layer_specs(widths):
        level = []
        for spec in level_specs:
            fan_in = spec.in_channels * spec.kernel**2
            level.append((param(spec.weight_shape(), np.sqrt(2.0 / fan_in)), param((spec.out_channels,), 0.0)))
        layers.append(level)
    head = (param((widths[-1], 1), np.sqrt(1.0 / widths[-1])), param((1,), 0.0))
    return DiscriminatorWeights(widths, layers, head)


def pyramid(image):
    """{x, S2 x, S4 x, S8 x}."""
    return [downscale(image, f) for f in SCALES]


def discriminate(image, weights):
    """Score each image in the batch; returns a (N,) tensor of logits."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    specs = layer_specs(weights.widths)
    feat = None
    for s, level_img in enumerate(pyramid(x)):
        inp = vnsc(level_img)
        if feat is not None:
            if feat.shape[-2:] != inp.shape[-2:]:
                raise ShapeError("discriminate", "merge size", inp.shape[-2:], feat.shape[-2:])
            inp = T.concat_channels([inp, feat])
        for (w, b), spec in zip(weights.layers[s], specs[s]):
            inp = T.relu(T.conv2d(inp, w, b, spec))
        feat = inp
    pooled = feat.mean(axis=(2, 3))
    w, b = weights.head
    return (pooled @ w + b).reshape((pooled.shape[0],))
