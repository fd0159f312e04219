"""Generator forward pass over a :class:`~multigrid_sr.plan.NetworkPlan`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .plan import ANALYSIS, DOWNSCALE, SYNTHESIS, UPSCALE, ModuleTag
from .tensor import ShapeError, Tensor


class WeightMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError(f"noise amplitude must be >= 0, got {self.amplitude}")


def noise_channel(shape, config: NoiseConfig, dtype=np.float32):
    """Sample the single full-resolution noise channel, already scaled by W.

    ``shape`` is ``(N, H, W)`` or ``(H, W)``; the result has a channel axis of
    size one inserted before the spatial axes.
    """
    *batch, h, w = shape
    out_shape = (*batch, 1, h, w)
    if config.amplitude == 0:
        return np.zeros(out_shape, dtype=dtype)
    rng = np.random.default_rng(config.seed)
    return (config.amplitude * rng.standard_normal(out_shape)).astype(dtype)


class GeneratorWeights:
    """Kernel and bias tensors for every tag of a plan."""

    def __init__(self, params):
        self.params = dict(params)

    def __getitem__(self, tag):
        return self.params[tag]

    def __len__(self):
        return len(self.params)

    def parameters(self):
        return [t for pair in self.params.values() for t in pair]

    def named_parameters(self):
        for tag, (w, b) in self.params.items():
            yield f"{tag}:weight", w
            yield f"{tag}:bias", b

    def astype(self, dtype, requires_grad=None):
        return GeneratorWeights(
            {tag: (w.astype(dtype, requires_grad), b.astype(dtype, requires_grad)) for tag, (w, b) in self.params.items()}
        )

    def copy(self):
        return self.astype(self.parameters()[0].dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def check(self, plan):
        tags = set(plan.tags)
        if set(self.params) != tags:
            missing = sorted(map(str, tags - set(self.params)))
            extra = sorted(map(str, set(self.params) - tags))
            raise WeightMismatchError(f"weights do not match plan (missing {missing[:3]}, extra {extra[:3]})")
        for tag, spec in plan:
            w, b = self.params[tag]
            if w.shape != spec.weight_shape() or b.shape != (spec.out_channels,):
                raise WeightMismatchError(
                    f"{tag}: expected weight {spec.weight_shape()} bias {(spec.out_channels,)}, "
                    f"got {w.shape} {b.shape}"
                )


def init_weights(plan, seed=0, dtype=np.float32, requires_grad=True):
    """Kaiming fan-in initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for tag, spec in plan:
        k2 = spec.kernel * spec.kernel
        fan_in = spec.in_channels * k2
        if spec.transposed:
            # each output pixel sees about k^2 / stride^2 taps per input channel
            fan_in = max(1, fan_in // (spec.stride * spec.stride))
        std = np.sqrt(2.0 / fan_in)
        w = rng.standard_normal(spec.weight_shape()) * std
        params[tag] = (
            Tensor(w.astype(dtype), requires_grad=requires_grad, name=f"{tag}:weight"),
            Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=requires_grad, name=f"{tag}:bias"),
        )
    return GeneratorWeights(params)


def _as_batch(x):
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError("generator", "input rank", 4, x.ndim)
    return x


def network_input(input_rgb, noise, dtype=None):
    """Concatenate the RGB input with the (scaled) noise channel."""
    rgb = _as_batch(input_rgb)
    n, c, h, w = rgb.shape
    if c != 3:
        raise ShapeError("generator", "input channels", 3, c)
    if noise is None:
        noise = NoiseConfig()
    if isinstance(noise, NoiseConfig):
        chan = noise_channel((n, h, w), noise, dtype=rgb.dtype)
    else:
        chan = noise.data if isinstance(noise, Tensor) else np.asarray(noise)
        chan = chan.reshape((-1, 1) + chan.shape[-2:]).astype(rgb.dtype, copy=False)
        if chan.shape[-2:] != (h, w):
            raise ShapeError("generator", "noise spatial size", (h, w), chan.shape[-2:])
        if chan.shape[0] != n:
            chan = np.broadcast_to(chan, (n, 1, h, w))
    return T.concat_channels([rgb, Tensor(np.ascontiguousarray(chan))])


def run_network(x, plan, weights, activation=T.relu, trace=None):
    """Execute the unfolded recursion on a prepared 4-channel input.

    ``activation`` is applied after every convolution except Synthesis; the
    frozen-mask probe swaps it out.  When ``trace`` is a list, each executed
    module appends ``(tag, input_shape, output_shape)``.
    """
    L = plan.levels
    h, w = x.shape[-2:]
    if min(h, w) < plan.min_size():
        raise ShapeError("generator", "spatial size", f">= {plan.min_size()}", (h, w))

    def apply(tag, inp):
        spec = plan.spec(tag)
        wt, b = weights[tag]
        out = T.conv(inp, wt, b, spec)
        if trace is not None:
            trace.append((tag, inp.shape, out.shape))
        return out

    y = {}
    for k in range(1, L + 1):
        y[k] = activation(apply(ModuleTag(ANALYSIS, k), x))

    def back_project(k, u, path):
        out = u
        if k > 1:
            for s in range(1, plan.mu + 1):
                step = path + (s,)
                low = activation(apply(ModuleTag(DOWNSCALE, k, step), out))
                c = back_project(k - 1, low, step)
                up = apply(ModuleTag(UPSCALE, k, step), T.concat_channels([y[k - 1], c]))
                up = T.crop_to(up, *out.shape[-2:])
                out = out + activation(up)
        return out

    feat = back_project(L, y[L], ())
    return apply(ModuleTag(SYNTHESIS, L), feat)


def forward(input_rgb, noise, plan, weights, trace=None):
    """Full generator: noise concat, analysis pyramid, recursion, synthesis.

    ``noise`` is a :class:`NoiseConfig` or a precomputed noise channel
    (already multiplied by the amplitude) matching the input's spatial size.
    """
    weights.check(plan)
    x = network_input(input_rgb, noise)
    return run_network(x, plan, weights, trace=trace)


def _zero_bias(weights):
    return GeneratorWeights(
        {tag: (w.detach(), Tensor(np.zeros_like(b.data))) for tag, (w, b) in weights.params.items()}
    )


def frozen_response(input_rgb, noise, plan, weights, probe):
    """Push ``probe`` (N, 4, H, W) through the network with frozen ReLU masks.

    The masks come from a reference pass on the real input; biases are
    dropped, so the map from ``probe`` to the output is linear.
    """
    weights.check(plan)
    masks = []

    def record(t):
        masks.append(t.data > 0)
        return T.relu(t)

    with T.no_grad():
        x = network_input(input_rgb, noise)
        run_network(x, plan, weights, activation=record)
        replay = iter(masks)

        def frozen(t):
            return T.mul(t, Tensor(next(replay).astype(t.dtype)))

        probe = probe if isinstance(probe, Tensor) else Tensor(np.asarray(probe, dtype=x.dtype))
        if probe.shape != x.shape:
            raise ShapeError("dfv", "probe shape", x.shape, probe.shape)
        return run_network(probe, plan, _zero_bias(weights), activation=frozen)


def dfv_impulse_response(input_rgb, noise, plan, weights, pixel, channel=0, amplitude=1.0):
    """Equivalent linear filter of the network at ``pixel`` (row, col).

    ``channel`` indexes the network input (0-2 colour, 3 the noise channel).
    """
    x = _as_batch(input_rgb)
    n, _, h, w = x.shape
    r, c = pixel
    if not (0 <= r < h and 0 <= c < w):
        raise IndexError(f"pixel {pixel} outside image of size {h}x{w}")
    if not 0 <= channel < 3 + plan.noise_channels:
        raise IndexError(f"channel {channel} outside the network input")
    probe = np.zeros((n, 3 + plan.noise_channels, h, w), dtype=x.dtype)
    probe[:, channel, r, c] = amplitude
    return frozen_response(x, noise, plan, weights, probe)
