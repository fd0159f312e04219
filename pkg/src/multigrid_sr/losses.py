"""Training objectives and validation metrics."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .discriminator import discriminate
from .resample import downscale
from .tensor import ConvSpec, ShapeError, Tensor

FIDELITY_SCALES = (1, 2, 4, 8, 16)
PERCEPTUAL_VALIDATION_SCALES = (1, 2, 4)
PERCEPTUAL_WEIGHTS = {
    "rsgan_g": 0.001,
    "l1_s16_w1": 10.0,
    "cx_w1": 0.1,
    "l1_w0": 10.0,
    "l1_s16_w0": 10.0,
}
CX_BANDWIDTH = 0.5
CX_EPS = 1e-5


@dataclass
class LossReport:
    """Named loss terms, their weights, and the weighted total."""

    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def add(self, name, value, weight=1.0):
        self.terms[name] = value
        self.weights[name] = float(weight)

    @property
    def total(self):
        total = None
        for name, value in self.terms.items():
            part = T.scale(value, self.weights[name])
            total = part if total is None else total + part
        return total

    def values(self):
        return {name: float(v.item()) for name, v in self.terms.items()}

    def log_lines(self, step):
        """Line-oriented training-log records: ``step<TAB>term<TAB>value``."""
        lines = [f"{step}\t{name}\t{value:.9g}" for name, value in self.values().items()]
        lines.append(f"{step}\ttotal\t{float(self.total.item()):.9g}")
        return lines


def _check_same(op, x, y):
    if x.shape != y.shape:
        raise ShapeError(op, "shape", x.shape, y.shape)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def l1(x, y):
    """Mean absolute difference."""
    x, y = _t(x), _t(y)
    _check_same("l1", x, y)
    return T.abs_(x - y).mean()


def l2(x, y):
    """Mean squared difference."""
    x, y = _t(x), _t(y)
    _check_same("l2", x, y)
    return T.square(x - y).mean()


def psnr(mse, peak=1.0):
    return float(10.0 * np.log10(peak * peak / mse))


def fidelity_loss(y0, x):
    """Unweighted sum of L1 terms at scales 1, 2, 4, 8 and 16."""
    y0, x = _t(y0), _t(x)
    _check_same("fidelity_loss", y0, x)
    report = LossReport()
    for f in FIDELITY_SCALES:
        report.add(f"l1_s{f}", l1(downscale(y0, f), downscale(x, f)), 1.0)
    return report


def fidelity_validation(y0, x):
    """Full-resolution L2 of the W=0 output."""
    return l2(y0, x)


def rsgan_losses(scores_real, scores_fake):
    """Relativistic standard GAN losses for paired real/fake scores.

    Returns ``(loss_d, loss_g)``.  Plain numbers are promoted to float64.
    """
    real = scores_real if isinstance(scores_real, Tensor) else Tensor(np.asarray(scores_real, dtype=np.float64))
    fake = scores_fake if isinstance(scores_fake, Tensor) else Tensor(np.asarray(scores_fake, dtype=np.float64))
    if real.size == 0 or fake.size == 0:
        raise ValueError("rsgan_losses needs at least one real/fake pair")
    _check_same("rsgan_losses", real, fake)
    loss_d = -T.log_sigmoid(real - fake).mean()
    loss_g = -T.log_sigmoid(fake - real).mean()
    return loss_d, loss_g


# -- contextual loss --------------------------------------------------------------

def contextual_similarity(feat_y, feat_x, h=CX_BANDWIDTH, eps=CX_EPS):
    """Contextual similarity between two feature sets.

    ``feat_y`` (generated) and ``feat_x`` (target) have shape (N, P, C): P
    positions with C-dimensional features.  Returns a (N,) tensor of CX values
    in (0, 1].
    """
    feat_y, feat_x = _t(feat_y), _t(feat_x)
    if feat_y.ndim == 2:
        feat_y = feat_y.reshape((1,) + feat_y.shape)
        feat_x = feat_x.reshape((1,) + feat_x.shape)
    if feat_y.shape[-1] != feat_x.shape[-1]:
        raise ShapeError("contextual_similarity", "feature dim", feat_y.shape[-1], feat_x.shape[-1])
    if feat_y.shape[1] < 2 or feat_x.shape[1] < 2:
        raise ValueError("contextual loss needs at least 2 feature positions")
    centre = feat_y.mean(axis=1, keepdims=True)
    fy, fx = feat_y - centre, feat_x - centre
    fy = fy / T.sqrt(T.square(fy).sum(axis=2, keepdims=True) + 1e-12)
    fx = fx / T.sqrt(T.square(fx).sum(axis=2, keepdims=True) + 1e-12)
    # d[n, i, j]: cosine distance from generated position i to target position j
    dist = 1.0 - fy @ fx.transpose(0, 2, 1)
    rel = dist / (T.min_(dist, axis=2, keepdims=True) + eps)
    w = T.exp((1.0 - rel) / h)
    cx = w / w.sum(axis=2, keepdims=True)
    return T.max_(cx, axis=1).mean(axis=1)


def _to_positions(feat):
    n, c, hh, ww = feat.shape
    return feat.reshape((n, c, hh * ww)).transpose(0, 2, 1)


def contextual_loss(y, x, extractor):
    """-log CX between extractor features of ``y`` and ``x``, batch mean."""
    y, x = _t(y), _t(x)
    _check_same("contextual_loss", y, x)
    fy, fx = _to_positions(extractor(y)), _to_positions(extractor(x))
    return -T.log(contextual_similarity(fy, fx)).mean()


class RandomConvFeatures:
    """Fixed random 3-layer conv feature map (total stride 4).

    A stand-in for a pretrained classification network's mid-level features;
    it is deterministic given ``seed`` and its parameters are never trained.
    """

    def __init__(self, widths=(16, 32, 32), seed=1234):
        rng = np.random.default_rng(seed)
        self.layers = []
        cin = 3
        for width, stride in zip(widths, (2, 2, 1)):
            spec = ConvSpec(cin, width, 3, stride, 1)
            w = rng.standard_normal(spec.weight_shape()) * np.sqrt(2.0 / (cin * 9))
            self.layers.append((spec, w))
            cin = width

    def __call__(self, img):
        out = img
        for spec, w in self.layers:
            out = T.relu(T.conv2d(out, Tensor(w.astype(out.dtype)), None, spec))
        return out


_DEFAULT_EXTRACTOR = None


def default_extractor():
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = RandomConvFeatures()
    return _DEFAULT_EXTRACTOR


def perceptual_loss(y1, y0, x, disc, extractor=None, weights=None):
    """Generator objective for the perceptual track.

    Combines the relativistic generator loss on the W=1 output, L1 at scale
    16 for both outputs, the contextual loss on the W=1 output, and the
    full-resolution L1 on the W=0 output.
    """
    y1, y0, x = _t(y1), _t(y0), _t(x)
    _check_same("perceptual_loss", y1, x)
    _check_same("perceptual_loss", y0, x)
    extractor = extractor or default_extractor()
    weights = dict(PERCEPTUAL_WEIGHTS if weights is None else weights)
    _, loss_g = rsgan_losses(discriminate(x, disc), discriminate(y1, disc))
    report = LossReport()
    report.add("rsgan_g", loss_g, weights["rsgan_g"])
    report.add("l1_s16_w1", l1(downscale(y1, 16), downscale(x, 16)), weights["l1_s16_w1"])
    report.add("cx_w1", contextual_loss(y1, x, extractor), weights["cx_w1"])
    report.add("l1_w0", l1(y0, x), weights["l1_w0"])
    report.add("l1_s16_w0", l1(downscale(y0, 16), downscale(x, 16)), weights["l1_s16_w0"])
    return report


# -- no-reference validation --------------------------------------------------------

def _as_array(img):
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    return arr.astype(np.float64)


def local_contrast_proxy(img):
    """Cheap no-reference naturalness proxy (NOT NIQE).

    Negative mean local standard deviation of luminance over 7x7 windows:
    lower means more local contrast.
    """
    from scipy.ndimage import uniform_filter

    arr = _as_array(img)
    lum = arr.mean(axis=-3) if arr.ndim >= 3 else arr
    m = uniform_filter(lum, size=7, axes=(-2, -1), mode="nearest")
    m2 = uniform_filter(lum * lum, size=7, axes=(-2, -1), mode="nearest")
    return -float(np.sqrt(np.maximum(m2 - m * m, 0)).mean())


def total_variation(img):
    """Anisotropic total variation (sum of absolute neighbour differences)."""
    arr = _as_array(img)
    return float(np.abs(np.diff(arr, axis=-1)).sum() + np.abs(np.diff(arr, axis=-2)).sum())


def perceptual_validation(y1, metric: Callable | None = None):
    """Sum of a no-reference metric over scales 1, 2 and 4."""
    metric = metric or local_contrast_proxy
    y1 = y1.data if isinstance(y1, Tensor) else np.asarray(y1)
    return float(sum(metric(downscale(y1, f)) for f in PERCEPTUAL_VALIDATION_SCALES))
