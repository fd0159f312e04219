"""Dense tensors with a reverse-mode tape.

Every op below returns a new :class:`Tensor`; when any input requires
gradients the result records its parents and a backward closure.  Calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order.  Data is float32 by default; float64 tensors stay float64 through every
op, which is what the gradient-check tests rely on.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels

# Per-thread so that tiled-inference workers entering no_grad() concurrently
# cannot leave recording switched off for the caller.
_grad_state = threading.local()


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    Attributes
    ----------
    op : str
        Name of the operation that failed.
    dim : str
        Which dimension disagreed (e.g. ``"channels"``).
    expected, got
        The conflicting values.
    """

    def __init__(self, op, dim, expected, got):
        self.op, self.dim, self.expected, self.got = op, dim, expected, got
        super().__init__(f"{op}: {dim} mismatch (expected {expected}, got {got})")


class GraphError(RuntimeError):
    pass


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _as_float_array(data, dtype):
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype, requires_grad=None):
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.astype(dtype), requires_grad=rg, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    # -- reverse mode -------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that is not connected to any tracked input")

        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _result(data, parents, backward):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "shape", a.shape, b.shape) from None


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("mul", a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(x, factor):
    """Multiply by a constant (no gradient w.r.t. the constant)."""
    factor = x.dtype.type(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def abs_(x):
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x):
    return _result(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def sqrt(x):
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def log_sigmoid(x):
    """Numerically stable log(sigmoid(x))."""
    z = x.data
    out = -(np.maximum(-z, 0) + np.log1p(np.exp(-np.abs(z))))
    # d/dz log sigmoid(z) = sigmoid(-z)
    sig_neg = np.exp(-np.logaddexp(0, z)).astype(x.dtype)
    return _result(out.astype(x.dtype), (x,), lambda g: (g * sig_neg,))


def clamp_min(x, low):
    """max(x, low) with the gradient passed only where x > low."""
    mask = x.data > low
    return _result(np.where(mask, x.data, low).astype(x.dtype), (x,), lambda g: (g * mask,))


# -- reductions ---------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _result(out, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),))


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)
    inv = x.dtype.type(1.0 / count)
    return _result(out, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) * inv,))


def _arg_reduce(x, axis, keepdims, pick):
    idx = pick(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, idx_k, gk, axis=axis)
        return (gx,)

    return _result(out, (x,), backward)


def max_(x, axis, keepdims=False):
    """Maximum along one axis; the gradient goes to the first arg-max."""
    return _arg_reduce(x, axis, keepdims, np.argmax)


def min_(x, axis, keepdims=False):
    return _arg_reduce(x, axis, keepdims, np.argmin)


# -- shape ops ----------------------------------------------------------------

def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice)) or i is Ellipsis or i is None for i in items)


def getitem(x, index):
    basic = _is_basic(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _result(np.array(x.data[index]), (x,), backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner", a.shape[-1], b.shape[-2])
    return _result(a.data @ b.data, (a, b), backward)


def concat_channels(tensors: Sequence[Tensor]):
    """Stack (N, C_i, H, W) tensors along the channel axis, in order."""
    tensors = list(tensors)
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4:
            raise ShapeError("concat_channels", "rank", 4, t.ndim)
        for axis, dim in ((0, "batch"), (2, "height"), (3, "width")):
            if t.shape[axis] != ref.shape[axis]:
                raise ShapeError("concat_channels", dim, ref.shape[axis], t.shape[axis])
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=1), tensors, backward)


def split_channels(x, sizes):
    """Inverse of :func:`concat_channels`."""
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != x.shape[1]:
        raise ShapeError("split_channels", "channels", x.shape[1], int(bounds[-1]))
    return [x[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes))]


def crop_to(x, height, width):
    """Keep the top-left ``height`` x ``width`` block of a (N, C, H, W) tensor."""
    h, w = x.shape[-2:]
    if height > h:
        raise ShapeError("crop_to", "height", f"<= {h}", height)
    if width > w:
        raise ShapeError("crop_to", "width", f"<= {w}", width)
    if (height, width) == (h, w):
        return x

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., :height, :width] = g
        return (gx,)

    return _result(np.ascontiguousarray(x.data[..., :height, :width]), (x,), backward)


def separable_linear(x, rows, cols):
    """Apply ``rows @ x @ cols.T`` on the two trailing axes.

    ``rows`` is (H_out, H) and ``cols`` is (W_out, W); both are constants.
    Bicubic resampling, edge padding and clamped shifts are all expressed
    through this op.
    """
    rows = np.asarray(rows, dtype=x.dtype)
    cols = np.asarray(cols, dtype=x.dtype)
    if rows.shape[1] != x.shape[-2]:
        raise ShapeError("separable_linear", "height", rows.shape[1], x.shape[-2])
    if cols.shape[1] != x.shape[-1]:
        raise ShapeError("separable_linear", "width", cols.shape[1], x.shape[-1])
    out = rows @ x.data @ cols.T
    return _result(out, (x,), lambda g: (rows.T @ g @ cols,))


# -- convolution ----------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution layer.

    ``ceil_mode`` adds zero padding on the bottom/right edge so that a
    strided convolution produces ``ceil`` instead of ``floor`` output sizes.
    """

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    transposed: bool = False
    ceil_mode: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid ConvSpec {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid ConvSpec {self}")

    def weight_shape(self):
        k = self.kernel
        if self.transposed:
            return (self.in_channels, self.out_channels, k, k)
        return (self.out_channels, self.in_channels, k, k)

    def out_size(self, size):
        k, s, p = self.kernel, self.stride, self.padding
        if self.transposed:
            return (size - 1) * s - 2 * p + k
        span = size + 2 * p - k
        if span < 0:
            raise ShapeError("conv2d", "spatial size", f">= {k - 2 * p}", size)
        if self.ceil_mode:
            return -(-span // s) + 1
        return span // s + 1

    def trailing_pad(self, size):
        """Extra bottom/right zero rows needed in ceil mode."""
        if not self.ceil_mode or self.transposed:
            return 0
        return (self.out_size(size) - 1) * self.stride + self.kernel - (size + 2 * self.padding)

    def params(self):
        k = self.kernel
        return self.in_channels * self.out_channels * k * k + self.out_channels

    def macs(self, height, width):
        """Multiply-accumulates for one image of the given input size."""
        k2 = self.kernel * self.kernel
        if self.transposed:
            return height * width * self.in_channels * self.out_channels * k2
        oh, ow = self.out_size(height), self.out_size(width)
        return oh * ow * self.in_channels * self.out_channels * k2


def _check_conv(op, x, weight, bias, spec):
    if x.ndim != 4:
        raise ShapeError(op, "input rank", 4, x.ndim)
    if weight.shape != spec.weight_shape():
        raise ShapeError(op, "weight shape", spec.weight_shape(), weight.shape)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(op, "input channels", spec.in_channels, x.shape[1])
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(op, "bias shape", (spec.out_channels,), bias.shape)


def conv2d(x, weight, bias, spec: ConvSpec):
    """Strided cross-correlation plus per-channel bias, on (N, C, H, W)."""
    if spec.transposed:
        raise ValueError("conv2d called with a transposed ConvSpec")
    _check_conv("conv2d", x, weight, bias, spec)
    n, c, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    oh, ow = spec.out_size(h), spec.out_size(w)
    eh, ew = spec.trailing_pad(h), spec.trailing_pad(w)
    xp = x.data
    if p or eh or ew:
        xp = np.pad(xp, ((0, 0), (0, 0), (p, p + eh), (p, p + ew)))
    hp, wp = xp.shape[-2:]
    cols = kernels.im2col(xp, k, s, oh, ow)
    wmat = weight.data.reshape(spec.out_channels, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, spec.out_channels, oh, ow)

    def backward(g):
        g2 = g.reshape(n, spec.out_channels, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            gx = kernels.col2im(gcols, c, hp, wp, k, s, oh, ow)[:, :, p : p + h, p : p + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def conv2d_transposed(x, weight, bias, spec: ConvSpec):
    """Transposed convolution: the adjoint of :func:`conv2d` used as a forward map."""
    if not spec.transposed:
        raise ValueError("conv2d_transposed called with a non-transposed ConvSpec")
    _check_conv("conv2d_transposed", x, weight, bias, spec)
    n, c, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    co = spec.out_channels
    hf, wf = (h - 1) * s + k, (w - 1) * s + k
    oh, ow = hf - 2 * p, wf - 2 * p
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d_transposed", "output size", ">= 1", (oh, ow))
    wmat = weight.data.reshape(c, co * k * k)
    xm = x.data.reshape(n, c, h * w)
    cols = wmat.T @ xm
    full = kernels.col2im(cols, co, hf, wf, k, s, h, w)
    out = np.ascontiguousarray(full[:, :, p : p + oh, p : p + ow])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = kernels.im2col(gfull, k, s, h, w)
        gx = (wmat @ gcols).reshape(x.shape) if x.requires_grad else None
        gw = np.tensordot(xm, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def conv(x, weight, bias, spec: ConvSpec):
    """Dispatch on ``spec.transposed``."""
    if spec.transposed:
        return conv2d_transposed(x, weight, bias, spec)
    return conv2d(x, weight, bias, spec)
