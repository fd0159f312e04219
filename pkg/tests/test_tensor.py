import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multigrid_sr import kernels
from multigrid_sr import tensor as T
from multigrid_sr.tensor import ConvSpec, GraphError, ShapeError, Tensor

from conftest import central_difference, conv2d_loops, conv_transposed_loops, rel_err


class TestConv2d:
    def test_ones_kernel_center_and_corner(self, backend):
        x = Tensor(np.ones((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = T.conv2d(x, w, Tensor(np.zeros(1)), ConvSpec(1, 1, 3, 1, 1))
        assert y.data[0, 0, 2, 2] == 9.0
        assert y.data[0, 0, 0, 0] == 4.0

    def test_identity_kernel(self, backend, rng):
        x = Tensor(rng.standard_normal((2, 1, 6, 7)).astype(np.float32))
        y = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), ConvSpec(1, 1, 1))
        assert np.array_equal(y.data, x.data)

    def test_random_against_loops(self, backend, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), ConvSpec(3, 4, 3, 2, 1))
        assert y.shape == (2, 4, 4, 4)
        ref = conv2d_loops(x, w, b, 2, 1)
        np.testing.assert_allclose(y.data, ref, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("size", [5, 6, 9, 16, 17])
    def test_ceil_mode_size(self, size):
        spec = ConvSpec(1, 1, 4, 2, 1, ceil_mode=True)
        y = T.conv2d(Tensor(np.ones((1, 1, size, size))), Tensor(np.ones((1, 1, 4, 4))), None, spec)
        assert y.shape[-1] == -(-size // 2)

    def test_ceil_mode_values(self, rng, backend):
        x = rng.standard_normal((1, 2, 7, 7))
        w = rng.standard_normal((3, 2, 4, 4))
        spec = ConvSpec(2, 3, 4, 2, 1, ceil_mode=True)
        y = T.conv2d(Tensor(x), Tensor(w), None, spec)
        ref = conv2d_loops(x, w, None, 2, 1, extra=spec.trailing_pad(7))
        np.testing.assert_allclose(y.data, ref, rtol=1e-10)

    def test_channel_mismatch_is_structured(self):
        with pytest.raises(ShapeError) as info:
            T.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))), None, ConvSpec(3, 1, 3))
        assert info.value.dim == "input channels"
        assert info.value.expected == 3 and info.value.got == 2


class TestConvTransposed:
    def test_shape(self):
        spec = ConvSpec(1, 1, 4, 2, 1, transposed=True)
        y = T.conv2d_transposed(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 4, 4))), None, spec)
        assert y.shape == (1, 1, 8, 8)

    def test_single_tap_spread(self):
        v = 0.625
        spec = ConvSpec(1, 1, 2, 2, 0, transposed=True)
        y = T.conv2d_transposed(Tensor([[[[v]]]]), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]), spec)
        assert y.shape == (1, 1, 2, 2)
        assert np.all(y.data == v)

    def test_against_scatter_loops(self, backend, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        w = rng.standard_normal((3, 2, 4, 4))
        b = rng.standard_normal(2)
        y = T.conv2d_transposed(Tensor(x), Tensor(w), Tensor(b), ConvSpec(3, 2, 4, 2, 1, transposed=True))
        np.testing.assert_allclose(y.data, conv_transposed_loops(x, w, b, 2, 1), rtol=1e-10)


def _adjoint_case(rng, n, ci, co, k, s, p, h, w):
    spec = ConvSpec(ci, co, k, s, p)
    x = rng.standard_normal((n, ci, h, w))
    weight = rng.standard_normal((co, ci, k, k))
    fwd = conv2d_loops(x, weight, None, s, p)
    y = rng.standard_normal(fwd.shape)
    tspec = ConvSpec(co, ci, k, s, p, transposed=True)
    back = T.conv2d_transposed(Tensor(y), Tensor(weight), None, tspec).data
    assert back.shape == x.shape
    lhs = float((fwd * y).sum())
    rhs = float((x * back).sum())
    return lhs, rhs, spec


def test_adjoint_identity_random_shapes(backend, rng):
    cases = 0
    while cases < 24:
        n = int(rng.integers(1, 3))
        ci, co = (int(v) for v in rng.integers(1, 5, size=2))
        k = int(rng.integers(1, 6))
        s = int(rng.integers(1, 4))
        p = int(rng.integers(0, k))
        # choose sizes with no leftover rows so conv^T covers the whole input
        oh, ow = (int(v) for v in rng.integers(1, 6, size=2))
        h, w = (oh - 1) * s + k - 2 * p, (ow - 1) * s + k - 2 * p
        if h < 1 or w < 1:
            continue
        lhs, rhs, _ = _adjoint_case(rng, n, ci, co, k, s, p, h, w)
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs)), (n, ci, co, k, s, p, h, w)
        cases += 1


class TestElementwise:
    def test_relu(self):
        assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_concat_keeps_order(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 4, 4)))
        b = Tensor(rng.standard_normal((1, 3, 4, 4)))
        c = T.concat_channels([a, b])
        assert c.shape == (1, 5, 4, 4)
        assert np.array_equal(c.data[:, :2], a.data)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError) as info:
            T.concat_channels([Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 4, 5)))])
        assert info.value.dim == "width"

    def test_crop_to_top_left(self, rng):
        x = rng.standard_normal((1, 1, 9, 9))
        y = T.crop_to(Tensor(x), 8, 8)
        assert np.array_equal(y.data, x[..., :8, :8])

    def test_crop_to_larger_fails(self):
        with pytest.raises(ShapeError):
            T.crop_to(Tensor(np.ones((1, 1, 4, 4))), 5, 4)

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))

    def test_scale(self):
        assert T.scale(Tensor([1.0, -2.0]), 3.0).data.tolist() == [3.0, -6.0]

    def test_float32_preserved(self):
        x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32))
        y = T.relu(T.scale(x, 0.5) + 1.0)
        assert y.dtype == np.float32


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=32))
def test_relu_idempotent(values):
    x = Tensor(np.array(values))
    assert np.array_equal(T.relu(T.relu(x)).data, T.relu(x).data)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_concat_split_roundtrip(sizes, seed):
    rng = np.random.default_rng(seed)
    parts = [Tensor(rng.standard_normal((2, c, 3, 5)).astype(np.float32)) for c in sizes]
    back = T.split_channels(T.concat_channels(parts), sizes)
    for a, b in zip(parts, back):
        assert np.array_equal(a.data, b.data)


class TestBackward:
    def test_relu_sum(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        T.relu(x).sum().backward()
        assert x.grad.tolist() == [0.0, 1.0]

    def test_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (x * x).sum()
        y.backward()
        y.backward()
        assert x.grad.tolist() == [4.0, 8.0]

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError):
            (x * 2.0).backward()

    def test_detached_rejected(self):
        x = Tensor([1.0, 2.0])
        with pytest.raises(GraphError):
            x.sum().backward()

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_no_grad_is_per_thread(self):
        entered, release = threading.Event(), threading.Event()

        def worker():
            with T.no_grad():
                entered.set()
                release.wait(5)

        t = threading.Thread(target=worker)
        t.start()
        entered.wait(5)
        try:
            y = Tensor([1.0], requires_grad=True) * 3.0
            assert y.requires_grad
        finally:
            release.set()
            t.join()
        assert T.is_grad_enabled()

    def test_conv_sum_gradient_is_transposed_conv_of_ones(self, backend, rng):
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        k = rng.standard_normal((3, 2, 3, 3))
        spec = ConvSpec(2, 3, 3, 1, 1)
        T.conv2d(x, Tensor(k), None, spec).sum().backward()
        ones = Tensor(np.ones((1, 3, 6, 6)))
        expected = T.conv2d_transposed(ones, Tensor(k), None, ConvSpec(3, 2, 3, 1, 1, transposed=True))
        np.testing.assert_allclose(x.grad, expected.data, rtol=1e-12)

    def test_three_layer_chain_finite_differences(self, backend, rng):
        specs = [ConvSpec(2, 3, 3, 1, 1), ConvSpec(3, 4, 4, 2, 1, ceil_mode=True), ConvSpec(4, 2, 4, 2, 1, transposed=True)]
        params = []
        for spec in specs:
            params.append(rng.standard_normal(spec.weight_shape()) * 0.5)
            params.append(rng.standard_normal(spec.out_channels) * 0.1)
        x = rng.standard_normal((2, 2, 7, 7))
        target = rng.standard_normal((2, 2, 8, 8))

        def loss(ts):
            h = Tensor(x)
            for i, spec in enumerate(specs):
                h = T.conv(h, ts[2 * i], ts[2 * i + 1], spec)
                if i < 2:
                    h = T.relu(h)
            return T.square(h - Tensor(target)).mean()

        tensors = [Tensor(p, requires_grad=True) for p in params]
        loss(tensors).backward()
        picks = [(i, int(rng.integers(params[i].size))) for i in range(len(params)) for _ in range(4)]
        numeric = central_difference(lambda: loss([Tensor(p) for p in params]).item(), params, picks, h=1e-6)
        analytic = np.array([tensors[i].grad.reshape(-1)[j] for i, j in picks])
        assert rel_err(analytic, numeric, floor=1e-6).max() < 1e-4


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: T.abs_(a - b).mean(),
        lambda a, b: T.log(T.exp(a) + T.square(b)).sum(),
        lambda a, b: T.sqrt(T.square(a) + 1.0).sum() / (T.square(b).sum() + 1.0),
        lambda a, b: T.log_sigmoid(a * b).mean(),
        lambda a, b: T.max_(a @ b.transpose(1, 0), axis=1).sum() + T.min_(a, axis=0).sum(),
        lambda a, b: T.separable_linear(a.reshape((1, 3, 4)), np.ones((2, 3)), np.eye(4)).sum() * b.sum(),
        lambda a, b: (a[1:, ::2] * b[:2, 1:3]).sum(),
    ],
)
def test_elementwise_gradients(op, rng):
    a0 = rng.standard_normal((3, 4)) + 0.1
    b0 = rng.standard_normal((3, 4)) + 0.1
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    op(a, b).backward()
    picks = [(i, j) for i in range(2) for j in range(12)]
    numeric = central_difference(lambda: op(Tensor(a0), Tensor(b0)).item(), [a0, b0], picks, h=1e-6)
    analytic = np.array([(a.grad, b.grad)[i].reshape(-1)[j] for i, j in picks])
    assert rel_err(analytic, numeric, floor=1e-6).max() < 1e-4


def test_backends_agree(rng):
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    x = rng.standard_normal((2, 3, 11, 9)).astype(np.float32)
    results = {}
    for name in kernels.available_backends():
        kernels.set_backend(name)
        cols = kernels.im2col(np.pad(x, ((0, 0), (0, 0), (1, 2), (1, 2))), 4, 2, 6, 5)
        back = kernels.col2im(cols, 3, 14, 12, 4, 2, 6, 5)
        results[name] = (cols, back)
    kernels.set_backend("cython")
    (c1, b1), (c2, b2) = results["cython"], results["python"]
    assert np.array_equal(c1, c2)
    np.testing.assert_allclose(b1, b2, rtol=1e-6)
