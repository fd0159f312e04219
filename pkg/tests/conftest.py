import numpy as np
import pytest

from multigrid_sr import kernels


def conv2d_loops(x, w, b, stride, padding, extra=0):
    """Direct nested-loop cross-correlation in float64 (the conv oracle)."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding + extra), (padding, padding + extra)))
    oh = (xp.shape[2] - k) // stride + 1
    ow = (xp.shape[3] - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for a in range(n):
        for q in range(o):
            for i in range(oh):
                for j in range(ow):
                    win = xp[a, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[a, q, i, j] = (win * w[q]).sum() + (0.0 if b is None else b[q])
    return out


def conv_transposed_loops(x, w, b, stride, padding):
    """Nested-loop scatter form of the transposed convolution (float64)."""
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    full = np.zeros((n, co, (h - 1) * stride + k, (wd - 1) * stride + k))
    for a in range(n):
        for c in range(ci):
            for i in range(h):
                for j in range(wd):
                    full[a, :, i * stride : i * stride + k, j * stride : j * stride + k] += x[a, c, i, j] * w[c]
    out = full[:, :, padding : full.shape[2] - padding, padding : full.shape[3] - padding]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def central_difference(f, arrays, index_list, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``arrays``.

    ``index_list`` holds (array_position, flat_index) pairs; arrays are
    perturbed in place and restored.
    """
    out = []
    for pos, flat in index_list:
        arr = arrays[pos].reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + h
        fp = f()
        arr[flat] = orig - h
        fm = f()
        arr[flat] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(20191027)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.BACKEND
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
