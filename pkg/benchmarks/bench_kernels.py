"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 128]

Times the three kernels on their own and one desk-scale generator
forward/backward pass, once per available backend.
"""

import argparse
import timeit

import numpy as np

from multigrid_sr import generator as G
from multigrid_sr import kernels
from multigrid_sr.plan import desk_plan
from multigrid_sr.tiling import hamming_window_2d


def cases(size, rng):
    x = rng.standard_normal((4, 16, size + 2, size + 2)).astype(np.float32)
    oh = (size + 2 - 4) // 2 + 1
    cols = kernels.im2col(x, 4, 2, oh, oh)
    acc = np.zeros((3, 4 * size, 4 * size), np.float32)
    wacc = np.zeros((4 * size, 4 * size), np.float32)
    patch = rng.random((3, size, size)).astype(np.float32)
    window = hamming_window_2d(size).astype(np.float32)

    plan = desk_plan()
    weights = G.init_weights(plan, seed=0)
    rgb = rng.random((4, 3, size, size)).astype(np.float32)

    def train_step():
        out = G.forward(rgb, None, plan, weights)
        out.mean().backward()
        weights.zero_grad()

    def blend():
        for r in range(0, 3 * size + 1, size // 2):
            kernels.accumulate_window(acc, wacc, patch, window, r, r)

    return {
        "im2col k4 s2": lambda: kernels.im2col(x, 4, 2, oh, oh),
        "col2im k4 s2": lambda: kernels.col2im(cols, 16, size + 2, size + 2, 4, 2, oh, oh),
        "accumulate_window": blend,
        "generator fwd+bwd": train_step,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--size", type=int, default=128)
    args = parser.parse_args()

    results = {}
    original = kernels.BACKEND
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        for name, fn in cases(args.size, np.random.default_rng(0)).items():
            fn()  # warm up
            results[name, backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    kernels.set_backend(original)

    backends = kernels.available_backends()
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + (f"{'speedup':>10}" if len(backends) > 1 else ""))
    for name in dict.fromkeys(n for n, _ in results):
        times = [results[name, b] for b in backends]
        row = f"{name:<20}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if "python" in backends and "cython" in backends:
            row += f"{results[name, 'python'] / results[name, 'cython']:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
