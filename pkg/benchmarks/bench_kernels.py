"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once untimed (JIT compile / page-in), then the best of
``--repeat`` runs is reported. Outputs are checked for agreement first.
"""

import argparse
import time

import numpy as np

from sshunet.kernels import _numba, _numpy


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    # a decoder-sized planar conv input: B=2, C=16, S=16, 18x18 padded
    xp = rng.standard_normal((2, 16, 16, 18, 18)).astype(np.float32)
    kernel, stride, out_sp = (1, 3, 3), (1, 1, 1), (16, 16, 16)
    cols = _numpy.im2col(xp, kernel, stride, out_sp)
    rows = rng.standard_normal((32, 4096)).astype(np.float32)
    a = rng.uniform(0, 64, (2000, 3))
    b = rng.uniform(0, 64, (2000, 3))
    return {
        "im2col 2x16x16x16x16 (1,3,3)": (
            lambda m: m.im2col(xp, kernel, stride, out_sp),
        ),
        "col2im 2x16x16x16x16 (1,3,3)": (
            lambda m: m.col2im(cols, xp.shape, kernel, stride, out_sp),
        ),
        "instance_stats 32x4096": (lambda m: m.instance_stats(rows),),
        "min_distances 2000x2000": (lambda m: m.min_distances(a, b),),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<32}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (call,) in cases(rng).items():
        ref, got = call(_numpy), call(_numba)
        for r, g in zip(ref if isinstance(ref, tuple) else (ref,), got if isinstance(got, tuple) else (got,)):
            np.testing.assert_allclose(g, r, rtol=1e-5, atol=1e-5)
        t_np = best_of(lambda: call(_numpy), args.repeat)
        t_nb = best_of(lambda: call(_numba), args.repeat)
        print(f"{name:<32}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
