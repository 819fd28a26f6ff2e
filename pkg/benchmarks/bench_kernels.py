"""Compare the pure-numpy and compiled kernel backends on training-sized
inputs.

The measurements here justify the default ``auto`` backend policy
(numpy convolution, compiled pooling and bilinear sampling); see
src/panalign/kernels/__init__.py. Run with:

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from panalign.kernels import numpy_backend

try:
    from panalign.kernels import _fastkern
except ImportError:
    _fastkern = None


def timeit(fn, repeat):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e3


def bench(repeat):
    rng = np.random.default_rng(0)
    # shapes matching stage-1/2 training on the default 64x32 input
    cases = []

    x = np.ascontiguousarray(rng.normal(size=(16, 16, 64, 32)))
    w = np.ascontiguousarray(rng.normal(size=(32, 16, 3, 3)))
    b = np.ascontiguousarray(rng.normal(size=32))
    g = np.ascontiguousarray(rng.normal(size=(16, 32, 64, 32)))
    cases.append(("conv2d_forward 16x16x64x32 -> 32ch",
                  lambda m: m.conv2d_forward(x, w, b, 1, 1)))
    cases.append(("conv2d_backward same",
                  lambda m: m.conv2d_backward(x, w, g, 1, 1, True)))

    xp = np.ascontiguousarray(rng.normal(size=(16, 32, 64, 32)))
    _, switches = numpy_backend.maxpool2_forward(xp)
    gp = np.ascontiguousarray(rng.normal(size=(16, 32, 32, 16)))
    cases.append(("maxpool2_forward 16x32x64x32",
                  lambda m: m.maxpool2_forward(xp)))
    cases.append(("maxpool2_backward same",
                  lambda m: m.maxpool2_backward(switches, gp, 64, 32)))

    img = np.ascontiguousarray(rng.normal(size=(16, 16, 32, 16)))
    px = np.ascontiguousarray(rng.uniform(-2, 17, size=(16, 32, 16)))
    py = np.ascontiguousarray(rng.uniform(-2, 33, size=(16, 32, 16)))
    gb = np.ascontiguousarray(rng.normal(size=(16, 16, 32, 16)))
    cases.append(("bilinear_forward 16x16x32x16",
                  lambda m: m.bilinear_forward(img, px, py)))
    cases.append(("bilinear_backward same",
                  lambda m: m.bilinear_backward(img, px, py, gb)))

    width = max(len(name) for name, _ in cases)
    header = f"{'kernel':<{width}}  {'numpy ms':>9}  {'cython ms':>9}  {'speedup':>7}"
    print(header)
    print("-" * len(header))
    for name, fn in cases:
        t_np = timeit(lambda: fn(numpy_backend), repeat)
        if _fastkern is None:
            print(f"{name:<{width}}  {t_np:9.2f}  {'n/a':>9}  {'n/a':>7}")
            continue
        t_cy = timeit(lambda: fn(_fastkern), repeat)
        print(f"{name:<{width}}  {t_np:9.2f}  {t_cy:9.2f}  {t_np / t_cy:6.2f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    bench(ap.parse_args().repeat)
