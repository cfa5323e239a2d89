"""Time im2col/col2im for the compiled extension against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Both backends must agree exactly before any timing is reported.
"""

import argparse
import timeit

import numpy as np

from taps import _pykernels

try:
    from taps import _ckernels
except ImportError:
    _ckernels = None

SHAPES = [
    # (n, c, h, w, k, stride, pad)
    (32, 2, 6, 6, 3, 1, 1),
    (32, 4, 6, 6, 3, 1, 1),
    (64, 8, 16, 16, 3, 1, 1),
    (64, 8, 16, 16, 3, 2, 1),
    (16, 16, 32, 32, 5, 1, 2),
]


def bench(impl, shape, repeat):
    n, c, h, w, k, s, p = shape
    x = np.random.default_rng(0).standard_normal((n, c, h, w)).astype(np.float32)
    cols = impl.im2col(x, k, k, s, p)
    fwd = min(timeit.repeat(lambda: impl.im2col(x, k, k, s, p), number=5, repeat=repeat)) / 5
    bwd = min(timeit.repeat(lambda: impl.col2im(cols, n, c, h, w, k, k, s, p), number=5, repeat=repeat)) / 5
    return cols, impl.col2im(cols, n, c, h, w, k, k, s, p), fwd, bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'shape (n,c,h,w,k,s,p)':<28}{'backend':<9}{'im2col ms':>11}{'col2im ms':>11}{'speedup':>9}")
    for shape in SHAPES:
        py_cols, py_img, py_f, py_b = bench(_pykernels, shape, args.repeat)
        print(f"{str(shape):<28}{'python':<9}{py_f * 1e3:>11.3f}{py_b * 1e3:>11.3f}{'':>9}")
        if _ckernels is None:
            continue
        c_cols, c_img, c_f, c_b = bench(_ckernels, shape, args.repeat)
        if not (np.array_equal(py_cols, c_cols) and np.array_equal(py_img, c_img)):
            raise SystemExit(f"backends disagree on {shape}")
        speed = (py_f + py_b) / (c_f + c_b)
        print(f"{'':<28}{'cython':<9}{c_f * 1e3:>11.3f}{c_b * 1e3:>11.3f}{speed:>8.2f}x")


if __name__ == "__main__":
    main()
