"""Compiled vs numpy im2col/col2im, plus a full conv2d forward/backward.

    python benchmarks/bench_conv.py [--repeat 20]

The conv2d rows run the same op under each backend by swapping the functions
exported from ``regmix.kernels``.
"""
import argparse
import timeit

import numpy as np

from regmix import _kernels_py, kernels
from regmix import tensor as T

SHAPES = [  # (N, C, H, W, K, stride)
    (64, 3, 32, 32, 3, 1),
    (64, 16, 32, 32, 3, 2),
    (128, 1, 28, 28, 3, 1),
]


def backends():
    out = {"numpy": (_kernels_py.im2col, _kernels_py.col2im)}
    try:
        from regmix import _kernels
        out["cython"] = (_kernels.im2col, _kernels.col2im)
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only")
    return out


def conv_step(x, k):
    xt, kt = T.Tensor(x, requires_grad=True), T.Tensor(k, requires_grad=True)
    T.backward(T.tsum(T.conv2d(xt, kt, stride=1, padding=1)))


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    impls = backends()
    print(f"{'shape':<26}{'kernel':<10}" + "".join(f"{b + ' ms':>12}" for b in impls) + f"{'speedup':>10}")
    for n, c, h, w, k, s in SHAPES:
        x = rng.normal(size=(n, c, h, w))
        oh, ow = (h - k) // s + 1, (w - k) // s + 1
        cols = rng.normal(size=(n, c * k * k, oh * ow))
        label = f"{n}x{c}x{h}x{w} k{k} s{s}"
        for name, args_ in [("im2col", (x, k, k, s)), ("col2im", (cols, c, h, w, k, k, s))]:
            times = {b: best_of(lambda f=f: f(*args_), args.repeat)
                     for b, f in ((b, fns[0 if name == "im2col" else 1]) for b, fns in impls.items())}
            ref = impls["numpy"][0 if name == "im2col" else 1](*args_)
            for b, fns in impls.items():
                assert np.array_equal(fns[0 if name == "im2col" else 1](*args_), ref), b
            speed = times["numpy"] / times["cython"] if "cython" in times else float("nan")
            print(f"{label:<26}{name:<10}" + "".join(f"{t:12.2f}" for t in times.values()) + f"{speed:9.1f}x")
    x, kern = rng.normal(size=(64, 16, 16, 16)), rng.normal(size=(32, 16, 3, 3))
    times = {}
    saved = (kernels.im2col, kernels.col2im)
    for b, (i2c, c2i) in impls.items():
        kernels.im2col, kernels.col2im = i2c, c2i
        times[b] = best_of(lambda: conv_step(x, kern), max(3, args.repeat // 4))
    kernels.im2col, kernels.col2im = saved
    speed = times["numpy"] / times["cython"] if "cython" in times else float("nan")
    print(f"{'64x16x16x16 -> 32':<26}{'conv f+b':<10}" + "".join(f"{t:12.2f}" for t in times.values())
          + f"{speed:9.1f}x")


if __name__ == "__main__":
    main()
