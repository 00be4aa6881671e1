"""Compare the compiled and numpy patch kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--dtype float32]

Times im2col, col2im and a full conv2d forward/backward on a few layer shapes taken
from the toy and full-size codecs, then checks that both backends agree.
"""
import argparse
import timeit

import numpy as np

from semlink import kernels
from semlink import tensor as T

# (label, N, H, W, C, k, stride, Cout)
SHAPES = [
    ("toy stem", 64, 8, 8, 3, 5, 2, 16),
    ("toy trunk", 64, 4, 4, 32, 3, 1, 32),
    ("full stem", 16, 32, 32, 3, 9, 2, 256),
    ("full trunk", 16, 16, 16, 256, 5, 2, 256),
]


def _inputs(n, h, w, c, k, stride, cout, dtype, gen):
    pad = k // 2
    xp = gen.standard_normal((n, h + 2 * pad, w + 2 * pad, c)).astype(dtype)
    ho, wo = -(-h // stride), -(-w // stride)
    x = gen.standard_normal((n, h, w, c)).astype(dtype)
    kern = (gen.standard_normal((k, k, c, cout)) / np.sqrt(k * k * c)).astype(dtype)
    return xp, ho, wo, x, kern


def _conv_step(x, kern, stride):
    xt = T.Tensor(x, requires_grad=True)
    kt = T.Tensor(kern, requires_grad=True)
    T.sum_(T.conv2d(xt, kt, stride=stride)).backward()


def bench(backend, shape, dtype, repeat, gen):
    label, n, h, w, c, k, stride, cout = shape
    xp, ho, wo, x, kern = _inputs(n, h, w, c, k, stride, cout, dtype, gen)
    kernels.use_backend(backend)
    cols = kernels.im2col(xp, k, stride, ho, wo)
    t_im = min(timeit.repeat(lambda: kernels.im2col(xp, k, stride, ho, wo), number=1, repeat=repeat))
    t_col = min(timeit.repeat(lambda: kernels.col2im(cols, xp.shape[1], xp.shape[2], stride), number=1, repeat=repeat))
    t_conv = min(timeit.repeat(lambda: _conv_step(x, kern, stride), number=1, repeat=max(3, repeat // 4)))
    return t_im, t_col, t_conv, cols, kernels.col2im(cols, xp.shape[1], xp.shape[2], stride)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args(argv)
    try:
        kernels.use_backend("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    dtype = np.dtype(args.dtype)
    print(f"{'shape':<12} {'op':<8} {'cython ms':>10} {'python ms':>10} {'speedup':>8}")
    for shape in SHAPES:
        res = {b: bench(b, shape, dtype, args.repeat, np.random.default_rng(0)) for b in ("cython", "python")}
        np.testing.assert_array_equal(res["cython"][3], res["python"][3])
        np.testing.assert_allclose(res["cython"][4], res["python"][4], rtol=1e-5, atol=1e-5)
        for i, op in enumerate(("im2col", "col2im", "conv")):
            tc, tp = res["cython"][i] * 1e3, res["python"][i] * 1e3
            print(f"{shape[0]:<12} {op:<8} {tc:10.3f} {tp:10.3f} {tp / tc:7.2f}x")
    kernels.use_backend("cython")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
