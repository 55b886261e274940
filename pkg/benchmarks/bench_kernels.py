"""Time the compiled and pure-Python convolution kernels on training-sized shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per (kernel, shape) with the best-of-N time for each backend,
the speedup, and the max absolute difference between their outputs.
"""

import argparse
import sys
import timeit

import numpy as np

from drpriv import kernels

# (batch, channels in, height, width, channels out, kernel, stride): the
# generator's two convolutions at 16x16 and 92x92 with default widths
SHAPES = [
    (32, 1, 20, 20, 8, 5, 2),
    (32, 8, 10, 10, 16, 5, 2),
    (32, 1, 96, 96, 8, 5, 2),
    (32, 8, 48, 48, 16, 5, 2),
]


def cases(rng, shape):
    b, c, h, w, o, k, s = shape
    x = rng.random((b, c, h, w))
    wt = rng.normal(size=(o, c, k, k))
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    gy = rng.normal(size=(b, o, ho, wo))
    return {
        "forward": lambda m: m.conv2d_forward(x, wt, s),
        "backward_input": lambda m: m.conv2d_backward_input(gy, wt, s, h, w),
        "backward_weight": lambda m: m.conv2d_backward_weight(x, gy, s, k, k),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'shape (b,c,h,w,o,k,s)':<28} {'compiled ms':>12} {'python ms':>10} {'speedup':>8} "
          f"{'max diff':>9}")
    for shape in SHAPES:
        for name, fn in cases(rng, shape).items():
            diff = float(np.max(np.abs(fn(kernels.compiled_backend) - fn(kernels.python_backend))))
            times = []
            for backend in (kernels.compiled_backend, kernels.python_backend):
                t = timeit.Timer(lambda: fn(backend))
                n, _ = t.autorange()
                times.append(min(t.repeat(args.repeat, n)) / n * 1e3)
            print(f"{name:<16} {str(shape):<28} {times[0]:>12.3f} {times[1]:>10.3f} {times[1] / times[0]:>7.2f}x "
                  f"{diff:>9.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
