"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes match the desk U-Net (batch 8, width 16-32, 16x16 images). Each line
reports the best-of-``repeat`` time per call for both backends, the speedup, and
the max abs difference between their outputs.
"""

import argparse
import timeit

import numpy as np

from guided_i2i.tensor.kernels import available_backends


def cases(rng):
    x = rng.standard_normal((8, 16, 18, 18))
    cols = rng.standard_normal((16 * 9, 8 * 16 * 16))
    gx = rng.standard_normal((8, 32, 16, 16))
    gy = rng.standard_normal(gx.shape)
    v = np.sort(rng.standard_normal(24))
    yield "im2col 3x3", lambda k: k.im2col(x, 3, 3, 1, 16, 16)
    yield "col2im 3x3", lambda k: k.col2im(cols, 8, 16, 18, 18, 3, 3, 1, 16, 16)
    yield "group_norm fwd", lambda k: k.group_norm_forward(gx, 4, 1e-5)

    def gn_bwd(k):
        xhat, rstd = k.group_norm_forward(gx, 4, 1e-5)
        return k.group_norm_backward(gy, xhat, rstd, 4)

    yield "group_norm fwd+bwd", gn_bwd
    yield "kmeans_dp k=3 n=24", lambda k: k.kmeans_dp_tables(v, 3)


def _first(out):
    return np.asarray(out[0] if isinstance(out, tuple) else out, dtype=np.float64)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    backends = available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':22s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases(rng):
        times, outs = {}, {}
        for bname, mod in backends.items():
            outs[bname] = _first(fn(mod))
            times[bname] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
        if "compiled" in times:
            a, b = outs["python"], outs["compiled"]
            both_inf = np.isinf(a) & (a == b)  # unreachable DP cells are inf in both
            diff = float(np.max(np.abs(np.subtract(a, b, where=~both_inf, out=np.zeros_like(a)))))
            print(f"{name:22s} {times['python']:10.3f} {times['compiled']:12.3f} "
                  f"{times['python'] / times['compiled']:8.2f} {diff:10.2e}")
        else:
            print(f"{name:22s} {times['python']:10.3f} {'-':>12s}")


if __name__ == "__main__":
    main()
