"""Compare the numpy and compiled kernel backends on training-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from condistfl import _kernels


def cases(rng):
    x = rng.normal(size=(4, 8, 64, 64)).astype(np.float32)
    x_small = rng.normal(size=(4, 16, 32, 32)).astype(np.float32)
    yield "im2col 3x3 s1", lambda k: k.im2col(x, 3, 3, 1, 1)
    yield "im2col 3x3 s2", lambda k: k.im2col(x, 3, 3, 2, 1)
    cols = _kernels.python_backend.im2col(x, 3, 3, 1, 1)
    yield "col2im 3x3 s1", lambda k: k.col2im(cols, x.shape, 3, 3, 1, 1)
    yield "norm_act fwd", lambda k: k.norm_act_forward(x, 0.01, 1e-5)
    y, xhat, inv = _kernels.python_backend.norm_act_forward(x_small, 0.01, 1e-5)
    g = rng.normal(size=x_small.shape).astype(np.float32)
    yield "norm_act bwd", lambda k: k.norm_act_backward(g, xhat, inv, 0.01)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    backends = {"numpy": _kernels.python_backend}
    if _kernels.compiled_backend is not None:
        backends["cython"] = _kernels.compiled_backend
    print(f"{'kernel':<16}" + "".join(f"{n + ' ms':>12}" for n in backends) + f"{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)):
        ms = {}
        for bname, mod in backends.items():
            fn(mod)  # warm up
            ms[bname] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
        speed = f"{ms['numpy'] / ms['cython']:>9.2f}x" if "cython" in ms else f"{'n/a':>10}"
        print(f"{name:<16}" + "".join(f"{v:>12.3f}" for v in ms.values()) + speed)


if __name__ == "__main__":
    main()
