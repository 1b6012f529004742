"""Compiled vs fallback kernels, plus an end-to-end conv forward/backward.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints median wall time per call for each backend and the speedup.
"""
import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from ddtb.kernels import _pykernels

try:
    from ddtb.kernels import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(rng):
    x = rng.normal(size=(16, 16, 24, 24))
    cols = _pykernels.im2col(x, 3, 3, 1, 1)
    acts = rng.normal(size=(16, 16 * 24 * 24))
    lo, hi = np.full(16, -1.0), np.full(16, 2.0)
    scale = (hi - lo) / 3
    return {
        "im2col 16x16x24x24 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 16x16x24x24 k3": lambda k: k.col2im(cols, 16, 16, 24, 24, 3, 3, 1, 1),
        "fake_quant 16x9216 2-bit": lambda k: k.fake_quant(acts, lo, hi, scale, True, False),
    }


def conv_step(backend_env, repeat):
    """Time one conv2d forward+backward in a child process with the chosen backend."""
    code = f"""
import time, statistics, numpy as np
from ddtb.tensor import parameter, backward, conv2d
rng = np.random.default_rng(0)
x = parameter(rng.normal(size=(16, 16, 24, 24)))
w = parameter(rng.normal(size=(16, 16, 3, 3)))
def step():
    x.grad = w.grad = None
    backward(conv2d(x, w, None, 1, 1).sum())
step()
ts = []
for _ in range({repeat}):
    t0 = time.perf_counter(); step(); ts.append(time.perf_counter() - t0)
import ddtb.kernels as k
print(k.BACKEND, statistics.median(ts))
"""
    env = dict(os.environ, DDTB_PURE_PYTHON=backend_env)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    name, t = out.stdout.split()
    return name, float(t)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        tp = timeit(lambda: fn(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:<28}{1e3 * tp:>12.3f}{'-':>12}{'-':>10}")
            continue
        tc = timeit(lambda: fn(_ckernels), args.repeat)
        print(f"{name:<28}{1e3 * tp:>12.3f}{1e3 * tc:>12.3f}{tp / tc:>9.2f}x")
    res = dict(conv_step(env, args.repeat) for env in ("1", "0"))
    tp, tc = res.get("python"), res.get("cython")
    if tc:
        print(f"{'conv2d fwd+bwd':<28}{1e3 * tp:>12.3f}{1e3 * tc:>12.3f}{tp / tc:>9.2f}x")
    else:
        print(f"{'conv2d fwd+bwd':<28}{1e3 * tp:>12.3f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
