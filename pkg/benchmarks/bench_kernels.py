"""Compare the numba and numpy convolution kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the first two convolutions of reference model A on a 32-example
batch. Also times a full model-A training step with ``AT2L_NUMBA`` on and off.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from at2l.autodiff import kernels

CASES = {
    "conv1 (32x28x28x1, 5x5)": ((32, 28, 28, 1), 5),
    "conv2 (32x24x24x64, 5x5)": ((32, 24, 24, 64), 5),
}

STEP = """
import os, time, numpy as np
from threadpoolctl import threadpool_limits
from at2l.models import build_model, zoo_spec
from at2l.training import clean_loss, param_grads
m = build_model(zoo_spec("A"), 0, np.float32)
x = np.random.default_rng(0).uniform(size=(32, 28, 28, 1)).astype(np.float32)
y = np.arange(32) % 10
with threadpool_limits(1):
    param_grads(m, clean_loss(m, x, y))
    t = time.perf_counter()
    for i in range({repeat}):
        param_grads(m, clean_loss(m, x, y, train=True, rng=np.random.default_rng(i)))
    print((time.perf_counter() - t) / {repeat})
"""


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.numba_enabled():
        sys.exit("numba is unavailable or disabled (AT2L_NUMBA=0); nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<34}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    with threadpool_limits(1):
        for name, (shape, k) in CASES.items():
            x = rng.uniform(size=shape).astype(np.float32)
            cols = kernels.im2col_numpy(x, k, k)
            kernels.im2col_numba(x, k, k)  # compile outside the timed region
            kernels.col2im_numba(cols, shape[1], shape[2])
            assert np.array_equal(kernels.im2col_numba(x, k, k), cols)
            assert np.array_equal(kernels.col2im_numba(cols, shape[1], shape[2]),
                                  kernels.col2im_numpy(cols, shape[1], shape[2]))
            for kern, a, b in (
                ("im2col", lambda: kernels.im2col_numpy(x, k, k), lambda: kernels.im2col_numba(x, k, k)),
                ("col2im", lambda: kernels.col2im_numpy(cols, shape[1], shape[2]),
                 lambda: kernels.col2im_numba(cols, shape[1], shape[2])),
            ):
                ta, tb = best(a, args.repeat) * 1e3, best(b, args.repeat) * 1e3
                print(f"{kern + ' ' + name:<34}{ta:>10.2f}{tb:>10.2f}{ta / tb:>8.2f}x")
    step = {}
    for flag in ("0", "1"):
        env = dict(os.environ, AT2L_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP.format(repeat=max(args.repeat // 4, 3))], env=env,
                             capture_output=True, text=True, check=True)
        step[flag] = float(res.stdout.strip()) * 1e3
    print(f"{'model A train step, 32 examples':<34}{step['0']:>10.1f}{step['1']:>10.1f}{step['0'] / step['1']:>8.2f}x")


if __name__ == "__main__":
    main()
