"""Compare the numba and pure-numpy im2col/col2im paths.

Kernel timings run in-process (both implementations are importable when
numba is available).  The end-to-end timing of ABRA training iterations runs
each backend in a subprocess, because the backend is fixed at import time by
the ABRA_NUMBA environment variable.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--epochs 1]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from abra import _kernels as K

# shapes seen by the desk backbone at batch 50 (and the doubled ABRA batch)
SHAPES = [
    ("block0", (50, 3, 16, 16)),
    ("block1", (50, 16, 8, 8)),
    ("block2", (50, 32, 4, 4)),
    ("block0 x2", (100, 3, 16, 16)),
]

STEP_SCRIPT = """
import time
from abra import backend, generate, PlateSpec, TrainConfig, train
ds = generate(PlateSpec(), 0)
cfg = TrainConfig.for_method("abra", epochs={epochs}, seed=0)
train(ds, TrainConfig.for_method("abra", epochs=1, seed=0), evaluate_after=False)  # warm caches / jit
t = time.perf_counter()
_, rep = train(ds, cfg, evaluate_after=False)
dt = time.perf_counter() - t
print(backend(), rep.iterations, dt)
"""


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_kernels(repeats):
    if K.im2col_numba is None:
        print("numba unavailable; kernel comparison skipped")
        return
    rng = np.random.default_rng(0)
    print(f"{'shape':10s} {'op':7s} {'numpy ms':>9s} {'numba ms':>9s} {'speedup':>8s}  equal")
    for name, shape in SHAPES:
        x = rng.standard_normal(shape)
        cols_np = K.im2col_numpy(x, 3, 3, 1, 1)
        cols_nb = K.im2col_numba(x, 3, 3, 1, 1)
        t_np = best_of(lambda: K.im2col_numpy(x, 3, 3, 1, 1), repeats)
        t_nb = best_of(lambda: K.im2col_numba(x, 3, 3, 1, 1), repeats)
        print(f"{name:10s} {'im2col':7s} {t_np * 1e3:9.3f} {t_nb * 1e3:9.3f} {t_np / t_nb:8.2f}  {np.array_equal(cols_np, cols_nb)}")
        g = rng.standard_normal(cols_np.shape)
        back_np = K.col2im_numpy(g, shape, 3, 3, 1, 1)
        back_nb = K.col2im_numba(g, shape, 3, 3, 1, 1)
        t_np = best_of(lambda: K.col2im_numpy(g, shape, 3, 3, 1, 1), repeats)
        t_nb = best_of(lambda: K.col2im_numba(g, shape, 3, 3, 1, 1), repeats)
        print(f"{name:10s} {'col2im':7s} {t_np * 1e3:9.3f} {t_nb * 1e3:9.3f} {t_np / t_nb:8.2f}  {np.array_equal(back_np, back_nb)}")


def bench_training(epochs):
    print(f"\nABRA training, {epochs} epoch(s) after one warm-up epoch")
    results = {}
    for flag in ("0", "1"):
        env = dict(os.environ, ABRA_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, "-c", STEP_SCRIPT.format(epochs=epochs)],
            env=env, capture_output=True, text=True, check=True,
        )
        name, iters, dt = out.stdout.split()
        results[name] = float(dt) / int(iters)
        print(f"  {name:6s} {int(iters):5d} iterations  {float(dt):7.2f} s  {1e3 * float(dt) / int(iters):7.2f} ms/iter")
    if len(results) == 2:
        print(f"  speedup numba over numpy: {results['numpy'] / results['numba']:.2f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--skip-training", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeats)
    if not args.skip_training:
        bench_training(args.epochs)


if __name__ == "__main__":
    main()
