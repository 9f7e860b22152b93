"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N] [--no-train-step]

Kernel timings call both namespaces in-process.  The training-step timing
runs one subprocess per backend with E2CAPS_NUMBA set accordingly, since the
backend is chosen at import.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from e2caps import _kernels

TRAIN_STEP = """
import time, numpy as np
from e2caps.train import TrainConfig
from e2caps.losses import LossConfig
from e2caps.optim import Adam
cfg = TrainConfig().validate()
model = cfg.build_model(4)
rng = np.random.Generator(np.random.PCG64(0))
x = rng.uniform(0, 1, (16, 3, 64, 64)).astype(np.float32)
att = rng.uniform(0, 1, (16, 100, 100))
y = np.arange(16) % 4
target = rng.uniform(0, 1, (16, cfg.recon_size ** 2)).astype(np.float32)
opt = Adam(model.params, lr=cfg.lr)
def step():
    out = model.forward(x, att)
    total, _, _ = model.losses(out, y, target, LossConfig())
    opt.zero_grad()
    total.backward()
    opt.step()
step()
best = float("inf")
for _ in range({repeat}):
    t0 = time.perf_counter(); step(); best = min(best, time.perf_counter() - t0)
print(best)
"""


def cases(rng):
    x = rng.standard_normal((16, 32, 34, 34)).astype(np.float32)
    cols = _kernels.numpy_kernels.im2col(x, 3, 3, 1, 32, 32)
    pool_in = rng.standard_normal((16, 32, 32, 32)).astype(np.float32)
    _, idx = _kernels.numpy_kernels.maxpool2(pool_in)
    g = rng.standard_normal((16, 32, 16, 16)).astype(np.float32)
    centers = [tuple(c) for c in rng.integers(0, 100, (16, 2)).tolist()]
    n = 1_000_000
    p, grad = rng.standard_normal(n).astype(np.float32), rng.standard_normal(n).astype(np.float32)
    m, v = np.zeros(n, np.float32), np.zeros(n, np.float32)
    return {
        "im2col 16x32x34x34 k3": lambda k: k.im2col(x, 3, 3, 1, 32, 32),
        "col2im 16x32x34x34 k3": lambda k: k.col2im(cols, 32, 34, 34, 3, 3, 1, 32, 32),
        "maxpool2 16x32x32x32": lambda k: k.maxpool2(pool_in),
        "maxpool2 backward": lambda k: k.maxpool2_backward(g, idx),
        "render 16 centers": lambda k: k.render(centers, 100, 7, 0.07),
        "adam 1M params": lambda k: k.adam(p.copy(), grad, m.copy(), v.copy(),
                                           1e-4, 0.9, 0.999, 1e-8, 0.1, 0.001),
    }


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation for numba
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def train_step_time(backend_flag, repeat):
    env = dict(os.environ, E2CAPS_NUMBA=backend_flag)
    out = subprocess.run([sys.executable, "-c", TRAIN_STEP.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--no-train-step", action="store_true")
    args = ap.parse_args(argv)

    if _kernels.numba_kernels is None:
        sys.exit("numba is not importable; nothing to compare")
    rng = np.random.Generator(np.random.PCG64(0))
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_np = best_of(lambda: fn(_kernels.numpy_kernels), args.repeat)
        t_nb = best_of(lambda: fn(_kernels.numba_kernels), args.repeat)
        print(f"{name:28s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}")
    if not args.no_train_step:
        t_np = train_step_time("0", max(3, args.repeat // 2))
        t_nb = train_step_time("1", max(3, args.repeat // 2))
        print(f"{'train step (toy E2, B=16)':28s} {1e3 * t_np:10.1f} {1e3 * t_nb:10.1f} "
              f"{t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
