"""Time each hot kernel under numba and numpy, plus one end-to-end run.

    python benchmarks/bench_kernels.py [--repeat N] [--e2e]

Both variants live side by side in ``sparsecl.kernels`` (``*_nb`` / ``*_np``),
so one process can compare them. The end-to-end number re-imports the
package in a subprocess with ``SPCL_NUMBA`` set each way.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from sparsecl import kernels


def _inputs(rng):
    B, H = 64, 128
    x = rng.standard_normal((B, H))
    dy = rng.standard_normal((B, H))
    gamma, beta = rng.standard_normal(H), rng.standard_normal(H)
    n = 40_000
    theta, grad = rng.standard_normal(n), rng.standard_normal(n)
    idx = np.sort(rng.choice(n, n // 10, replace=False)).astype(np.int64)
    anchor, omega = theta + 0.01, rng.random(n)
    draws = rng.integers(0, np.arange(2000) + 1).astype(np.int64)
    y, xhat, rstd = kernels.layer_norm_forward_np(x, gamma, beta, 1e-5)
    return {
        "gelu_forward": (x,),
        "gelu_backward": (x, dy),
        "layer_norm_forward": (x, gamma, beta, 1e-5),
        "layer_norm_backward": (dy, xhat, rstd, gamma),
        "adamw_update": lambda: (theta.copy(), grad, np.zeros(n), np.zeros(n), idx, 1e-3,
                                 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001),
        "masked_penalty": (theta, anchor, omega, idx, 0.05),
        "reservoir_owner": lambda: (draws, 0, 80, np.full(80, -1, np.int64)),
    }


def bench(repeat):
    rng = np.random.default_rng(0)
    cases = _inputs(rng)
    print(f"{'kernel':22s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name in kernels.KERNELS:
        args = cases[name]
        get = args if callable(args) else (lambda a=args: a)
        times = {}
        for suffix in ("np", "nb"):
            fn = getattr(kernels, f"{name}_{suffix}", None)
            if fn is None:
                continue
            fn(*get())  # warm up / compile
            t = min(timeit.repeat(lambda: fn(*get()), number=repeat, repeat=3))
            times[suffix] = 1e6 * t / repeat
        nb = times.get("nb")
        speed = f"{times['np'] / nb:7.2f}x" if nb else "     n/a"
        print(f"{name:22s} {times['np']:10.1f} {nb if nb else float('nan'):10.1f} {speed}")


_E2E = """
import time
from sparsecl import config, data, harness, kernels
cfg = config.load("configs/desk.toml").replace(run={"seeds": [0]})
u = data.make_synthetic_universe(cfg.data)
harness.foundation_model(u, cfg, 0)
t = time.perf_counter()
harness.run_sequence(cfg, u, 0)
print(kernels.backend(), round(time.perf_counter() - t, 3))
"""


def end_to_end():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    for flag in ("0", "1"):
        env = {**os.environ, "SPCL_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", _E2E], cwd=root, env=env,
                             capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"end-to-end 5-task run  {backend:6s} {float(secs):.3f} s")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--e2e", action="store_true", help="also time a full run per backend")
    a = ap.parse_args()
    print("numba available:", kernels.HAVE_NUMBA)
    bench(a.repeat)
    if a.e2e:
        end_to_end()
