"""Time the hot kernels on both acceleration paths.

The JIT/pure-numpy switch happens at import time (PCFMEM_NO_NUMBA), so the
script re-executes itself in a subprocess per path and prints a small
comparison table. Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 9 --grid 20000
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def bench_one_path(repeats: int, grid: int) -> dict:
    from pcfmem import accel

    accel.warmup()
    rng = np.random.default_rng(0)
    pitches = rng.uniform(1.2, 3.9, grid)
    dratios = rng.uniform(0.1, 0.89, grid)
    lams = rng.uniform(1.25, 1.65, grid)

    timings = {}

    def run(name, fn):
        best = min(_timed(fn) for _ in range(repeats))
        timings[name] = best

    def _timed(fn):
        t0 = time.perf_counter()
        fn()
        return time.perf_counter() - t0

    def physics_sweep():
        acc = 0.0
        for i in range(grid):
            acc += accel.dispersion_fd(pitches[i], dratios[i], lams[i], 1e-3)
            acc += accel.confinement_loss(pitches[i], dratios[i], lams[i], 6.0)
        return acc

    run("physics_sweep", physics_sweep)

    rewards = rng.normal(0.0, 1.0, 4096)
    values = rng.normal(0.0, 1.0, 4096)
    run("gae_scan", lambda: accel.gae_scan(rewards, values, 0.99, 0.95))

    x = rng.normal(0.0, 1.0, 520)
    w1 = rng.normal(0.0, 0.05, (520, 256))
    b1 = np.zeros(256)
    w2 = rng.normal(0.0, 0.05, (256, 256))
    b2 = np.zeros(256)
    wv = rng.normal(0.0, 0.05, 256)

    def mlp_loop():
        for _ in range(200):
            accel.mlp_forward_vec(x, w1, b1, w2, b2, wv, 0.0)

    run("mlp_forward", mlp_loop)
    return {"using_numba": bool(accel.USING_NUMBA), "timings": timings}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--grid", type=int, default=10000)
    parser.add_argument("--inner", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.inner:
        print(json.dumps(bench_one_path(args.repeats, args.grid)))
        return

    results = {}
    for label, extra_env in (("jit", {}), ("numpy", {"PCFMEM_NO_NUMBA": "1"})):
        env = dict(os.environ, **extra_env)
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--inner",
             "--repeats", str(args.repeats), "--grid", str(args.grid)],
            capture_output=True, text=True, env=env, check=True,
        )
        payload = json.loads(proc.stdout.strip().splitlines()[-1])
        expect = label == "jit"
        if payload["using_numba"] != expect:
            raise RuntimeError(f"{label} path reported using_numba={payload['using_numba']}")
        results[label] = payload["timings"]

    names = sorted(results["jit"])
    width = max(len(n) for n in names)
    print(f"{'kernel'.ljust(width)}  {'jit (ms)':>10}  {'numpy (ms)':>10}  {'speedup':>8}")
    for name in names:
        jit_ms = results["jit"][name] * 1e3
        np_ms = results["numpy"][name] * 1e3
        print(f"{name.ljust(width)}  {jit_ms:10.2f}  {np_ms:10.2f}  {np_ms / jit_ms:7.1f}x")


if __name__ == "__main__":
    main()
