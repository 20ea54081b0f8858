"""Throughput comparison of the jitted kernels against the numpy fallback.

Runs each kernel workload in two subprocesses (LIDE_JIT=1 and LIDE_JIT=0)
so the import-time backend selection is exercised exactly as in normal use,
then prints a table of per-call times and the speedup.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def _workloads():
    import numpy as np

    from lide import kernels

    rng = np.random.default_rng(0)
    x_conv = rng.normal(size=(16, 32, 16, 16))
    cols = kernels.im2col(x_conv, 3, 3, stride=1)
    x_pair = rng.normal(size=(1200, 64))

    return {
        "im2col 16x32x16x16 k3": lambda: kernels.im2col(x_conv, 3, 3, stride=1),
        "col2im 16x32x16x16 k3": lambda: kernels.col2im(cols, x_conv.shape, 3, 3, stride=1),
        "pairwise_sq 1200x64": lambda: kernels.pairwise_sq_dists(x_pair),
    }


def run_worker(repeat):
    from lide import kernels

    out = {"jit": kernels.JIT_ENABLED, "times": {}}
    for name, fn in _workloads().items():
        fn()  # warmup (includes jit compile when enabled)
        fn()
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        out["times"][name] = (time.perf_counter() - t0) / repeat
    print(json.dumps(out))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        run_worker(args.repeat)
        return

    results = {}
    for label, flag in (("numba", "1"), ("numpy", "0")):
        env = dict(os.environ, LIDE_JIT=flag)
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--worker",
             "--repeat", str(args.repeat)],
            capture_output=True, text=True, env=env, check=True)
        doc = json.loads(proc.stdout.strip().splitlines()[-1])
        if label == "numba" and not doc["jit"]:
            print("note: numba unavailable; both columns use the numpy path")
        results[label] = doc["times"]

    width = max(len(k) for k in results["numba"])
    print(f"{'kernel':<{width}}  {'numba':>10}  {'numpy':>10}  {'speedup':>8}")
    for name in results["numba"]:
        tj, tn = results["numba"][name], results["numpy"][name]
        print(f"{name:<{width}}  {tj * 1e3:>8.2f}ms  {tn * 1e3:>8.2f}ms  {tn / tj:>7.1f}x")


if __name__ == "__main__":
    main()
