"""Benchmark the Lorenz-96 RK4 kernel with the numba and numpy backends.

The backend is fixed at import time by the PROJDA_DISABLE_NUMBA environment
variable, so each timing runs in a fresh subprocess. The script also checks
that both backends produce bit-identical trajectories.

Usage:
    python3 benchmarks/kernel_benchmark.py [--particles N] [--dim J]
                                           [--substeps K] [--steps T]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def time_backend(args):
    from projda.kernels import backend_name, l96_rk4_batch

    rng = np.random.default_rng(0)
    states = 8.0 + 0.5 * rng.standard_normal((args.particles, args.dim))
    h = 0.05 / args.substeps

    # warm up (includes JIT compilation for the numba backend)
    out = l96_rk4_batch(states, 8.0, h, args.substeps)

    start = time.perf_counter()
    for _ in range(args.steps):
        out = l96_rk4_batch(out, 8.0, h, args.substeps)
    elapsed = time.perf_counter() - start
    return {
        "backend": backend_name(),
        "seconds": elapsed,
        "steps_per_second": args.steps / elapsed,
        "checksum": float(np.sum(out)),
    }


def run_subprocess(disable_numba, argv):
    env = dict(os.environ, PROJDA_DISABLE_NUMBA="1" if disable_numba else "0")
    out = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--worker", *argv],
        env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--particles", type=int, default=2000)
    parser.add_argument("--dim", type=int, default=40)
    parser.add_argument("--substeps", type=int, default=5)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.worker:
        print(json.dumps(time_backend(args)))
        return

    argv = [f"--particles={args.particles}", f"--dim={args.dim}",
            f"--substeps={args.substeps}", f"--steps={args.steps}"]
    results = [run_subprocess(disable, argv) for disable in (False, True)]

    print(f"Lorenz-96 RK4 batch: {args.particles} particles x {args.dim} dims, "
          f"{args.steps} steps of {args.substeps} substeps")
    for r in results:
        print(f"  {r['backend']:>5}: {r['seconds']:8.3f} s "
              f"({r['steps_per_second']:8.1f} steps/s)")
    if results[0]["backend"] == results[1]["backend"]:
        print("note: numba unavailable; both runs used the numpy backend")
    else:
        speedup = results[1]["seconds"] / results[0]["seconds"]
        print(f"  speedup (numba over numpy): {speedup:.2f}x")
        match = results[0]["checksum"] == results[1]["checksum"]
        print(f"  trajectories bit-identical: {'yes' if match else 'NO'}")
        if not match:
            sys.exit(1)


if __name__ == "__main__":
    main()
