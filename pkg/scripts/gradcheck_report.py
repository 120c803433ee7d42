"""Worst finite-difference relative error per operator over many seeds.

    python scripts/gradcheck_report.py --seeds 20
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import gradcases  # noqa: E402
from oracles import gradcheck  # noqa: E402

from hnseg.autodiff import verification_mode  # noqa: E402


def worst_errors(seeds: int):
    w32, w64 = {}, {}
    for seed in range(seeds):
        for name, fn, inputs in gradcases.cases(np.random.default_rng(seed)):
            e = gradcheck(fn, inputs, np.random.default_rng([seed, 1]), np.float32, eps=1e-2)
            w32[name] = max(w32.get(name, 0.0), e)
        with verification_mode():
            for name, fn, inputs in gradcases.cases(np.random.default_rng(seed)):
                e = gradcheck(fn, inputs, np.random.default_rng([seed, 2]), np.float64, eps=1e-6)
                w64[name] = max(w64.get(name, 0.0), e)
    return w32, w64


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=20)
    args = p.parse_args()
    t0 = time.time()
    w32, w64 = worst_errors(args.seeds)
    print(f"{'operator':28s} {'32-bit':>9s} {'64-bit':>9s}")
    for name in w32:
        print(f"{name:28s} {w32[name]:9.2e} {w64[name]:9.2e}")
    print(f"limits 1e-2 / 1e-4, {args.seeds} seeds, {time.time() - t0:.1f} s")
