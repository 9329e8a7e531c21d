"""Baseline vs fixed-head training on the bundled reference benchmark, a few seeds.

Usage: python3 scripts/reference_benchmark.py [--seeds 0 1 2] [--out-dir runs/benchmark]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from hyperfed.config import load_reference, preset_overrides
from hyperfed.experiment import execute


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--methods", nargs="+", default=["baseline", "hypersphere", "ce-calibrate"])
    ap.add_argument("--out-dir", default="runs/benchmark")
    args = ap.parse_args()

    results = {m: [] for m in args.methods}
    for method in args.methods:
        for seed in args.seeds:
            base = load_reference({"seed": seed})
            cfg = load_reference({"seed": seed, **preset_overrides(base, method)})
            summary, _ = execute(cfg, Path(args.out_dir) / f"{method}_seed{seed}")
            final = summary["accuracy_after"] if summary["accuracy_after"] is not None else summary["accuracy_before"]
            results[method].append(final)
            print(json.dumps({"method": method, **summary}, sort_keys=True))
    for method, accs in results.items():
        print(f"{method:14s} accuracy {np.mean(accs):.4f} +- {np.std(accs, ddof=1) if len(accs) > 1 else 0.0:.4f}")


if __name__ == "__main__":
    main()
