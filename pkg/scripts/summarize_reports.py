"""Average per-stage held-out MSE over the reports written by ablation.sh."""
import argparse
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

STAGES = ("initial", "redense", "second_oneshot", "final")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    rows = defaultdict(list)
    for path in sorted(args.out_dir.glob("seed*/*.json")):
        rep = json.loads(path.read_text())
        if "model" not in rep:
            continue  # model manifests share the directory
        mse = {s["stage"]: s["mse_vs_dense_heldout"] for s in rep["model"]}
        rows[path.stem].append((mse, rep["early_exit_taken"]))

    head = f"{'row':<20}" + "".join(f"{s:>16}" for s in STAGES) + f"{'improve':>10}{'wins':>7}{'exits':>7}"
    print(head)
    print("-" * len(head))
    for name in sorted(rows):
        runs = rows[name]
        means = [np.mean([m[s] for m, _ in runs]) for s in STAGES]
        gains = [(m["initial"] - m["final"]) / m["initial"] for m, _ in runs]
        wins = sum(m["final"] < m["initial"] for m, _ in runs)
        exits = sum(e for _, e in runs)
        print(f"{name:<20}" + "".join(f"{v:>16.4e}" for v in means)
              + f"{np.median(gains):>10.2%}{wins:>4}/{len(runs):<2}{exits:>4}/{len(runs):<2}")


if __name__ == "__main__":
    main()
