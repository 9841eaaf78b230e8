"""Seeded SDS trials on a synthetic ReLU teacher, run in-process.

Prints held-out MSE against the dense teacher at every stage, per seed, then
win counts and the median relative improvement of the final model over the
initial one-shot prune.

    python3 scripts/sds_synthetic.py --method sparsegpt --pattern 2:4 --seeds 25
"""
import argparse
import time

import numpy as np

from sds import SdsConfig, make_calibration, parse_pattern, run_sds
from sds.linalg import Rng
from sds.model import random_model
from sds.pipeline import STAGES
from sds.reconstruction import ReconConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--method", default="sparsegpt", choices=["sparsegpt", "wanda", "magnitude"])
    ap.add_argument("--pattern", default="2:4")
    ap.add_argument("--dims", default="32,64,64,32")
    ap.add_argument("--tokens", type=int, default=682)
    ap.add_argument("--correlation", type=float, default=0.5)
    ap.add_argument("--seeds", type=int, default=25)
    ap.add_argument("--data-mode", default="sd", choices=["dd", "sd", "kd"])
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--no-early-exit", action="store_true")
    ap.add_argument("--no-weight-reg", action="store_true")
    ap.add_argument("--std-scale", type=float, default=1.0, help="multiplier on the 1/sqrt(in_dim) teacher std")
    args = ap.parse_args()

    dims = [int(d) for d in args.dims.split(",")]
    cfg = SdsConfig(
        method=args.method,
        pattern=parse_pattern(args.pattern),
        data_mode=args.data_mode,
        recon=ReconConfig(epochs=args.epochs, use_weight_reg=not args.no_weight_reg),
        early_exit=not args.no_early_exit,
    )

    print(f"{'seed':>4}" + "".join(f"{s:>16}" for s in STAGES) + f"{'exit':>6}")
    gains, wins, redense_wins = [], 0, 0
    t0 = time.perf_counter()
    for seed in range(args.seeds):
        teacher = random_model(Rng(seed), dims)
        if args.std_scale != 1.0:
            teacher = teacher.with_weights([w * np.float32(args.std_scale) for w in teacher.weights])
        calib = make_calibration(Rng(10_000 + seed), dims[0], args.tokens, args.correlation)
        _, rep = run_sds(teacher, calib, cfg)
        mse = {s.stage: s.mse_vs_dense_heldout for s in rep.model}
        print(f"{seed:>4}" + "".join(f"{mse[s]:>16.4e}" for s in STAGES) + f"{'yes' if rep.early_exit_taken else 'no':>6}")
        gains.append((mse["initial"] - mse["final"]) / mse["initial"])
        wins += mse["final"] < mse["initial"]
        redense_wins += mse["redense"] < mse["initial"]

    print()
    print(f"final < initial:   {wins}/{args.seeds}")
    print(f"redense < initial: {redense_wins}/{args.seeds}")
    print(f"median relative improvement: {np.median(gains):.2%}")
    print(f"wall time: {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
