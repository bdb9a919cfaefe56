"""Experiment 1: mean regret table and cumulative frequencies for the paper methods.

    python scripts/run_exp1.py --replicates 100 --workers 4
"""

import argparse
import os

from _tables import run_and_print

from bmax.experiments import EXP1, EXP1_BOUNDARIES, with_seed


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--replicates", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=int(os.environ.get("BMAX_WORKERS", "1")))
    args = ap.parse_args()
    run_and_print(with_seed(EXP1, args.seed), args.replicates, args.workers, EXP1_BOUNDARIES)


if __name__ == "__main__":
    main()
