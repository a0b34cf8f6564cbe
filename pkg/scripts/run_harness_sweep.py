"""Accuracy with and without experience over a range of seeds and search settings.

    python3 scripts/run_harness_sweep.py --seeds 1-10 --tasks 100
"""

import argparse
import itertools
import statistics

from expbank.harness import run_benchmark
from expbank.search import SearchParams


def seed_range(text):
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi or lo) + 1))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=seed_range, default=seed_range("1-10"))
    p.add_argument("--tasks", type=int, default=100)
    p.add_argument("--k", type=int, nargs="+", default=[1, 3])
    p.add_argument("--rounds", type=int, nargs="+", default=[1, 3])
    args = p.parse_args()

    print(f"{'k':>2} {'L':>2} {'with':>7} {'without':>8} {'gain':>7} {'|G|':>5}")
    for k, rounds in itertools.product(args.k, args.rounds):
        params = SearchParams(k=k, rounds=rounds)
        with_acc, without_acc, sizes = [], [], []
        for seed in args.seeds:
            r = run_benchmark(args.tasks, seed, True, params)
            with_acc.append(r.accuracy)
            sizes.append(r.mean_retrieved)
            without_acc.append(run_benchmark(args.tasks, seed, False, params).accuracy)
        w, wo = statistics.mean(with_acc), statistics.mean(without_acc)
        print(f"{k:>2} {rounds:>2} {w:7.4f} {wo:8.4f} {w - wo:+7.4f} {statistics.mean(sizes):5.2f}")


if __name__ == "__main__":
    main()
