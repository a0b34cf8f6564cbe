"""Flat-scan top-k latency as a function of bank size and dimension.

    python3 scripts/bench_topk_latency.py --n 10000 100000 --dim 64 1024
"""

import argparse
import time

import numpy as np

from expbank.embed import unit_normalize
from expbank.index import FlatIndex


def random_index(n, dim, rng, chunk=10_000):
    idx = FlatIndex(dim, capacity=n)
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        block = rng.standard_normal((m, dim), dtype=np.float32)
        block /= np.linalg.norm(block.astype(np.float64), axis=1, keepdims=True).astype(np.float32)
        idx.add_many([f"x{start + i:07d}" for i in range(m)], block)
    return idx


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    p.add_argument("--dim", type=int, nargs="+", default=[64, 1024])
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'N':>8} {'D':>5} {'median ms':>10} {'best ms':>8}")
    for dim in args.dim:
        for n in args.n:
            idx = random_index(n, dim, rng)
            q = unit_normalize(rng.standard_normal(dim))
            idx.top_k(q, args.k)
            times = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                idx.top_k(q, args.k)
                times.append(time.perf_counter() - t0)
            times.sort()
            print(f"{n:>8} {dim:>5} {1000 * times[len(times) // 2]:10.2f} {1000 * times[0]:8.2f}")
            del idx


if __name__ == "__main__":
    main()
