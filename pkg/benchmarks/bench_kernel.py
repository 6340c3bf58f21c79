"""Compiled vs numpy auction kernel throughput.

    python3 benchmarks/bench_kernel.py [--n 200000] [--players 5] [--repeat 3]
"""

import argparse
import time

import numpy as np

from gamefam import kernel
from gamefam.sim import AuctionConfig
from gamefam.strategies import PRESETS


def make_batch(n, players, seed=0):
    cfg = AuctionConfig(players=players, ctr=tuple(0.7**k for k in range(min(4, players))))
    strategies = PRESETS["paper10"]()
    rng = np.random.default_rng(seed)
    q = rng.random((n, players))
    theta = rng.random((n, players)) * cfg.theta_max
    strat = rng.integers(len(strategies), size=(n, players))
    offsets, updates = strategies.actions(strat, q, theta)
    coins = rng.random((n, players)) < cfg.update_success_prob
    reserve = rng.uniform(0.0, 8.0, n)
    return q, theta, offsets, updates, coins, reserve, cfg.ctr_array


def bench(backend, batch, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = kernel.simulate_batch(*batch, backend=backend)
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--players", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    batch = make_batch(args.n, args.players)
    results = {}
    for backend in kernel.available_backends():
        t, out = bench(backend, batch, args.repeat)
        results[backend] = out
        print(f"{backend:>9}: {t:8.4f} s  {args.n / t:12.0f} auctions/s")
    if len(results) == 2:
        a, b = results["compiled"], results["python"]
        same = all(np.array_equal(x, y) for x, y in zip(a, b))
        print(f"outputs identical: {same}")


if __name__ == "__main__":
    main()
