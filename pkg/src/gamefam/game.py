"""Symmetric Bayesian auction game family: profiles, oracle payoffs, regret."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernel
from .rng import as_rng, child_rng
from .sim import AuctionConfig
from .strategies import Strategy, StrategySet

REGRET_CLAMP = 1e-9


def check_mixture(sigma, n: Optional[int] = None, tol: float = 1e-9) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or (n is not None and sigma.shape[0] != n):
        raise ValueError(f"mixture must be a length-{n} vector, got shape {sigma.shape}")
    if (sigma < 0).any() or abs(sigma.sum() - 1.0) > tol:
        raise ValueError(f"not a simplex point: {sigma}")
    return sigma


class AuctionGame:
    """One auction configuration paired with a strategy set.

    Seat 0 is the deviator in every deviation-payoff computation; opponents
    take seats ``1..p-1`` in sorted strategy order.
    """

    def __init__(self, cfg: AuctionConfig, strategies: StrategySet):
        self.cfg = cfg
        self.strategies = strategies

    @property
    def players(self) -> int:
        return self.cfg.players

    @property
    def n_strategies(self) -> int:
        return len(self.strategies)

    def with_strategy(self, s: Strategy) -> "AuctionGame":
        return AuctionGame(self.cfg, self.strategies.extended(s))

    def draw_settings(self, rng, n: int):
        """``(q, theta, coins)``, each ``(n, p)``."""
        p = self.players
        q = rng.random((n, p))
        theta = rng.random((n, p)) * self.cfg.theta_max
        coins = rng.random((n, p)) < self.cfg.update_success_prob
        return q, theta, coins

    def play(self, strat, q, theta, coins, reserve):
        """Payoffs ``(n, p)`` and revenue ``(n,)`` for per-seat strategy indices."""
        offsets, updates = self.strategies.actions(strat, q, theta)
        payoff, revenue, _ = kernel.simulate_batch(
            q, theta, offsets, updates, coins, reserve, self.cfg.ctr_array
        )
        return payoff, revenue

    def deviation_payoffs(self, opp, q, theta, coins, reserve,
                          deviators: Optional[Iterable[int]] = None) -> np.ndarray:
        """Seat-0 payoff ``(n, len(deviators))`` with everything but seat 0's strategy shared."""
        opp = np.asarray(opp, dtype=np.int64).reshape(q.shape[0], self.players - 1)
        devs = list(range(self.n_strategies)) if deviators is None else list(deviators)
        out = np.empty((q.shape[0], len(devs)))
        strat = np.empty((q.shape[0], self.players), dtype=np.int64)
        strat[:, 1:] = opp
        for col, j in enumerate(devs):
            strat[:, 0] = j
            out[:, col] = self.play(strat, q, theta, coins, reserve)[0][:, 0]
        return out


def _compositions(support: Sequence[int], total: int):
    for combo in itertools.combinations_with_replacement(support, total):
        yield combo


def multinomial_prob(counts, sigma) -> float:
    counts = np.asarray(counts)
    n = int(counts.sum())
    coef = math.factorial(n)
    prob = 1.0
    for c, s in zip(counts, sigma):
        if c:
            coef //= math.factorial(int(c))
            prob *= float(s) ** int(c)
    return coef * prob


def enumerate_opponent_profiles(sigma, opponents: int) -> list[tuple[np.ndarray, float]]:
    """All opponent count vectors over the support of ``sigma`` with their probabilities."""
    sigma = np.asarray(sigma, dtype=np.float64)
    support = np.flatnonzero(sigma > 0)
    out = []
    for combo in _compositions(support.tolist(), opponents):
        counts = np.bincount(np.asarray(combo, dtype=np.int64), minlength=sigma.shape[0])
        out.append((counts, multinomial_prob(counts, sigma)))
    return out


def counts_to_seats(counts) -> np.ndarray:
    """Canonical (sorted) opponent seat assignment for a count vector."""
    return np.repeat(np.arange(len(counts)), np.asarray(counts, dtype=np.int64))


def oracle_profile_stats(game: AuctionGame, counts, reserve: float, n_settings: int, rng,
                         deviators=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of each deviation payoff against a fixed opponent profile."""
    if n_settings < 1:
        raise ValueError("n_settings must be positive")
    rng = as_rng(rng)
    q, theta, coins = game.draw_settings(rng, n_settings)
    opp = np.broadcast_to(counts_to_seats(counts), (n_settings, game.players - 1))
    pay = game.deviation_payoffs(opp, q, theta, coins, reserve, deviators)
    sem = pay.std(axis=0, ddof=1) / math.sqrt(n_settings) if n_settings > 1 else np.zeros(pay.shape[1])
    return pay.mean(axis=0), sem


def oracle_profile_devpay(game: AuctionGame, counts, reserve: float, n_settings: int, rng) -> np.ndarray:
    return oracle_profile_stats(game, counts, reserve, n_settings, rng)[0]


def true_devpay(game: AuctionGame, sigma, reserve: float, n_settings: int, rng) -> np.ndarray:
    """Probability-weighted oracle deviation payoffs over all opponent profiles of ``sigma``."""
    sigma = check_mixture(sigma, game.n_strategies)
    rng = as_rng(rng)
    total = np.zeros(game.n_strategies)
    for counts, pr in enumerate_opponent_profiles(sigma, game.players - 1):
        total += pr * oracle_profile_devpay(game, counts, reserve, n_settings, rng)
    return total


def regret(sigma, devpay) -> float:
    sigma = np.asarray(sigma, dtype=np.float64)
    devpay = np.asarray(devpay, dtype=np.float64)
    if sigma.shape != devpay.shape:
        raise ValueError(f"length mismatch: {sigma.shape} vs {devpay.shape}")
    reg = float(devpay.max() - sigma @ devpay)
    if -REGRET_CLAMP <= reg < 0.0:
        return 0.0
    return reg


def simplex_grid(n_strategies: int, step: float = 0.1, support: int = 3) -> np.ndarray:
    """Every mixture with entries on multiples of ``step`` and at most ``support`` nonzero entries."""
    n = int(round(1.0 / step))
    if not math.isclose(n * step, 1.0):
        raise ValueError("step must divide 1")
    support = min(support, n_strategies)
    pts = set()
    for Y in itertools.combinations(range(n_strategies), support):
        for cut in itertools.combinations(range(n + support - 1), support - 1):
            parts = np.diff([-1, *cut, n + support - 1]) - 1
            v = [0] * n_strategies
            for j, c in zip(Y, parts):
                v[j] = int(c)
            pts.add(tuple(v))
    return np.array(sorted(pts, reverse=True), dtype=np.float64) / n


class Oracle:
    """Cached simulation oracle with one derived random stream per query key.

    Every ``(opponent counts, r)`` pair gets its own stream from ``seed``, so
    results do not depend on query order and repeated queries are free.
    Streams ignore trailing zero counts: an oracle for a game extended by new
    strategies reuses the draws of profiles that do not involve them.
    """

    def __init__(self, game: AuctionGame, n_settings: int = 10_000, seed: int = 0):
        self.game = game
        self.n_settings = int(n_settings)
        self.seed = int(seed)
        self._dev: dict = {}
        self._rev: dict = {}

    @staticmethod
    def _key(counts, reserve):
        return tuple(int(c) for c in counts), round(float(reserve), 9)

    @staticmethod
    def _stream(key):
        counts, r = key
        n = len(counts)
        while n and counts[n - 1] == 0:
            n -= 1
        return (*counts[:n], r)

    def profile_stats(self, counts, reserve: float):
        key = self._key(counts, reserve)
        hit = self._dev.get(key)
        if hit is None:
            rng = child_rng(self.seed, "devpay", *self._stream(key))
            hit = oracle_profile_stats(self.game, counts, reserve, self.n_settings, rng)
            self._dev[key] = hit
        return hit

    def true_devpay_stats(self, sigma, reserve: float):
        sigma = check_mixture(sigma, self.game.n_strategies)
        mean = np.zeros(self.game.n_strategies)
        var = np.zeros(self.game.n_strategies)
        for counts, pr in enumerate_opponent_profiles(sigma, self.game.players - 1):
            m, se = self.profile_stats(counts, reserve)
            mean += pr * m
            var += (pr * se) ** 2
        return mean, np.sqrt(var)

    def true_devpay(self, sigma, reserve: float) -> np.ndarray:
        return self.true_devpay_stats(sigma, reserve)[0]

    def true_regret(self, sigma, reserve: float) -> float:
        return regret(sigma, self.true_devpay(sigma, reserve))

    def profile_revenue(self, counts, reserve: float) -> tuple[float, float]:
        """Mean publisher revenue (and its standard error) of a full p-player profile."""
        key = self._key(counts, reserve)
        hit = self._rev.get(key)
        if hit is None:
            rng = child_rng(self.seed, "revenue", *self._stream(key))
            n = self.n_settings
            q, theta, coins = self.game.draw_settings(rng, n)
            seats = np.broadcast_to(counts_to_seats(counts), (n, self.game.players))
            rev = self.game.play(seats, q, theta, coins, reserve)[1]
            hit = (float(rev.mean()), float(rev.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0)
            self._rev[key] = hit
        return hit

    def expected_revenue(self, sigma, reserve: float) -> float:
        sigma = check_mixture(sigma, self.game.n_strategies)
        return sum(pr * self.profile_revenue(c, reserve)[0]
                   for c, pr in enumerate_opponent_profiles(sigma, self.game.players))

    def with_game(self, game: AuctionGame) -> "Oracle":
        return Oracle(game, self.n_settings, self.seed)


@dataclass
class Observation:
    """One simulator observation: deviator type, opponents, payoff per deviation."""

    own_type: np.ndarray     # (2,) quality, valuation
    opp_types: np.ndarray    # (p-1, 2)
    opp_strats: np.ndarray   # (p-1,) sorted strategy indices
    coins: np.ndarray        # (p,) stage-two arrival flags, seat 0 first
    payoffs: np.ndarray      # (|S|,)


def sample_observations(game: AuctionGame, sigma, reserve, n: int, rng) -> dict:
    """Vectorized draw of ``n`` observations at ``(sigma, reserve)``.

    ``reserve`` may be a scalar or an ``(n,)`` array. Returns arrays keyed
    ``own_type, opp_types, opp_strats, coins, payoffs``.
    """
    rng = as_rng(rng)
    p = game.players
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 1:
        sigma = np.broadcast_to(sigma, (n, sigma.shape[0]))
    cdf = np.cumsum(sigma, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((n, p - 1))
    opp = np.sort((u[:, :, None] > cdf[:, None, :]).sum(axis=2), axis=1).astype(np.int64)
    q, theta, coins = game.draw_settings(rng, n)
    payoffs = game.deviation_payoffs(opp, q, theta, coins, reserve)
    types = np.stack([q, theta], axis=2)
    return {
        "own_type": types[:, 0, :],
        "opp_types": types[:, 1:, :],
        "opp_strats": opp,
        "coins": coins,
        "payoffs": payoffs,
    }


def sample_observation(game: AuctionGame, sigma, reserve: float, rng) -> Observation:
    obs = sample_observations(game, check_mixture(sigma, game.n_strategies), reserve, 1, rng)
    return Observation(**{k: v[0] for k, v in obs.items()})


def monte_carlo_devpay(game: AuctionGame, sigma, reserve: float, n: int, rng):
    """Direct estimator sampling opponents from ``sigma`` per simulation (mean, sem)."""
    pay = sample_observations(game, sigma, reserve, n, rng)["payoffs"]
    return pay.mean(axis=0), pay.std(axis=0, ddof=1) / math.sqrt(n)


def write_oracle_csv(path, rows: list[dict]) -> None:
    fields = ["r", "profile", "strategy", "mean_payoff", "sem", "n"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in fields})


def oracle_rows(oracle: Oracle, counts, reserve: float) -> list[dict]:
    m, se = oracle.profile_stats(counts, reserve)
    prof = " ".join(str(int(c)) for c in counts)
    return [
        {"r": repr(float(reserve)), "profile": prof, "strategy": j, "mean_payoff": repr(float(m[j])),
         "sem": repr(float(se[j])), "n": oracle.n_settings}
        for j in range(len(m))
    ]
