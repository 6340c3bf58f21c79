"""Piecewise-conditional best responses built from an interim payoff model."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .game import AuctionGame, Oracle, check_mixture, enumerate_opponent_profiles, oracle_profile_stats
from .learn import PayoffModel, sample_types
from .rng import as_rng
from .strategies import PiecewiseStrategy, TypePartition

# cutoffs of the five equiprobable intervals of q * theta for U(0,1) x U(0,25)
REFERENCE_CUTOFFS_K5 = (1.251829, 3.308699, 6.312033, 10.963049)


def effective_cap_cdf(x, theta_max: float = 25.0):
    """``P(q * theta <= x)`` for ``q ~ U(0,1)``, ``theta ~ U(0, theta_max)``."""
    z = np.clip(np.asarray(x, dtype=np.float64) / theta_max, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(z > 0, z - z * np.log(np.where(z > 0, z, 1.0)), 0.0)


def build_equiprobable_partition(k: int = 5, n_samples: int = 1_000_000, rng=None,
                                 theta_max: float = 25.0) -> TypePartition:
    """Empirical ``k``-quantiles of ``q * theta``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if k == 1:
        return TypePartition((), theta_max)
    rng = as_rng(rng)
    stat = rng.random(n_samples) * (rng.random(n_samples) * theta_max)
    cuts = np.quantile(stat, np.arange(1, k) / k)
    return TypePartition(tuple(float(c) for c in cuts), theta_max)


def conditional_devpay(model: PayoffModel, sigma, r: float, partition: TypePartition, samples,
                       preds: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-interval mean predictions ``(k, S)`` and sample counts ``(k,)``."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if preds is None:
        preds = model.predict_types(sigma, r, samples)
    cell = partition.interval_of(samples[:, 0] * samples[:, 1])
    counts = np.bincount(cell, minlength=partition.k)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        lo, hi = partition.edges[empty[0]], partition.edges[empty[0] + 1]
        raise ValueError(f"interval {empty[0]} [{lo}, {hi}) holds no samples")
    sums = np.zeros((partition.k, preds.shape[1]))
    np.add.at(sums, cell, preds)
    return sums / counts[:, None], counts


def piecewise_best_response(model: PayoffModel, sigma, r: float, partition: TypePartition,
                            n: int = 100_000, rng=None, samples=None) -> dict:
    """Interval-wise argmax of the conditional predictions (ties to the lowest index).

    Returns ``phi``, its predicted payoff, the recombined marginal vector and the
    per-interval table.
    """
    if samples is None:
        if n < partition.k:
            raise ValueError("need at least one sample per interval")
        samples = sample_types(rng, n, partition.upper)
    cond, counts = conditional_devpay(model, sigma, r, partition, samples)
    assignment = tuple(int(a) for a in cond.argmax(axis=1))
    weighted = (counts / counts.sum())[:, None] * cond
    # one reduction over both so the dominance holds in floating point, not just in exact arithmetic
    sums = np.column_stack([weighted, weighted.max(axis=1)]).sum(axis=0)
    marginal, predicted = sums[:-1], float(sums[-1])
    return {
        "phi": PiecewiseStrategy(partition, assignment),
        "predicted_payoff": predicted,
        "marginal": marginal,
        "atomic_best": int(marginal.argmax()),
        "atomic_best_payoff": float(marginal.max()),
        "conditional": cond,
        "counts": counts,
    }


def true_piecewise_payoff(game: AuctionGame, phi: PiecewiseStrategy, sigma, r: float,
                          n_settings: int = 10_000, rng=None) -> tuple[float, float]:
    """Oracle payoff (and standard error) of deviating to ``phi`` against ``sigma``.

    ``sigma`` is over ``game``'s strategies; the deviator resolves ``phi`` at its
    own type on every simulated setting.
    """
    sigma = check_mixture(sigma, game.n_strategies)
    ext = game.with_strategy(phi)
    sig_ext = np.append(sigma, 0.0)
    rng = as_rng(rng)
    mean, var = 0.0, 0.0
    for counts, pr in enumerate_opponent_profiles(sig_ext, game.players - 1):
        m, se = oracle_profile_stats(ext, counts, r, n_settings, rng, deviators=[game.n_strategies])
        mean += pr * float(m[0])
        var += (pr * float(se[0])) ** 2
    return mean, math.sqrt(var)


def true_devpay_with(oracle: Oracle, phi: PiecewiseStrategy, sigma, r: float) -> np.ndarray:
    """Oracle deviation payoffs over the strategy set extended with ``phi`` (shared draws)."""
    ext = oracle.with_game(oracle.game.with_strategy(phi))
    return ext.true_devpay(np.append(check_mixture(sigma, oracle.game.n_strategies), 0.0), r)


def percentage_increase(piecewise: float, atomic_best: float) -> Optional[float]:
    """Relative gain in percent; ``None`` when the atomic payoff is not positive."""
    if not atomic_best > 0:
        return None
    return (piecewise - atomic_best) / atomic_best * 100.0
