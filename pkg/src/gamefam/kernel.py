"""Backend selection for the batch auction simulator.

The compiled extension is used when it imports; otherwise the numpy version.
Set ``GAMEFAM_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _auction_py

try:
    from . import _auction_ext
except ImportError:  # pragma: no cover - depends on build
    _auction_ext = None

_BACKENDS = {"python": _auction_py.simulate_batch}
if _auction_ext is not None:
    _BACKENDS["compiled"] = _auction_ext.simulate_batch

BACKEND = os.environ.get("GAMEFAM_BACKEND", "compiled" if _auction_ext else "python")
if BACKEND not in _BACKENDS:
    raise ImportError(f"backend {BACKEND!r} unavailable; have {sorted(_BACKENDS)}")

_queries = 0


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def query_count() -> int:
    """Total auction settings simulated in this process."""
    return _queries


def simulate_batch(q, theta, offsets, updates, coins, reserve, ctr, backend=None):
    """Simulate ``N`` independent auctions, one per row.

    Args:
        q, theta: ``(N, p)`` quality scores and valuations.
        offsets: ``(N, p)`` integer bid offsets of each seat's resolved strategy.
        updates: ``(N, p)`` whether the seat attempts a stage-two best response.
        coins: ``(N, p)`` whether a stage-two update would arrive in time.
        reserve: scalar or ``(N,)`` reserve requirement.
        ctr: per-slot click-through rates.

    Returns:
        ``(payoff (N, p), revenue (N,), final_bids (N, p))``.
    """
    global _queries
    q = np.ascontiguousarray(q, dtype=np.float64)
    n, p = q.shape
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    offsets = np.ascontiguousarray(np.broadcast_to(offsets, (n, p)), dtype=np.int64)
    updates = np.ascontiguousarray(np.broadcast_to(updates, (n, p)), dtype=np.uint8)
    coins = np.ascontiguousarray(np.broadcast_to(coins, (n, p)), dtype=np.uint8)
    reserve = np.ascontiguousarray(np.broadcast_to(reserve, (n,)), dtype=np.float64)
    ctr = np.ascontiguousarray(ctr, dtype=np.float64)
    _queries += n
    fn = _BACKENDS[backend or BACKEND]
    return fn(q, theta, offsets, updates, coins, reserve, ctr)
