"""Vectorized numpy batch simulator (fallback for the compiled kernel).

Every row of the batch is one auction setting with ``p`` seats. Semantics:

* stage one: ``bid0 = max(floor(theta) - offset, 0)``;
* stage two: a seat with ``update`` and a successful ``coin`` replaces its bid
  by the smallest integer in ``[0, floor(theta)]`` maximizing its utility
  against the other seats' stage-one effective bids;
* settlement: seats with ``q > 0`` and ``q * bid >= r`` are ranked by
  descending effective bid (ties to the lower seat index); the k-th ranked
  seat takes slot k while slots remain and pays
  ``max(next effective bid, r) / q`` per click.
"""

from __future__ import annotations

import numpy as np


def _settle(e, q, theta, reserve, ctr):
    n, p = e.shape
    slots = ctr.shape[0]
    part = (q > 0.0) & (e >= reserve[:, None])
    key = np.where(part, e, -np.inf)
    # stable argsort on -key: descending e, ties to lower index
    order = np.argsort(-key, axis=1, kind="stable")
    sorted_e = np.take_along_axis(key, order, axis=1)
    n_part = part.sum(axis=1)
    nxt = np.full((n, p), -np.inf)
    nxt[:, :-1] = sorted_e[:, 1:]
    nxt = np.maximum(nxt, reserve[:, None])
    payoff = np.zeros((n, p))
    revenue = np.zeros(n)
    rows = np.arange(n)
    for k in range(min(slots, p)):
        win = k < n_part
        i = order[:, k]
        qi = q[rows, i]
        price = np.where(win, nxt[:, k] / np.where(win, qi, 1.0), 0.0)
        pay = ctr[k] * (theta[rows, i] - price)
        payoff[rows[win], i[win]] = pay[win]
        revenue += np.where(win, ctr[k] * price, 0.0)
    return payoff, revenue


def _best_response(i, bid0, q, theta, reserve, ctr):
    n, p = q.shape
    slots = ctr.shape[0]
    bmax = int(np.floor(theta[:, i].max(initial=0.0)))
    bids = np.arange(bmax + 1, dtype=np.float64)
    qi = q[:, i][:, None]
    eb = qi * bids[None, :]
    r = reserve[:, None]
    pos = np.zeros(eb.shape, dtype=np.int64)
    nxt = np.full(eb.shape, -np.inf)
    for j in range(p):
        if j == i:
            continue
        ej = q[:, j] * bid0[:, j]
        live = ((q[:, j] > 0.0) & (ej >= reserve))[:, None]
        ej = ej[:, None]
        above = live & ((ej > eb) | ((ej == eb) & (j < i)))
        below = live & ~above
        pos += above
        nxt = np.where(below, np.maximum(nxt, ej), nxt)
    nxt = np.maximum(nxt, r)
    wins = (qi > 0.0) & (eb >= r) & (pos < slots)
    ctr_at = ctr[np.minimum(pos, slots - 1)]
    util = np.where(wins, ctr_at * (theta[:, i][:, None] - nxt / np.where(qi > 0, qi, 1.0)), 0.0)
    util = np.where(bids[None, :] <= np.floor(theta[:, i])[:, None], util, -np.inf)
    return np.argmax(util, axis=1).astype(np.int64)


def simulate_batch(q, theta, offsets, updates, coins, reserve, ctr):
    q = np.asarray(q, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    bid0 = np.maximum(np.floor(theta).astype(np.int64) - offsets, 0)
    final = bid0.copy()
    moves = np.asarray(updates, dtype=bool) & np.asarray(coins, dtype=bool)
    for i in range(q.shape[1]):
        rows = np.flatnonzero(moves[:, i])
        if rows.size:
            final[rows, i] = _best_response(
                i, bid0[rows], q[rows], theta[rows], reserve[rows], ctr
            )
    payoff, revenue = _settle(q * final, q, theta, reserve, ctr)
    return payoff, revenue, final
