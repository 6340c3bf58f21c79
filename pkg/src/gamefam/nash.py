"""Replicator-dynamics equilibrium search, candidate classification and oracle confirmation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .game import regret, simplex_grid
from .learn import NumericError, PayoffModel, sample_types
from .rng import child_rng

log = logging.getLogger(__name__)

DevpayFn = Callable[[np.ndarray], np.ndarray]

SHIFT = 1e-6
DEAD_TOL = 1e-6
DEDUP_TOL = 1e-3

DEAD = "dead"
NON_CONVERGENT = "non-convergent"
REJECTED = "rejected"
CONFIRMED = "confirmed"
STATUSES = (DEAD, NON_CONVERGENT, REJECTED, CONFIRMED)


def rd_starts(n_strategies: int) -> np.ndarray:
    """Uniform start plus one start per strategy with double weight on it, ``(n+1, n)``."""
    n = int(n_strategies)
    if n < 1:
        raise ValueError("need at least one strategy")
    starts = np.full((n + 1, n), 1.0 / (n + 1))
    starts[0] = 1.0 / n
    starts[np.arange(1, n + 1), np.arange(n)] = 2.0 / (n + 1)
    return starts


@dataclass
class RDResult:
    sigma: np.ndarray        # (M, S)
    iterations: np.ndarray   # (M,)
    converged: np.ndarray    # (M,) bool
    dead: np.ndarray         # (M,) bool


def replicator_dynamics(devpay: DevpayFn, start, max_iters: int = 10_000, tol: float = 1e-8,
                        shift: float = SHIFT, floor: Optional[float] = None) -> RDResult:
    """Discrete replicator dynamics run for a batch of starts at once.

    ``devpay`` maps ``(M, S)`` mixtures to ``(M, S)`` deviation payoffs. The
    update is ``sigma_j * (u_j - w)`` with ``w = min_j u_j - shift``, which
    moves most of the mass to the current best responses in one step. With
    ``floor`` set, ``w = min(min_j u_j, floor) - shift`` instead: for payoffs
    above ``floor`` this is the classical proportional update, which settles
    into interior equilibria that the default overshoots.

    Each row stops once its step is below ``tol`` in the max norm. A row whose
    payoff vector is numerically all zero is marked dead and frozen.
    """
    sig = np.array(start, dtype=np.float64, ndmin=2)
    if (sig <= 0).any():
        raise ValueError("replicator dynamics needs full-support starts")
    sig /= sig.sum(axis=1, keepdims=True)
    M = sig.shape[0]
    iters = np.zeros(M, dtype=np.int64)
    active = np.ones(M, dtype=bool)
    converged = np.zeros(M, dtype=bool)
    dead = np.zeros(M, dtype=bool)
    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        s = sig[idx]
        u = np.asarray(devpay(s), dtype=np.float64).reshape(s.shape)
        if not np.isfinite(u).all():
            raise NumericError(f"deviation payoffs not finite at {s[~np.isfinite(u).all(axis=1)][0]}")
        is_dead = np.abs(u).max(axis=1) < DEAD_TOL
        w = u.min(axis=1, keepdims=True)
        if floor is not None:
            w = np.minimum(w, floor)
        w = w - shift
        new = s * (u - w)
        new /= new.sum(axis=1, keepdims=True)
        step = np.abs(new - s).max(axis=1)
        sig[idx] = np.where(is_dead[:, None], s, new)
        iters[idx] += 1
        done = is_dead | (step < tol)
        dead[idx[is_dead]] = True
        converged[idx[~is_dead & (step < tol)]] = True
        active[idx[done]] = False
    return RDResult(sig, iters, converged, dead)


def mask_renormalize(sigma, threshold: float = 0.01) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    kept = np.where(sigma >= threshold, sigma, 0.0)
    total = kept.sum(axis=-1, keepdims=True)
    if (total <= 0).any():
        raise ValueError(f"every entry is below the {threshold} support threshold")
    return kept / total


@dataclass
class CandidateEquilibrium:
    sigma: np.ndarray
    r: float
    predicted_regret: float
    true_regret: Optional[float] = None
    status: str = NON_CONVERGENT
    starts: list[int] = field(default_factory=list)
    predicted_devpay: Optional[np.ndarray] = None
    true_devpay: Optional[np.ndarray] = None

    @property
    def basin(self) -> int:
        return len(self.starts)

    @property
    def regret_error(self) -> Optional[float]:
        return None if self.true_regret is None else abs(self.predicted_regret - self.true_regret)

    def to_dict(self) -> dict:
        opt = lambda a: None if a is None else [float(x) for x in a]
        return {
            "r": float(self.r), "sigma": opt(self.sigma), "status": self.status,
            "predicted_regret": float(self.predicted_regret),
            "true_regret": None if self.true_regret is None else float(self.true_regret),
            "basin": self.basin, "starts": list(self.starts),
            "predicted_devpay": opt(self.predicted_devpay), "true_devpay": opt(self.true_devpay),
        }


def classify(sigma, r: float, devpay: DevpayFn, oracle=None, eps: float = 0.01) -> CandidateEquilibrium:
    """Predicted-regret filter, then oracle confirmation for survivors.

    ``oracle`` needs a ``true_devpay(sigma, r)`` method. Without one, survivors
    get status ``"candidate"`` and no true regret.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    u = np.asarray(devpay(sigma[None, :]), dtype=np.float64)[0]
    pred = regret(sigma, u)
    cand = CandidateEquilibrium(sigma, float(r), max(pred, 0.0), predicted_devpay=u)
    if pred > eps:
        cand.status = NON_CONVERGENT
        return cand
    if oracle is None:
        cand.status = "candidate"
        return cand
    tu = oracle.true_devpay(sigma, r)
    cand.true_devpay = tu
    cand.true_regret = regret(sigma, tu)
    cand.status = CONFIRMED if cand.true_regret <= eps else REJECTED
    return cand


def dedup(points: Sequence[np.ndarray], tol: float = DEDUP_TOL) -> list[list[int]]:
    """Greedy grouping of points within ``tol`` (max norm) of a group's first member."""
    groups: list[list[int]] = []
    reps: list[np.ndarray] = []
    for i, p in enumerate(points):
        for g, rep in zip(groups, reps):
            if np.abs(p - rep).max() <= tol:
                g.append(i)
                break
        else:
            groups.append([i])
            reps.append(np.asarray(p))
    return groups


def model_devpay(model: PayoffModel, r: float, n_types: int = 1000, seed: int = 0) -> DevpayFn:
    """Batched deviation payoffs at ``r``; interim models average over fixed type draws."""
    if model.mode == "ex_ante":
        return model.marginal_fn(r)
    theta_max = (model.meta.get("config") or {}).get("theta_max", 25.0)
    types = sample_types(child_rng(seed, "types", round(float(r), 9)), n_types, theta_max)
    return model.marginal_fn(r, types)


def grid_test(model: PayoffModel, oracle, reserves, step: float = 0.1, support: int = 3,
              n_types: int = 1000, seed: int = 0) -> dict:
    """Model deviation payoffs against oracle values on a mixture x reserve grid.

    The grid holds every mixture with at most ``support`` strategies and
    probabilities on multiples of ``step``, at each reserve. Returns the MSE
    over all (mixture, reserve, strategy) entries, the variance of the oracle
    values, their ratio and the per-reserve MSE.
    """
    sig = simplex_grid(model.n_strategies, step, support)
    pred, true, per_r = [], [], []
    for r in reserves:
        u_hat = model_devpay(model, float(r), n_types, seed)(sig)
        u = np.array([oracle.true_devpay(s, float(r)) for s in sig])
        pred.append(u_hat)
        true.append(u)
        per_r.append(float(np.mean((u_hat - u) ** 2)))
    pred, true = np.concatenate(pred), np.concatenate(true)
    mse = float(np.mean((pred - true) ** 2))
    var = float(true.var())
    return {"mse": mse, "variance": var, "ratio": mse / var if var > 0 else float("inf"),
            "n_points": int(true.size), "reserves": [float(r) for r in reserves], "per_reserve_mse": per_r}


@dataclass
class SolveResult:
    r: float
    runs: list[dict]
    candidates: list[CandidateEquilibrium]
    rd: Optional[RDResult] = None

    def counts(self) -> dict:
        """Per-start status counts (dead starts included)."""
        out = {s: 0 for s in STATUSES}
        for run in self.runs:
            out[run["status"]] = out.get(run["status"], 0) + 1
        return out

    def passing(self) -> list[CandidateEquilibrium]:
        return [c for c in self.candidates if c.status in (CONFIRMED, REJECTED, "candidate")]

    def confirmed(self) -> list[CandidateEquilibrium]:
        return [c for c in self.candidates if c.status == CONFIRMED]

    def basin_winner(self, statuses=(CONFIRMED, "candidate")) -> Optional[CandidateEquilibrium]:
        pool = [c for c in self.candidates if c.status in statuses]
        return max(pool, key=lambda c: (c.basin, -min(c.starts))) if pool else None


def solve(devpay: DevpayFn, n_strategies: int, r: float, oracle=None, eps: float = 0.01,
          mask: float = 0.01, max_iters: int = 10_000, tol: float = 1e-8,
          rd: Optional[RDResult] = None) -> SolveResult:
    """RD from every start, mask, deduplicate, classify each distinct endpoint once.

    ``rd`` reuses the endpoints of an earlier run from the same starts.
    """
    starts = rd_starts(n_strategies)
    res = rd if rd is not None else replicator_dynamics(devpay, starts, max_iters, tol)
    runs: list[dict] = []
    live = np.flatnonzero(~res.dead)
    masked = mask_renormalize(res.sigma[live], mask) if live.size else np.zeros((0, n_strategies))
    groups = dedup(list(masked))
    candidates = []
    for g in groups:
        c = classify(masked[g[0]], r, devpay, oracle, eps)
        c.starts = [int(live[i]) for i in g]
        candidates.append(c)
    by_start = {s: c for c in candidates for s in c.starts}
    for k in range(starts.shape[0]):
        rec = {"r": float(r), "start": k, "iterations": int(res.iterations[k]),
               "converged": bool(res.converged[k])}
        if res.dead[k]:
            rec.update(status=DEAD, sigma=res.sigma[k].tolist(), predicted_regret=None, true_regret=None)
        else:
            c = by_start[k]
            rec.update(status=c.status, sigma=c.sigma.tolist(), predicted_regret=c.predicted_regret,
                       true_regret=c.true_regret)
        runs.append(rec)
    return SolveResult(float(r), runs, candidates, res)


def solve_model(model: PayoffModel, r: float, oracle=None, eps: float = 0.01, n_types: int = 1000,
                seed: int = 0, **kw) -> SolveResult:
    return solve(model_devpay(model, r, n_types, seed), model.n_strategies, r, oracle, eps, **kw)
