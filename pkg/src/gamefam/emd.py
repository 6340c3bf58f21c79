"""Reserve-price optimization over a learned game-family model.

Instances are evaluated in two modes. ``search`` keeps every RD endpoint with
small predicted regret and prices it with sampled pure profiles. ``final``
keeps only oracle-confirmed endpoints and prices them exactly. Local search
runs in search mode and re-confirms its best point in final mode.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernel
from .data import Dataset, augment_with_piecewise
from .game import AuctionGame, Oracle, check_mixture, regret, simplex_grid
from .learn import PayoffModel, RegressorSpec, train_ensemble
from .nash import CONFIRMED, CandidateEquilibrium, model_devpay, solve
from .piecewise import (build_equiprobable_partition, percentage_increase,
                        piecewise_best_response)
from .rng import as_rng, child_rng

log = logging.getLogger(__name__)

LATTICE = 0.05
TIE_TOL = 0.005
HOLE_SPLIT = 8.0


def revenue_for_mixture(oracle: Oracle, sigma, r: float, n_pure: int = 100, rng=None,
                        exact: bool = False) -> tuple[float, int]:
    """Equilibrium revenue of ``sigma`` and the number of pure profiles it averaged.

    Exact mode weights every full profile by its multinomial probability.
    Search mode samples ``n_pure`` profiles; each profile's revenue comes from
    the oracle's cached simulations.
    """
    sigma = check_mixture(sigma, oracle.game.n_strategies)
    if exact:
        return oracle.expected_revenue(sigma, r), -1
    rng = as_rng(rng)
    draws = rng.choice(sigma.shape[0], size=(n_pure, oracle.game.players), p=sigma)
    counts = np.stack([(draws == j).sum(axis=1) for j in range(sigma.shape[0])], axis=1)
    uniq, mult = np.unique(counts, axis=0, return_counts=True)
    total = sum(m * oracle.profile_revenue(c, r)[0] for c, m in zip(uniq, mult))
    return float(total / n_pure), int(n_pure)


@dataclass
class InstanceEvaluation:
    r: float
    mode: str
    candidates: list[CandidateEquilibrium]
    revenue: Optional[float]
    revenues: list[float] = field(default_factory=list)
    n_revenue_samples: int = 0
    counts: dict = field(default_factory=dict)

    @property
    def hole(self) -> bool:
        return self.revenue is None

    def kept(self) -> list[CandidateEquilibrium]:
        want = (CONFIRMED,) if self.mode == "final" else ("candidate", CONFIRMED)
        return [c for c in self.candidates if c.status in want]

    def basin_winner(self) -> Optional[CandidateEquilibrium]:
        return select_equilibrium(self, "basin")

    def to_dict(self) -> dict:
        return {"r": self.r, "mode": self.mode, "revenue": self.revenue, "hole": self.hole,
                "revenues": self.revenues, "n_revenue_samples": self.n_revenue_samples,
                "counts": self.counts, "candidates": [c.to_dict() for c in self.candidates]}


def _entropy(sigma) -> float:
    s = np.asarray(sigma)
    s = s[s > 0]
    return float(-(s * np.log(s)).sum())


# equilibrium selectors over an instance's kept candidates
SELECTORS = {
    "basin": lambda pool: max(pool, key=lambda c: (c.basin, -min(c.starts))),
    "first": lambda pool: min(pool, key=lambda c: min(c.starts)),
    "max-entropy": lambda pool: max(pool, key=lambda c: (_entropy(c.sigma), -min(c.starts))),
}


def select_equilibrium(ev: InstanceEvaluation, selector: str = "basin") -> Optional[CandidateEquilibrium]:
    if selector not in SELECTORS:
        raise ValueError(f"unknown selector {selector!r}")
    pool = ev.kept()
    return SELECTORS[selector](pool) if pool else None


def grid_equilibria_revenue(oracle: Oracle, r: float, eps: float = 0.01, step: float = 0.1,
                            support: int = 3) -> dict:
    """Oracle revenue over every grid mixture that is an eps-equilibrium.

    ``uniform`` averages over all equilibria found. ``weighted`` first averages
    within each ``support``-strategy subset (over equilibria whose support it
    contains) and then across the subsets that hold at least one.
    """
    S = oracle.game.n_strategies
    grid = simplex_grid(S, step, support)
    eq = [s for s in grid if oracle.true_regret(s, r) <= eps]
    revs = [oracle.expected_revenue(s, r) for s in eq]
    per_subset = []
    for Y in itertools.combinations(range(S), min(support, S)):
        inside = [v for s, v in zip(eq, revs) if set(np.flatnonzero(s)) <= set(Y)]
        if inside:
            per_subset.append(float(np.mean(inside)))
    return {"r": float(r), "n_grid": int(len(grid)), "n_equilibria": len(eq),
            "equilibria": [s.tolist() for s in eq],
            "uniform": float(np.mean(revs)) if revs else None,
            "weighted": float(np.mean(per_subset)) if per_subset else None}


def _key(r: float) -> float:
    return round(float(r), 9)


class Evaluator:
    """Cached per-instance evaluation; each result depends only on ``r`` and ``seed``.

    Evaluators made by :meth:`with_mode` share RD endpoints, which do not depend on the mode.
    """

    def __init__(self, model: PayoffModel, oracle: Oracle, mode: str = "final", eps: float = 0.01,
                 n_types: int = 1000, n_pure: int = 100, seed: int = 0, _rd: Optional[dict] = None):
        if mode not in ("search", "final"):
            raise ValueError(f"unknown evaluation mode {mode!r}")
        if model.n_strategies != oracle.game.n_strategies:
            raise ValueError("model and oracle strategy sets differ")
        self.model, self.oracle, self.mode = model, oracle, mode
        self.eps, self.n_types, self.n_pure, self.seed = eps, n_types, n_pure, seed
        self.cache: dict[float, InstanceEvaluation] = {}
        self._rd = {} if _rd is None else _rd

    def __call__(self, r: float) -> InstanceEvaluation:
        k = _key(r)
        hit = self.cache.get(k)
        if hit is None:
            hit = self.cache[k] = self._evaluate(k)
        return hit

    @property
    def n_evaluated(self) -> int:
        return len(self.cache)

    def with_mode(self, mode: str) -> "Evaluator":
        return Evaluator(self.model, self.oracle, mode, self.eps, self.n_types, self.n_pure, self.seed, self._rd)

    def _evaluate(self, r: float) -> InstanceEvaluation:
        final = self.mode == "final"
        devpay = model_devpay(self.model, r, self.n_types, self.seed)
        res = solve(devpay, self.model.n_strategies, r, self.oracle if final else None, self.eps, rd=self._rd.get(r))
        self._rd[r] = res.rd
        ev = InstanceEvaluation(r, self.mode, res.candidates, None, counts=res.counts())
        kept = ev.kept()
        if kept:
            rng = child_rng(self.seed, "revenue-sample", r)
            revs = [revenue_for_mixture(self.oracle, c.sigma, r, self.n_pure, rng, exact=final) for c in kept]
            ev.revenues = [v for v, _ in revs]
            ev.n_revenue_samples = sum(max(n, 0) for _, n in revs)
            ev.revenue = float(np.mean(ev.revenues))
        return ev


def evaluate_instance(model: PayoffModel, oracle: Oracle, r: float, eps: float = 0.01,
                      mode: str = "final", seed: int = 0, n_types: int = 1000) -> InstanceEvaluation:
    return Evaluator(model, oracle, mode, eps, n_types, seed=seed)(r)


def default_grid(lo: float = 0.05, hi: float = 15.0, step: float = LATTICE) -> np.ndarray:
    n = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(n), 9)


@dataclass
class GridResult:
    curve: list[InstanceEvaluation]
    best_r: Optional[float]
    best_revenue: Optional[float]
    plateau: list[float]

    def holes(self, split: float = HOLE_SPLIT) -> dict:
        low = sum(1 for ev in self.curve if ev.hole and ev.r <= split)
        return {"low": low, "high": sum(1 for ev in self.curve if ev.hole) - low, "split": split}

    def rows(self) -> list[dict]:
        return [{"r": ev.r, "revenue": ev.revenue, "hole": int(ev.hole),
                 "n_candidates": len(ev.kept())} for ev in self.curve]

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["r", "revenue", "hole", "n_candidates"])
            w.writeheader()
            for row in self.rows():
                w.writerow({**row, "r": repr(row["r"]),
                            "revenue": "" if row["revenue"] is None else repr(row["revenue"])})


def grid_optimize(evaluator: Callable[[float], InstanceEvaluation], r_grid: Sequence[float],
                  tie_tol: float = TIE_TOL) -> GridResult:
    if len(r_grid) == 0:
        raise ValueError("empty reserve grid")
    curve = [evaluator(float(r)) for r in r_grid]
    vals = [ev.revenue for ev in curve if not ev.hole]
    if not vals:
        return GridResult(curve, None, None, [])
    best = max(vals)
    best_ev = next(ev for ev in curve if ev.revenue == best)
    plateau = [ev.r for ev in curve if not ev.hole and ev.revenue >= best - tie_tol * abs(best)]
    return GridResult(curve, best_ev.r, best, plateau)


@dataclass
class SearchConfig:
    offsets: tuple[float, ...] = (0.05, 0.1, 0.25)
    max_iters: int = 50
    restarts: int = 5
    bounds: tuple[float, float] = (0.05, 8.0)
    temp_frac: float = 0.1
    decay: float = 0.9
    n_pilots: int = 5
    restart_dist: str = "uniform"       # or "bell"
    bell_center: float = 4.0
    bell_width: float = 1.5
    lattice: float = LATTICE

    def __post_init__(self):
        self.offsets = tuple(float(o) for o in self.offsets)
        if any(o == 0 for o in self.offsets):
            raise ValueError("neighbor offsets must be nonzero")
        if self.max_iters < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be >= 1")
        if not self.bounds[0] < self.bounds[1]:
            raise ValueError("empty search bounds")
        if self.restart_dist not in ("uniform", "bell"):
            raise ValueError(f"unknown restart distribution {self.restart_dist!r}")

    def snap(self, r: float) -> float:
        lo, hi = self.bounds
        return _key(min(max(round(r / self.lattice) * self.lattice, lo), hi))

    def neighbors(self, r: float) -> list[float]:
        out = []
        for o in self.offsets:
            for sgn in (-1.0, 1.0):
                n = self.snap(r + sgn * o)
                if n != _key(r) and n not in out:
                    out.append(n)
        return out

    def draw_start(self, rng) -> float:
        lo, hi = self.bounds
        if self.restart_dist == "uniform":
            return self.snap(rng.uniform(lo, hi))
        while True:
            x = rng.normal(self.bell_center, self.bell_width)
            if lo <= x <= hi:
                return self.snap(x)


def _val(ev: InstanceEvaluation) -> float:
    return -math.inf if ev.hole else ev.revenue


@dataclass
class SearchResult:
    algo: str
    r0: float
    path: list[float]
    visited: list[float]
    search_best_r: Optional[float]
    best_r: Optional[float]
    best_revenue: Optional[float]
    final: Optional[InstanceEvaluation]
    iterations: int

    def to_dict(self) -> dict:
        return {"algo": self.algo, "r0": self.r0, "path": self.path, "visited": self.visited,
                "n_evaluated": len(self.visited), "search_best_r": self.search_best_r,
                "best_r": self.best_r, "best_revenue": self.best_revenue, "iterations": self.iterations}


def _finish(algo, r0, path, visited, search, final, iters) -> SearchResult:
    """Re-confirm history points in final mode, best search revenue first, until one has revenue."""
    ranked = sorted((r for r in visited if not search(r).hole), key=lambda r: (-search(r).revenue, r))
    sb = ranked[0] if ranked else None
    for r in ranked:
        ev = final(r)
        if not ev.hole:
            return SearchResult(algo, r0, path, visited, sb, r, ev.revenue, ev, iters)
    return SearchResult(algo, r0, path, visited, sb, None, None, None, iters)


def hill_climb(search: Callable, final: Callable, r0: float, cfg: SearchConfig, rng) -> SearchResult:
    """Stochastic hill climbing: move to an uphill neighbor with probability proportional to its gain."""
    cur = cfg.snap(r0)
    visited = [cur]
    path = [cur]
    it = 0
    for it in range(1, cfg.max_iters + 1):
        base = _val(search(cur))
        gains = []
        for n in cfg.neighbors(cur):
            if n not in visited:
                visited.append(n)
            v = _val(search(n))
            if v > base:
                gains.append((n, v - base))
        if not gains:
            break
        g = np.array([x for _, x in gains])
        inf = np.isinf(g)    # leaving a hole: every non-hole neighbor is equally good
        p = inf / inf.sum() if inf.any() else g / g.sum()
        cur = gains[int(rng.choice(len(gains), p=p))][0]
        path.append(cur)
    return _finish("hc", cfg.snap(r0), path, visited, search, final, it)


def simulated_annealing(search: Callable, final: Callable, r0: float, cfg: SearchConfig, rng,
                        temp0: Optional[float] = None) -> SearchResult:
    """Random-neighbor proposals, Metropolis acceptance, geometric cooling."""
    cur = cfg.snap(r0)
    visited = [cur]
    if temp0 is None:
        pilots = [cur, *cfg.neighbors(cur)][: cfg.n_pilots]
        for r in pilots:
            if r not in visited:
                visited.append(r)
        vals = [search(r).revenue for r in pilots if not search(r).hole]
        # spread, not level: adding a constant to every revenue should not change the walk
        scale = float(np.ptp(vals)) if len(vals) > 1 else 0.0
        temp0 = cfg.temp_frac * scale
    temp = temp0
    path = [cur]
    for it in range(1, cfg.max_iters + 1):
        nbrs = cfg.neighbors(cur)
        prop = nbrs[int(rng.integers(len(nbrs)))]
        if prop not in visited:
            visited.append(prop)
        a, b = _val(search(cur)), _val(search(prop))
        if b >= a or (math.isinf(a) and a < 0):
            accept = True
        elif math.isinf(b) or temp <= 0:
            accept = False
        else:
            accept = rng.random() < math.exp((b - a) / temp)
        if accept:
            cur = prop
            path.append(cur)
        temp *= cfg.decay
    return _finish("sa", cfg.snap(r0), path, visited, search, final, cfg.max_iters)


ALGOS = {"hc": hill_climb, "sa": simulated_annealing}


def run_restarts(algo: str, search: Callable, final: Callable, cfg: SearchConfig, seed: int = 0,
                 tag: str = "") -> list[SearchResult]:
    """``cfg.restarts`` independent runs, restart ``i`` on stream ``(seed, algo, tag, i)``."""
    out = []
    for i in range(cfg.restarts):
        rng = child_rng(seed, "restart", algo, tag, i)
        out.append(ALGOS[algo](search, final, cfg.draw_start(rng), cfg, rng))
    return out


def bundle_summary(results: Sequence[SearchResult]) -> dict:
    """Best final revenue over a restart bundle and the distinct instances it touched."""
    found = [r for r in results if r.best_revenue is not None]
    best = max(found, key=lambda r: r.best_revenue) if found else None
    distinct = sorted({v for r in results for v in r.visited})
    return {"best_r": None if best is None else best.best_r,
            "best_revenue": None if best is None else best.best_revenue,
            "n_distinct": len(distinct), "distinct": distinct}


# -- iterative strategy expansion ---------------------------------------------------------------

@dataclass
class IterateConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    expanded_restart_dist: str = "bell"
    algos: tuple[str, ...] = ("hc", "sa")
    eps: float = 0.01
    k: int = 5
    n_partition_samples: int = 1_000_000
    n_phi_samples: int = 100_000
    n_types: int = 1000
    spec: RegressorSpec = field(default_factory=RegressorSpec)
    search_new: bool = True
    selector: str = "basin"
    ensemble: int = 1


def _search_game(model, oracle, cfg: IterateConfig, scfg: SearchConfig, seed, tag):
    search = Evaluator(model, oracle, "search", cfg.eps, cfg.n_types, seed=seed)
    final = search.with_mode("final")
    runs = [res for algo in cfg.algos for res in run_restarts(algo, search, final, scfg, seed, tag)]
    found = [r for r in runs if r.best_revenue is not None]
    best = max(found, key=lambda r: (r.best_revenue, -r.best_r)) if found else None
    return runs, best, final


def _eq_record(label, sigma, r, model: PayoffModel, oracle: Oracle, cfg: IterateConfig, seed) -> dict:
    u_hat = model_devpay(model, r, cfg.n_types, seed)(np.asarray(sigma)[None])[0]
    u = oracle.true_devpay(sigma, r)
    pred, true = regret(sigma, u_hat), regret(sigma, u)
    return {"label": label, "r": float(r), "sigma": [float(x) for x in sigma],
            "predicted_regret": pred, "true_regret": true, "abs_error": abs(pred - true),
            "expected_revenue": oracle.expected_revenue(sigma, r)}


def iterate_emd(game: AuctionGame, data: Dataset, model: PayoffModel, rounds: int = 1,
                cfg: IterateConfig = IterateConfig(), oracle_settings: int = 10_000,
                seed: int = 0) -> list[dict]:
    """Search, read off a piecewise best response at the optimum, augment, retrain, re-check.

    Each round's report lists the chosen reserve and equilibrium, the new
    strategy, the simulator queries spent on new training targets (always 0),
    and the regret of old and new equilibria in the expanded game.
    """
    if model.mode != "interim" or data.form != "interim":
        raise ValueError("strategy expansion needs an interim model and dataset")
    reports = []
    for rnd in range(rounds):
        oracle = Oracle(game, oracle_settings, seed)
        scfg = cfg.search if rnd == 0 else dataclasses.replace(cfg.search, restart_dist=cfg.expanded_restart_dist)
        runs, best, final = _search_game(model, oracle, cfg, scfg, seed, f"round{rnd}")
        rep = {"round": rnd, "n_strategies": game.n_strategies, "strategies": game.strategies.to_list(),
               "searches": [r.to_dict() for r in runs]}
        if best is None:
            rep["status"] = "aborted: no confirmed equilibrium at any evaluated reserve"
            reports.append(rep)
            log.warning("round %d aborted", rnd)
            break
        r_star = best.best_r
        eq = select_equilibrium(best.final, cfg.selector)
        partition = build_equiprobable_partition(cfg.k, cfg.n_partition_samples,
                                                 child_rng(seed, "partition", rnd), game.cfg.theta_max)
        pw = piecewise_best_response(model, eq.sigma, r_star, partition, cfg.n_phi_samples,
                                     child_rng(seed, "phi", rnd))
        phi = pw["phi"]
        before = kernel.query_count()
        data2 = augment_with_piecewise(data, phi)
        spent = kernel.query_count() - before
        model2 = train_ensemble(data2, cfg.spec, cfg.ensemble)
        game2 = game.with_strategy(phi)
        oracle2 = Oracle(game2, oracle_settings, seed)
        sig_prev = np.append(eq.sigma, 0.0)
        true_ext = oracle2.true_devpay(sig_prev, r_star)
        rep.update({
            "status": "ok", "r_star": r_star, "revenue": best.best_revenue,
            "equilibrium": eq.to_dict(),
            "phi": phi.to_dict(), "phi_label": phi.label,
            "partition": partition.to_dict(),
            "predicted_phi_payoff": pw["predicted_payoff"],
            "predicted_atomic_best": pw["atomic_best_payoff"],
            "predicted_gain_pct": percentage_increase(pw["predicted_payoff"], pw["atomic_best_payoff"]),
            "true_phi_payoff": float(true_ext[-1]),
            "true_atomic_best": float(true_ext[:-1].max()),
            "true_gain_pct": percentage_increase(float(true_ext[-1]), float(true_ext[:-1].max())),
            "dataset": {"pairs_before": data.m, "pairs_after": data2.m,
                        "new_pairs": data2.m - data.m, "simulator_queries": spent},
            "model": {k: model2.meta[k] for k in ("best_epoch", "train_mse", "val_mse")},
            "prior_in_expanded": _eq_record("prior", sig_prev, r_star, model2, oracle2, cfg, seed),
        })
        if cfg.search_new:
            runs2, best2, _ = _search_game(model2, oracle2, cfg, dataclasses.replace(
                cfg.search, restart_dist=cfg.expanded_restart_dist), seed, f"round{rnd}-new")
            rep["new_searches"] = [r.to_dict() for r in runs2]
            if best2 is not None:
                eq2 = select_equilibrium(best2.final, cfg.selector)
                rep["new_r_star"] = best2.best_r
                rep["new_revenue"] = best2.best_revenue
                rep["new_at_new_r"] = _eq_record("new", eq2.sigma, best2.best_r, model2, oracle2, cfg, seed)
                rep["new_at_prior_r"] = _eq_record("new@prior", eq2.sigma, r_star, model2, oracle2, cfg, seed)
        errs = [rep[k]["abs_error"] for k in ("prior_in_expanded", "new_at_new_r", "new_at_prior_r") if k in rep]
        rep["regret_mae"] = float(np.mean(errs))
        reports.append(rep)
        game, data, model = game2, data2, model2
    return reports


ROUND_SCHEMA = {
    "round": int, "n_strategies": int, "status": str, "r_star": float, "revenue": float,
    "equilibrium": dict, "phi": dict, "predicted_gain_pct": (float, type(None)),
    "true_gain_pct": (float, type(None)), "dataset": dict, "prior_in_expanded": dict,
    "regret_mae": float,
}
EQ_SCHEMA = {"r": float, "sigma": list, "predicted_regret": float, "true_regret": float,
             "abs_error": float, "expected_revenue": float}


def validate_round_report(rep: dict) -> list[str]:
    """Problems with a completed round report (empty when valid)."""
    errs = []
    for k, t in ROUND_SCHEMA.items():
        if k not in rep:
            errs.append(f"missing {k}")
        elif not isinstance(rep[k], t):
            errs.append(f"{k} has type {type(rep[k]).__name__}")
    for k in ("prior_in_expanded", "new_at_new_r", "new_at_prior_r"):
        if k in rep:
            for f, t in EQ_SCHEMA.items():
                if not isinstance(rep[k].get(f), t):
                    errs.append(f"{k}.{f} missing or mistyped")
    if rep.get("dataset", {}).get("simulator_queries") != 0:
        errs.append("augmentation spent simulator queries")
    return errs
