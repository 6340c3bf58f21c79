"""Training sets of deviation-payoff observations and their piecewise augmentation.

A dataset holds ``m`` (mixture, reserve) pairs with ``o`` observations each.
Every observation keeps its full simulation context (deviator type, opponent
types and strategies, stage-two arrival coins) next to the payoff vector, so
new strategies built from existing ones can be folded in without simulating.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .game import AuctionGame, sample_observations
from .rng import child_rng
from .strategies import PiecewiseStrategy, StrategyError, StrategySet

SCHEMA_VERSION = 1
BLOCK = 1024  # pairs per derived random stream


class SchemaError(ValueError):
    """Dataset or model file with an unexpected layout or version."""


@dataclass
class TrainingExample:
    sigma: np.ndarray
    r: float
    deviator_type: Optional[np.ndarray]
    target: np.ndarray


@dataclass
class Dataset:
    """Interim form keeps per-observation context; ex ante form keeps pair averages."""

    form: str
    sigma: np.ndarray                     # (m, S)
    reserve: np.ndarray                   # (m,)
    targets: np.ndarray                   # interim (m, o, S); ex ante (m, S)
    own_type: Optional[np.ndarray] = None   # (m, o, 2)
    opp_types: Optional[np.ndarray] = None  # (m, o, p-1, 2)
    opp_strats: Optional[np.ndarray] = None  # (m, o, p-1)
    coins: Optional[np.ndarray] = None      # (m, o, p)
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def o(self) -> int:
        return int(self.targets.shape[1]) if self.form == "interim" else int(self.meta.get("o", 1))

    @property
    def n_strategies(self) -> int:
        return int(self.sigma.shape[1])

    def __len__(self) -> int:
        return self.m * self.targets.shape[1] if self.form == "interim" else self.m

    @property
    def strategies(self) -> StrategySet:
        return StrategySet.from_list(self.meta["strategies"])

    def examples(self) -> Iterator[TrainingExample]:
        for k in range(self.m):
            if self.form == "interim":
                for i in range(self.targets.shape[1]):
                    yield TrainingExample(self.sigma[k], float(self.reserve[k]),
                                          self.own_type[k, i], self.targets[k, i])
            else:
                yield TrainingExample(self.sigma[k], float(self.reserve[k]), None, self.targets[k])

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        pick = lambda a: None if a is None else a[rows]
        meta = {**self.meta, "m": int(rows.size)}
        return Dataset(self.form, self.sigma[rows], self.reserve[rows], self.targets[rows],
                       pick(self.own_type), pick(self.opp_types), pick(self.opp_strats),
                       pick(self.coins), meta)

    def split(self, val_frac: float = 0.1, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Train/validation split by pair, never by observation."""
        perm = np.random.default_rng(seed).permutation(self.m)
        n_val = max(1, int(round(val_frac * self.m))) if self.m > 1 else 0
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Model inputs and targets: ``[sigma, r]`` (+ ``[q, theta]`` for interim)."""
        if self.form == "interim":
            o = self.targets.shape[1]
            base = np.concatenate([self.sigma, self.reserve[:, None]], axis=1)
            x = np.concatenate([np.repeat(base, o, axis=0), self.own_type.reshape(-1, 2)], axis=1)
            return x, self.targets.reshape(-1, self.n_strategies)
        return np.concatenate([self.sigma, self.reserve[:, None]], axis=1), self.targets


def generate_dataset(game: AuctionGame, m: int, o: int, r_range=(0.01, 8.0), seed: int = 0) -> Dataset:
    """Interim dataset of ``m`` pairs (uniform simplex mixture, uniform reserve) x ``o`` observations."""
    if m < 1 or o < 1:
        raise ValueError("m and o must be positive")
    lo, hi = map(float, r_range)
    S, p = game.n_strategies, game.players
    parts = []
    for b, start in enumerate(range(0, m, BLOCK)):
        nb = min(BLOCK, m - start)
        rng = child_rng(seed, "pairs", b)
        sigma = rng.dirichlet(np.ones(S), size=nb)
        reserve = lo + (hi - lo) * rng.random(nb)
        obs = sample_observations(game, np.repeat(sigma, o, axis=0), np.repeat(reserve, o), nb * o, rng)
        parts.append((sigma, reserve, obs))
    cat = lambda key, shape: np.concatenate([pt[2][key] for pt in parts]).reshape(shape)
    return Dataset(
        form="interim",
        sigma=np.concatenate([pt[0] for pt in parts]),
        reserve=np.concatenate([pt[1] for pt in parts]),
        targets=cat("payoffs", (m, o, S)),
        own_type=cat("own_type", (m, o, 2)),
        opp_types=cat("opp_types", (m, o, p - 1, 2)),
        opp_strats=cat("opp_strats", (m, o, p - 1)),
        coins=cat("coins", (m, o, p)).astype(bool),
        meta={
            "schema": SCHEMA_VERSION, "m": m, "o": o, "r_range": [lo, hi], "seed": seed,
            "strategies": game.strategies.to_list(), "config": game.cfg.to_dict(),
            "queries": m * o * S,
        },
    )


def to_ex_ante(d: Dataset) -> Dataset:
    if d.form != "interim":
        raise ValueError("dataset is already in ex ante form")
    meta = {**d.meta, "o": int(d.targets.shape[1])}
    return Dataset("ex_ante", d.sigma.copy(), d.reserve.copy(), d.targets.mean(axis=1), meta=meta)


def augment_with_piecewise(d: Dataset, phi: PiecewiseStrategy) -> Dataset:
    """Extend an interim dataset to the strategy set with ``phi`` appended.

    Existing pairs gain a zero mixture entry and a payoff column for ``phi``
    read off the deviator's own type. Each pair whose opponents can be read as
    playing ``phi`` (strategy equal to ``phi`` at their own type) also yields a
    new pair whose mixture is the empirical strategy distribution over all its
    relabelled opponents.
    """
    if d.form != "interim":
        raise ValueError("piecewise augmentation needs the interim form")
    S = d.n_strategies
    if any(not 0 <= a < S for a in phi.assignment):
        raise StrategyError(f"phi assignment {phi.assignment} outside the {S}-strategy set")
    m, o = d.targets.shape[:2]
    own_choice = phi.choose(d.own_type[..., 0], d.own_type[..., 1])              # (m, o)
    phi_col = np.take_along_axis(d.targets, own_choice[..., None], axis=2)   # (m, o, 1)
    targets = np.concatenate([d.targets, phi_col], axis=2)
    sigma = np.concatenate([d.sigma, np.zeros((m, 1))], axis=1)

    opp_choice = phi.choose(d.opp_types[..., 0], d.opp_types[..., 1])          # (m, o, p-1)
    relabel = d.opp_strats == opp_choice
    new_pairs = np.flatnonzero(relabel.any(axis=(1, 2)))
    opp_new = np.where(relabel, S, d.opp_strats)[new_pairs]
    counts = np.stack([(opp_new == j).sum(axis=(1, 2)) for j in range(S + 1)], axis=1)
    sigma_new = counts / float(o * d.opp_strats.shape[2])

    strategies = d.strategies.extended(phi)
    meta = {
        **d.meta,
        "m": int(m + new_pairs.size),
        "strategies": strategies.to_list(),
        "augmentations": [*d.meta.get("augmentations", []),
                          {"new_pairs": int(new_pairs.size), "from_pairs": int(m)}],
    }
    take = lambda a: np.concatenate([a, a[new_pairs]])
    return Dataset(
        form="interim",
        sigma=np.concatenate([sigma, sigma_new]),
        reserve=take(d.reserve),
        targets=take(targets),
        own_type=take(d.own_type),
        opp_types=take(d.opp_types),
        opp_strats=np.concatenate([d.opp_strats, opp_new]),
        coins=take(d.coins),
        meta=meta,
    )


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_dataset(d: Dataset, path) -> None:
    """JSON lines, one record per pair, plus a ``<path>.meta.json`` sidecar."""
    path = Path(path)
    with open(path, "w") as fh:
        for k in range(d.m):
            rec = {"schema": SCHEMA_VERSION, "sigma": d.sigma[k].tolist(), "r": float(d.reserve[k])}
            if d.form == "interim":
                rec["obs"] = [
                    {"t": d.own_type[k, i].tolist(), "opp_t": d.opp_types[k, i].tolist(),
                     "opp_s": d.opp_strats[k, i].tolist(), "coins": d.coins[k, i].astype(int).tolist(),
                     "u": d.targets[k, i].tolist()}
                    for i in range(d.targets.shape[1])
                ]
            else:
                rec["u"] = d.targets[k].tolist()
            fh.write(json.dumps(rec) + "\n")
    meta = {**d.meta, "schema": SCHEMA_VERSION, "form": d.form}
    _meta_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    mp = _meta_path(path)
    if not path.exists() or not mp.exists():
        raise FileNotFoundError(f"dataset {path} or its sidecar {mp.name} is missing")
    meta = json.loads(mp.read_text())
    if meta.get("schema") != SCHEMA_VERSION:
        raise SchemaError(f"dataset schema {meta.get('schema')} != {SCHEMA_VERSION}")
    form = meta.pop("form")
    recs = [json.loads(line) for line in path.read_text().splitlines() if line]
    if any(r.get("schema") != SCHEMA_VERSION for r in recs):
        raise SchemaError("record schema version mismatch")
    sigma = np.array([r["sigma"] for r in recs], dtype=np.float64)
    reserve = np.array([r["r"] for r in recs], dtype=np.float64)
    if form == "ex_ante":
        return Dataset(form, sigma, reserve, np.array([r["u"] for r in recs], dtype=np.float64), meta=meta)
    obs = [r["obs"] for r in recs]
    arr = lambda key, dt: np.array([[ob[key] for ob in row] for row in obs], dtype=dt)
    return Dataset(form, sigma, reserve, arr("u", np.float64), arr("t", np.float64),
                   arr("opp_t", np.float64), arr("opp_s", np.int64), arr("coins", bool), meta)
