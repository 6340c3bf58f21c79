"""Atomic and piecewise-conditional bidding strategies.

An atomic strategy bids ``max(floor(theta) - offset, 0)`` in stage one and
optionally attempts a best-response update in stage two. A piecewise strategy
picks a strategy from the same set according to which interval of the
effective-bid statistic ``q * theta`` the player's own type falls in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np


class StrategyError(ValueError):
    """Malformed or inconsistent strategy-set description."""


@dataclass(frozen=True)
class AtomicStrategy:
    offset: int
    update: bool

    def __post_init__(self):
        if int(self.offset) != self.offset or self.offset < 0:
            raise StrategyError(f"offset must be a non-negative integer, got {self.offset!r}")

    @property
    def label(self) -> str:
        return f"off{self.offset}{'+br' if self.update else ''}"

    def to_dict(self) -> dict:
        return {"offset": int(self.offset), "update": bool(self.update)}


@dataclass(frozen=True)
class TypePartition:
    """Contiguous intervals ``[lo, hi)`` over ``q * theta``; the last is closed.

    ``cutoffs`` are the interior boundaries, so ``k = len(cutoffs) + 1``.
    """

    cutoffs: tuple[float, ...]
    upper: float = 25.0

    def __post_init__(self):
        c = tuple(float(x) for x in self.cutoffs)
        object.__setattr__(self, "cutoffs", c)
        edges = (0.0, *c, float(self.upper))
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise StrategyError(f"partition edges must be strictly increasing: {edges}")

    @property
    def k(self) -> int:
        return len(self.cutoffs) + 1

    @property
    def edges(self) -> tuple[float, ...]:
        return (0.0, *self.cutoffs, float(self.upper))

    def interval_of(self, stat) -> np.ndarray:
        """Interval index of each statistic value; values at a cutoff go right."""
        return np.searchsorted(np.asarray(self.cutoffs), np.asarray(stat, dtype=float), side="right")

    def to_dict(self) -> dict:
        return {"cutoffs": list(self.cutoffs), "upper": self.upper}


@dataclass(frozen=True)
class PiecewiseStrategy:
    partition: TypePartition
    assignment: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(a) for a in self.assignment))
        if len(self.assignment) != self.partition.k:
            raise StrategyError(
                f"assignment has {len(self.assignment)} entries for {self.partition.k} intervals"
            )

    @property
    def label(self) -> str:
        return "pw[" + ",".join(f"s{a}" for a in self.assignment) + "]"

    def choose(self, q, theta) -> np.ndarray:
        idx = self.partition.interval_of(np.asarray(q) * np.asarray(theta))
        return np.asarray(self.assignment)[idx]

    def to_dict(self) -> dict:
        return {"piecewise": {**self.partition.to_dict(), "assignment": list(self.assignment)}}


Strategy = Union[AtomicStrategy, PiecewiseStrategy]


class StrategySet:
    """Ordered strategy list; piecewise entries may only reference earlier ones."""

    def __init__(self, strategies: Sequence[Strategy]):
        self.strategies: tuple[Strategy, ...] = tuple(strategies)
        if not self.strategies:
            raise StrategyError("strategy set is empty")
        atomics = [s for s in self.strategies if isinstance(s, AtomicStrategy)]
        if len(set(atomics)) != len(atomics):
            raise StrategyError("duplicate atomic strategies")
        for k, s in enumerate(self.strategies):
            if isinstance(s, PiecewiseStrategy):
                bad = [a for a in s.assignment if not 0 <= a < k]
                if bad:
                    raise StrategyError(f"piecewise strategy {k} references invalid indices {bad}")
        n = len(self.strategies)
        self._offset = np.zeros(n, dtype=np.int64)
        self._update = np.zeros(n, dtype=bool)
        self._is_pw = np.zeros(n, dtype=bool)
        for k, s in enumerate(self.strategies):
            if isinstance(s, AtomicStrategy):
                self._offset[k], self._update[k] = s.offset, s.update
            else:
                self._is_pw[k] = True

    def __len__(self) -> int:
        return len(self.strategies)

    def __getitem__(self, k: int) -> Strategy:
        return self.strategies[k]

    def __iter__(self):
        return iter(self.strategies)

    def __eq__(self, other) -> bool:
        return isinstance(other, StrategySet) and self.strategies == other.strategies

    def __repr__(self) -> str:
        return f"StrategySet({', '.join(self.labels)})"

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.strategies]

    @property
    def n_piecewise(self) -> int:
        return int(self._is_pw.sum())

    def extended(self, strategy: Strategy) -> "StrategySet":
        return StrategySet([*self.strategies, strategy])

    def resolve(self, idx, q, theta) -> np.ndarray:
        """Atomic strategy index actually played for each (strategy, type) entry."""
        idx = np.array(idx, dtype=np.int64, copy=True)
        q = np.broadcast_to(q, idx.shape)
        theta = np.broadcast_to(theta, idx.shape)
        while True:
            pw = self._is_pw[idx]
            if not pw.any():
                return idx
            for k in np.unique(idx[pw]):
                m = idx == k
                idx[m] = self.strategies[k].choose(q[m], theta[m])

    def actions(self, idx, q, theta) -> tuple[np.ndarray, np.ndarray]:
        """Resolved ``(offsets, update flags)`` for strategy indices at given types."""
        atom = self.resolve(idx, q, theta)
        return self._offset[atom], self._update[atom]

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.strategies]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> "StrategySet":
        out: list[Strategy] = []
        for it in items:
            if "piecewise" in it:
                pw = it["piecewise"]
                part = TypePartition(tuple(pw["cutoffs"]), pw.get("upper", 25.0))
                out.append(PiecewiseStrategy(part, tuple(pw["assignment"])))
            else:
                out.append(AtomicStrategy(int(it["offset"]), bool(it["update"])))
        return cls(out)


def _grid(offsets, updates=(False, True)) -> StrategySet:
    return StrategySet([AtomicStrategy(o, u) for u in updates for o in offsets])


PRESETS = {
    "paper10": lambda: _grid((0, 2, 4, 6, 8)),
    "paper6": lambda: _grid((0, 4, 8)),
    # the non-updating half of paper6: three strategies, regime switch inside the training range
    "desk3": lambda: _grid((0, 4, 8), updates=(False,)),
}


def strategy_set_parse(descriptor) -> StrategySet:
    """Build a strategy set from a preset name, a JSON file path, or a list of dicts.

    Files hold either a list of entries or ``{"strategies": [...]}`` where each
    entry is ``{"offset": int, "update": bool}`` or
    ``{"piecewise": {"cutoffs": [...], "upper": 25, "assignment": [...]}}``.
    """
    if isinstance(descriptor, StrategySet):
        return descriptor
    if isinstance(descriptor, str) and descriptor in PRESETS:
        return PRESETS[descriptor]()
    if isinstance(descriptor, (str, Path)):
        path = Path(descriptor)
        if not path.exists():
            raise StrategyError(f"unknown preset or missing file: {descriptor}")
        descriptor = json.loads(path.read_text())
    if isinstance(descriptor, dict):
        descriptor = descriptor["strategies"]
    return StrategySet.from_list(descriptor)
