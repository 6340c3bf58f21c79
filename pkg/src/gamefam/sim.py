"""Two-stage dynamic sponsored-search auction.

Scalar, readable reference versions of the auction mechanics live here. Bulk
simulation goes through :func:`gamefam.kernel.simulate_batch`, which is tested
against these functions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .strategies import AtomicStrategy, StrategySet


class ConfigError(ValueError):
    """Invalid auction configuration."""


@dataclass(frozen=True)
class TypeDraw:
    quality: float
    valuation: float

    @property
    def effective_cap(self) -> float:
        return self.quality * self.valuation


def _default_ctr() -> tuple[float, ...]:
    return tuple(0.7**k for k in range(4))


@dataclass(frozen=True)
class AuctionConfig:
    players: int = 5
    ctr: tuple[float, ...] = field(default_factory=_default_ctr)
    update_success_prob: float = 0.5
    theta_max: float = 25.0
    slots: Optional[int] = None

    def __post_init__(self):
        ctr = tuple(float(c) for c in self.ctr)
        object.__setattr__(self, "ctr", ctr)
        if self.slots is None:
            object.__setattr__(self, "slots", len(ctr))
        if self.slots != len(ctr):
            raise ConfigError(f"slots={self.slots} but ctr has {len(ctr)} entries")
        if self.players < 1:
            raise ConfigError("players must be positive")
        if not 1 <= self.slots <= self.players:
            raise ConfigError(f"need 1 <= slots <= players, got slots={self.slots}")
        if any(c <= 0 for c in ctr) or any(b > a for a, b in zip(ctr, ctr[1:])):
            raise ConfigError(f"ctr must be positive and non-increasing: {ctr}")
        if not 0.0 <= self.update_success_prob <= 1.0:
            raise ConfigError("update_success_prob must lie in [0, 1]")
        if self.theta_max <= 0:
            raise ConfigError("theta_max must be positive")

    @property
    def ctr_array(self) -> np.ndarray:
        return np.asarray(self.ctr, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ctr"] = list(self.ctr)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AuctionConfig":
        known = {"players", "slots", "ctr", "update_success_prob", "theta_max"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kw = dict(d)
        if "ctr" in kw:
            kw["ctr"] = tuple(kw["ctr"])
        elif "slots" in kw:
            kw["ctr"] = tuple(0.7**k for k in range(int(kw["slots"])))
        return cls(**kw)


def load_config(path) -> AuctionConfig:
    """Read a JSON object or ``key = value`` lines (values parsed as JSON)."""
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError:
        d = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected key = value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            try:
                d[k] = json.loads(v)
            except json.JSONDecodeError:
                d[k] = [float(x) for x in v.split(",")] if "," in v else v
    if not isinstance(d, dict):
        raise ConfigError("config must be a key-value mapping")
    return AuctionConfig.from_dict(d)


@dataclass
class AuctionOutcome:
    slot: list[Optional[int]]
    price: list[float]
    payoff: list[float]
    revenue: float
    bids: list[int]


def sample_setting(rng: np.random.Generator, p: int, theta_max: float = 25.0) -> list[TypeDraw]:
    q = rng.random(p)
    theta = rng.random(p) * theta_max
    return [TypeDraw(float(a), float(b)) for a, b in zip(q, theta)]


def initial_bid(s: AtomicStrategy, t: TypeDraw) -> int:
    return max(math.floor(t.valuation) - s.offset, 0)


def allocate_and_price(bids: Sequence[int], types: Sequence[TypeDraw], cfg: AuctionConfig,
                       reserve: float) -> AuctionOutcome:
    if len(cfg.ctr) != cfg.slots:
        raise ConfigError("ctr/slot mismatch")
    p = len(bids)
    eff = [types[i].quality * bids[i] for i in range(p)]
    part = [i for i in range(p) if types[i].quality > 0 and eff[i] >= reserve]
    part.sort(key=lambda i: (-eff[i], i))
    slot: list[Optional[int]] = [None] * p
    price = [0.0] * p
    payoff = [0.0] * p
    revenue = 0.0
    for k, i in enumerate(part[: cfg.slots]):
        nxt = eff[part[k + 1]] if k + 1 < len(part) else reserve
        price[i] = max(nxt, reserve) / types[i].quality
        slot[i] = k
        payoff[i] = cfg.ctr[k] * (types[i].valuation - price[i])
        revenue += cfg.ctr[k] * price[i]
    return AuctionOutcome(slot, price, payoff, revenue, list(bids))


def best_response_bid(i: int, bids: Sequence[int], types: Sequence[TypeDraw],
                      cfg: AuctionConfig, reserve: float) -> int:
    """Smallest bid in ``[0, floor(theta_i)]`` maximizing i's utility, others fixed."""
    best_b, best_u = 0, -math.inf
    trial = list(bids)
    for b in range(max(math.floor(types[i].valuation), 0) + 1):
        trial[i] = b
        u = allocate_and_price(trial, types, cfg, reserve).payoff[i]
        if u > best_u:
            best_b, best_u = b, u
    return best_b


def play_auction(profile: Sequence[int], setting: Sequence[TypeDraw], cfg: AuctionConfig,
                 strategies: StrategySet, reserve: float, rng: np.random.Generator,
                 coins: Optional[Sequence[bool]] = None) -> AuctionOutcome:
    """One two-stage auction with per-player strategy indices.

    ``coins`` fixes which stage-two updates arrive in time; drawn from ``rng``
    with probability ``cfg.update_success_prob`` when omitted.
    """
    p = len(profile)
    q = np.array([t.quality for t in setting])
    th = np.array([t.valuation for t in setting])
    offsets, updates = strategies.actions(np.asarray(profile), q, th)
    atoms = [AtomicStrategy(int(o), bool(u)) for o, u in zip(offsets, updates)]
    if coins is None:
        coins = rng.random(p) < cfg.update_success_prob
    bid0 = [initial_bid(s, t) for s, t in zip(atoms, setting)]
    final = list(bid0)
    for i in range(p):
        if atoms[i].update and coins[i]:
            final[i] = best_response_bid(i, bid0, setting, cfg, reserve)
    return allocate_and_price(final, setting, cfg, reserve)


# three bidders, two slots: the small family used for fast end-to-end runs
DESK_CONFIG = AuctionConfig(players=3, ctr=(1.0, 0.7))
