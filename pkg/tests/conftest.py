import numpy as np
import pytest

from gamefam.data import generate_dataset
from gamefam.game import AuctionGame, Oracle
from gamefam.learn import RegressorSpec, train
from gamefam.sim import DESK_CONFIG, AuctionConfig
from gamefam.strategies import PRESETS, AtomicStrategy, StrategySet


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_game():
    return AuctionGame(DESK_CONFIG, PRESETS["desk3"]())


@pytest.fixture(scope="session")
def tiny_game():
    # p=3, two strategies: cheap enough for exact cross-checks
    return AuctionGame(DESK_CONFIG, StrategySet([AtomicStrategy(0, False), AtomicStrategy(4, True)]))


@pytest.fixture(scope="session")
def default_game():
    return AuctionGame(AuctionConfig(), PRESETS["paper10"]())


@pytest.fixture(scope="session")
def small_dataset(desk_game):
    return generate_dataset(desk_game, 400, 5, (0.01, 4.0), seed=3)


@pytest.fixture(scope="session")
def small_interim_model(small_dataset):
    return train(small_dataset, RegressorSpec(hidden=(16,), epochs=30, seed=1))


@pytest.fixture(scope="session")
def desk_oracle(desk_game):
    return Oracle(desk_game, 4000, seed=9)


def hand_dataset_and_expectation():
    """Two pairs, two observations, p=3, two atomic strategies, worked out by hand.

    phi plays s1 on q*theta in [0, 5) and s0 on [5, 25].
    """
    from gamefam.data import Dataset
    from gamefam.strategies import PiecewiseStrategy, TypePartition

    strategies = StrategySet([AtomicStrategy(0, False), AtomicStrategy(4, False)])
    d = Dataset(
        form="interim",
        sigma=np.array([[0.5, 0.5], [1.0, 0.0]]),
        reserve=np.array([1.0, 2.0]),
        targets=np.array([[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]]),
        own_type=np.array([[[0.5, 20.0], [0.1, 10.0]], [[1.0, 3.0], [0.6, 15.0]]]),
        opp_types=np.array([
            [[[0.2, 10.0], [0.9, 10.0]], [[0.5, 4.0], [1.0, 12.0]]],
            [[[1.0, 7.0], [0.75, 20.0]], [[0.5, 6.0], [0.8, 10.0]]],
        ]),
        opp_strats=np.array([[[0, 1], [1, 1]], [[0, 0], [0, 0]]]),
        coins=np.zeros((2, 2, 3), dtype=bool),
        meta={"schema": 1, "m": 2, "o": 2, "strategies": strategies.to_list()},
    )
    phi = PiecewiseStrategy(TypePartition((5.0,)), (1, 0))
    # stats: pair0 own 10, 1; opp (2, 9), (2, 12); pair1 own 3, 9; opp (7, 15), (3, 8)
    # relabels: pair0 obs1 opp0; pair1 obs0 both, obs1 opp1
    expect = {
        "m": 4,
        "sigma": np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0], [0.25, 0.5, 0.25], [0.25, 0.0, 0.75]]),
        "phi_column": np.array([[1.0, 4.0], [6.0, 7.0], [1.0, 4.0], [6.0, 7.0]]),
        "opp_strats_new": np.array([[[0, 1], [2, 1]], [[2, 2], [0, 2]]]),
    }
    return d, phi, expect


@pytest.fixture
def hand_augmentation():
    return hand_dataset_and_expectation()


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """``record(n, ok, detail)`` stores one summary line per acceptance criterion."""
    def record(n: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
