import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gamefam.game import (REGRET_CLAMP, AuctionGame, Oracle, counts_to_seats, enumerate_opponent_profiles,
                          monte_carlo_devpay, multinomial_prob, oracle_profile_devpay, oracle_profile_stats,
                          oracle_rows, regret, sample_observation, sample_observations,
                          write_oracle_csv)
from gamefam.sim import AuctionConfig, TypeDraw, play_auction
from gamefam.strategies import AtomicStrategy, StrategySet


def test_enumeration_degenerate():
    prof = enumerate_opponent_profiles([0, 1, 0], 4)
    assert len(prof) == 1
    np.testing.assert_array_equal(prof[0][0], [0, 4, 0])
    assert prof[0][1] == 1.0


def test_enumeration_binomial():
    s = np.array([0.3, 0.7])
    prof = enumerate_opponent_profiles(s, 4)
    assert len(prof) == 5
    for counts, pr in prof:
        k = counts[0]
        assert pr == pytest.approx(math.comb(4, k) * 0.3**k * 0.7 ** (4 - k), rel=1e-12)


def test_enumeration_three_support():
    prof = enumerate_opponent_profiles([0.2, 0.3, 0.5], 4)
    assert len(prof) == math.comb(6, 2)
    assert abs(sum(p for _, p in prof) - 1.0) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(0, 7), st.integers(0, 2**31))
def test_enumeration_sums_to_one(n, opponents, seed):
    rng = np.random.default_rng(seed)
    sigma = rng.dirichlet(np.ones(n))
    sigma[rng.random(n) < 0.3] = 0.0
    if sigma.sum() == 0:
        sigma[0] = 1.0
    sigma /= sigma.sum()
    prof = enumerate_opponent_profiles(sigma, opponents)
    k = int((sigma > 0).sum())
    assert len(prof) == math.comb(opponents + k - 1, k - 1)
    assert abs(sum(p for _, p in prof) - 1.0) < 1e-12
    assert all(c.sum() == opponents for c, _ in prof)


def test_multinomial_prob_matches_formula():
    assert multinomial_prob([2, 1, 1], [0.5, 0.25, 0.25]) == pytest.approx(12 * 0.25 * 0.25 * 0.25)
    np.testing.assert_array_equal(counts_to_seats([2, 0, 1]), [0, 0, 2])


def test_reserve_above_theta_max_gives_zero(tiny_game, rng):
    u = oracle_profile_devpay(tiny_game, [1, 1], 26.0, 500, rng)
    np.testing.assert_array_equal(u, 0.0)
    obs = sample_observation(tiny_game, [0.5, 0.5], 26.0, rng)
    np.testing.assert_array_equal(obs.payoffs, 0.0)


def test_duplicate_strategies_identical_entries(rng):
    # same atomic behavior under two descriptors: offset 0 with and without an update that never lands
    cfg = AuctionConfig(players=3, ctr=(1.0, 0.7), update_success_prob=0.0)
    g = AuctionGame(cfg, StrategySet([AtomicStrategy(0, False), AtomicStrategy(0, True), AtomicStrategy(4, False)]))
    u = oracle_profile_devpay(g, [1, 0, 1], 1.5, 2000, rng)
    assert u[0] == u[1]


def _scalar_devpay(game, counts, r, n, seed):
    """Independent estimator: the scalar reference auction, one setting at a time."""
    rng = np.random.default_rng(seed)
    opp = list(counts_to_seats(counts))
    pay = np.zeros((n, game.n_strategies))
    for k in range(n):
        q = rng.random(game.players)
        th = rng.random(game.players) * game.cfg.theta_max
        coins = rng.random(game.players) < game.cfg.update_success_prob
        setting = [TypeDraw(a, b) for a, b in zip(q, th)]
        for j in range(game.n_strategies):
            pay[k, j] = play_auction([j, *opp], setting, game.cfg, game.strategies, r, rng, coins).payoff[0]
    return pay.mean(axis=0), pay.std(axis=0, ddof=1) / math.sqrt(n)


@pytest.mark.parametrize("counts,r", [([2, 0], 1.0), ([1, 1], 3.0)])
def test_oracle_matches_scalar_reimplementation(tiny_game, counts, r):
    m, se = oracle_profile_stats(tiny_game, counts, r, 100_000, np.random.default_rng(1))
    m2, se2 = _scalar_devpay(tiny_game, counts, r, 4000, seed=2)
    assert np.all(np.abs(m - m2) <= 3 * np.hypot(se, se2))


def test_true_devpay_pure_and_identical(tiny_game):
    o = Oracle(tiny_game, 3000, seed=4)
    np.testing.assert_array_equal(o.true_devpay([1.0, 0.0], 2.0), o.profile_stats([2, 0], 2.0)[0])
    cfg = AuctionConfig(players=3, ctr=(1.0, 0.7), update_success_prob=0.0)
    g = AuctionGame(cfg, StrategySet([AtomicStrategy(4, False), AtomicStrategy(4, True)]))
    o2 = Oracle(g, 20_000, seed=0)
    a, sa = o2.true_devpay_stats([0.5, 0.5], 1.0)
    b, sb = o2.true_devpay_stats([1.0, 0.0], 1.0)
    assert a[0] == a[1]
    assert abs(a[0] - b[0]) <= 3 * np.hypot(sa[0], sb[0])


def test_true_devpay_matches_direct_sampling(desk_game):
    sigma = np.array([0.2, 0.5, 0.3])
    o = Oracle(desk_game, 20_000, seed=5)
    m, se = o.true_devpay_stats(sigma, 2.5)
    m2, se2 = monte_carlo_devpay(desk_game, sigma, 2.5, 100_000, np.random.default_rng(6))
    assert np.all(np.abs(m - m2) <= 3 * np.hypot(se, se2))


def test_label_permutation_invariance(desk_game):
    perm = [2, 0, 1]
    g2 = AuctionGame(desk_game.cfg, StrategySet([desk_game.strategies[k] for k in perm]))
    sigma = np.array([0.1, 0.6, 0.3])
    m, se = Oracle(desk_game, 20_000, 1).true_devpay_stats(sigma, 1.75)
    m2, se2 = Oracle(g2, 20_000, 2).true_devpay_stats(sigma[perm], 1.75)
    assert np.all(np.abs(m[perm] - m2) <= 4 * np.hypot(se[perm], se2))


def test_oracle_is_order_independent(desk_game):
    a, b = Oracle(desk_game, 500, 3), Oracle(desk_game, 500, 3)
    x1 = a.profile_stats([1, 1, 0], 1.0)[0]
    a.profile_stats([0, 2, 0], 2.0)
    b.profile_stats([0, 2, 0], 2.0)
    b.profile_stats([2, 0, 0], 0.5)
    np.testing.assert_array_equal(x1, b.profile_stats([1, 1, 0], 1.0)[0])
    assert a.profile_stats([1, 1, 0], 1.0) is a.profile_stats([1, 1, 0], 1.0 + 1e-12)


@pytest.mark.parametrize("sigma,u,want", [((1, 0), (1, 0), 0.0), ((0, 1), (1, 0), 1.0), ((0.5, 0.5), (2, 1), 0.5)])
def test_regret_examples(sigma, u, want):
    assert regret(sigma, u) == want


def test_regret_clamp_and_mismatch():
    sigma = np.array([0.3, 0.7])
    u = np.array([1.0, 1.0 - 1e-15])
    assert regret(sigma, u) >= 0.0
    assert regret([1.0, 0.0], [1.0, 1.0 + 5e-10]) == pytest.approx(5e-10)
    assert REGRET_CLAMP == 1e-9
    with pytest.raises(ValueError):
        regret([1.0], [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10))
def test_regret_zero_at_argmax_point_mass(u):
    u = np.asarray(u)
    sigma = np.zeros(u.size)
    sigma[int(np.argmax(u))] = 1.0
    assert regret(sigma, u) == 0.0


def test_single_player_edge(rng):
    cfg = AuctionConfig(players=1, ctr=(1.0,))
    g = AuctionGame(cfg, StrategySet([AtomicStrategy(0, False), AtomicStrategy(30, False)]))
    obs = sample_observations(g, np.array([1.0, 0.0]), 2.0, 200, rng)
    assert obs["opp_strats"].shape == (200, 0)
    q, th = obs["own_type"][:, 0], obs["own_type"][:, 1]
    bid = np.floor(th)
    want = np.where(q * bid >= 2.0, th - 2.0 / np.where(q > 0, q, 1), 0.0)
    np.testing.assert_allclose(obs["payoffs"][:, 0], want, atol=1e-9)
    np.testing.assert_array_equal(obs["payoffs"][:, 1], 0.0)


def test_observation_mean_matches_oracle(desk_game):
    sigma = np.array([0.6, 0.4, 0.0])
    pay = sample_observations(desk_game, sigma, 1.2, 100_000, np.random.default_rng(8))["payoffs"]
    m, se = Oracle(desk_game, 50_000, 7).true_devpay_stats(sigma, 1.2)
    se2 = pay.std(axis=0, ddof=1) / math.sqrt(pay.shape[0])
    assert np.all(np.abs(pay.mean(axis=0) - m) <= 3 * np.hypot(se, se2))


def test_interim_marginalization_identity(desk_game):
    # conditioning on the deviator's type and averaging over types recovers the ex ante value
    rng = np.random.default_rng(11)
    n_t, per = 4000, 25
    q0, th0 = rng.random(n_t), rng.random(n_t) * 25
    q, theta, coins = desk_game.draw_settings(rng, n_t * per)
    q[:, 0], theta[:, 0] = np.repeat(q0, per), np.repeat(th0, per)
    opp = np.broadcast_to([1, 2], (n_t * per, 2))
    cond = desk_game.deviation_payoffs(opp, q, theta, coins, 2.0).reshape(n_t, per, 3).mean(axis=1)
    m, se = Oracle(desk_game, 100_000, 12).profile_stats([0, 1, 1], 2.0)
    se_c = cond.std(axis=0, ddof=1) / math.sqrt(n_t)
    assert np.all(np.abs(cond.mean(axis=0) - m) <= 3 * np.hypot(se, se_c))


def test_oracle_csv(tmp_path, desk_game):
    o = Oracle(desk_game, 200, 0)
    rows = oracle_rows(o, [0, 2, 0], 1.5)
    path = tmp_path / "o.csv"
    write_oracle_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "r,profile,strategy,mean_payoff,sem,n"
    assert len(lines) == 4
    assert float(lines[1].split(",")[3]) == o.profile_stats([0, 2, 0], 1.5)[0][0]


def test_extended_oracle_shares_draws(desk_game):
    base = Oracle(desk_game, 500, 4)
    ext = base.with_game(desk_game.with_strategy(AtomicStrategy(2, False)))
    m, _ = base.profile_stats([1, 1, 0], 1.0)
    m2, _ = ext.profile_stats([1, 1, 0, 0], 1.0)
    np.testing.assert_array_equal(m2[:3], m)
    assert ext.profile_revenue([2, 1, 0, 0], 1.0) == base.profile_revenue([2, 1, 0], 1.0)
