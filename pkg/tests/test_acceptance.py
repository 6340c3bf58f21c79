"""Desk-scale acceptance experiments, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
The learning and equilibrium experiments take several minutes.
"""

import time

import numpy as np
import pytest

from gamefam.data import augment_with_piecewise, generate_dataset, to_ex_ante
from gamefam.emd import (Evaluator, IterateConfig, bundle_summary, default_grid, grid_optimize, iterate_emd,
                         run_restarts, SearchConfig, validate_round_report)
from gamefam.game import AuctionGame, Oracle, monte_carlo_devpay, regret
from gamefam.learn import DESK_SPEC, MLP, PayoffModel, RegressorSpec, gradient_check, sample_types, train_ensemble
from gamefam.nash import CONFIRMED, REJECTED, grid_test, solve_model
from gamefam.piecewise import REFERENCE_CUTOFFS_K5, build_equiprobable_partition, piecewise_best_response
from gamefam.rng import child_rng
from gamefam.sim import DESK_CONFIG
from gamefam.strategies import PRESETS, TypePartition

ENSEMBLE = 3
M, O = 5000, 10
TRAINED = (0.01, 4.0)
pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def oracle(desk_game):
    return Oracle(desk_game, 10_000, seed=1)


@pytest.fixture(scope="module")
def desk_models(desk_game):
    t0 = time.perf_counter()
    d = generate_dataset(desk_game, M, O, TRAINED, seed=0)
    interim = train_ensemble(d, DESK_SPEC, ENSEMBLE)
    ex_ante = train_ensemble(to_ex_ante(d), DESK_SPEC, ENSEMBLE)
    return {"interim": interim, "ex_ante": ex_ante, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def grid_tests(desk_models, oracle):
    t0 = time.perf_counter()
    on, off = default_grid(0.05, 4.0), default_grid(4.05, 7.5)
    out = {(form, rng_name): grid_test(desk_models[form], oracle, grid)
           for form in ("interim", "ex_ante") for rng_name, grid in (("on", on), ("off", off))}
    out["seconds"] = time.perf_counter() - t0
    return out


def test_criterion_01_oracle_self_consistency(desk_game, acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    oracle = Oracle(desk_game, 20_000, seed=2)
    worst, fails = 0.0, 0
    for i in range(20):
        sigma = rng.dirichlet(np.ones(3))
        r = float(rng.uniform(0.01, 8.0))
        m, se = oracle.true_devpay_stats(sigma, r)
        m2, se2 = monte_carlo_devpay(desk_game, sigma, r, 100_000, child_rng(0, "mc", i))
        z = np.abs(m - m2) / np.hypot(se, se2)
        worst = max(worst, float(z.max()))
        fails += int((z > 3).any())
    secs = time.perf_counter() - t0
    ok = fails == 0 and secs < 120
    acceptance(1, ok, f"{fails}/20 points outside 3 SE, max |z| = {worst:.2f}, {secs:.1f}s")
    assert ok


def test_criterion_02_regret_identities(acceptance):
    rng = np.random.default_rng(0)
    at_argmax = []
    for _ in range(100):
        u = rng.normal(size=5)
        at_argmax.append(regret(np.eye(5)[u.argmax()], u))
    half = regret([0.5, 0.5], [2.0, 1.0])
    clamp = min(regret(s, u) for s, u in
                ((rng.dirichlet(np.ones(4)), np.full(4, c)) for c in rng.normal(scale=1e3, size=200)))
    ok = max(at_argmax) == 0.0 and half == 0.5 and clamp >= -1e-9
    acceptance(2, ok, f"argmax regret max {max(at_argmax)}, (0.5,0.5)|(2,1) -> {half}, min clamp {clamp:.1e}")
    assert ok


def test_criterion_03_gradient_check(acceptance):
    rng = np.random.default_rng(0)
    acts = ("relu", "tanh", "sigmoid", "linear")
    errs = []
    for i in range(20):
        hidden = tuple(int(h) for h in rng.integers(1, 6, size=int(rng.integers(1, 3))))
        spec = RegressorSpec(hidden=hidden, activation=acts[i % len(acts)])
        errs.append(gradient_check(spec, n_in=int(rng.integers(1, 5)), n_out=int(rng.integers(1, 4)),
                                   seed=i)["max_rel_error"])
    ok = max(errs) < 1e-4
    acceptance(3, ok, f"max relative error {max(errs):.2e} over 20 networks")
    assert ok


def test_criterion_04_learning_sanity(desk_models, grid_tests, acceptance):
    secs = desk_models["seconds"] + grid_tests["seconds"]
    ri, re = grid_tests["interim", "on"]["ratio"], grid_tests["ex_ante", "on"]["ratio"]
    ok = ri <= 0.15 and re <= 0.15 and secs < 900
    acceptance(4, ok, f"MSE/variance interim {ri:.3f}, ex ante {re:.3f} (bound 0.15), "
                      f"variance {grid_tests['interim', 'on']['variance']:.3f}, {secs:.0f}s")
    assert ok


def test_criterion_05_extrapolation(grid_tests, acceptance):
    ratio = {f: grid_tests[f, "off"]["mse"] / grid_tests[f, "on"]["mse"] for f in ("interim", "ex_ante")}
    ok = ratio["interim"] <= 2.0
    acceptance(5, ok, f"off/on MSE interim {ratio['interim']:.2f} (bound 2), ex ante {ratio['ex_ante']:.2f} "
                      f"(reported only)")
    assert ok


def test_criterion_06_equilibrium_pipeline(desk_models, oracle, acceptance):
    t0 = time.perf_counter()
    model = desk_models["interim"]
    confirmed = rejected = 0
    worst = 0.0
    for r in np.linspace(0.1, 4.0, 40):
        res = solve_model(model, float(r), oracle, eps=0.01)
        c = res.counts()
        confirmed += c[CONFIRMED]
        rejected += c[REJECTED]
        for cand in res.confirmed():
            worst = max(worst, cand.true_regret)
    secs = time.perf_counter() - t0
    share = confirmed / max(confirmed + rejected, 1)
    ok = share >= 0.7 and worst <= 0.01 and secs < 1200
    acceptance(6, ok, f"confirmed {confirmed}/{confirmed + rejected} passing starts ({share:.1%}), "
                      f"max confirmed regret {worst:.4f}, {secs:.0f}s")
    assert ok


def _random_model(rng, S):
    net = MLP([S + 3, 8, S], "tanh", rng)
    return PayoffModel("interim", S, net, np.zeros(S + 3), np.ones(S + 3), np.zeros(S), 1.0, RegressorSpec())


def test_criterion_07_piecewise_inequality(acceptance):
    rng = np.random.default_rng(0)
    dominated = reduced = 0
    for _ in range(50):
        S = int(rng.integers(2, 7))
        model = _random_model(rng, S)
        sigma, r = rng.dirichlet(np.ones(S)), float(rng.uniform(0.01, 8.0))
        samples = sample_types(rng, 2000)
        br = piecewise_best_response(model, sigma, r, build_equiprobable_partition(int(rng.integers(2, 8)), 20_000, rng),
                                     samples=samples)
        dominated += br["predicted_payoff"] >= br["marginal"].max()
        one = piecewise_best_response(model, sigma, r, TypePartition(()), samples=samples)
        reduced += one["phi"].assignment == (int(one["marginal"].argmax()),) and \
            one["predicted_payoff"] == one["marginal"].max()
    ok = dominated == 50 and reduced == 50
    acceptance(7, ok, f"dominance {dominated}/50, k=1 reduction {reduced}/50")
    assert ok


def test_criterion_08_partition_quantiles(acceptance):
    cuts = np.array(build_equiprobable_partition(5, 10_000_000, np.random.default_rng(0)).cutoffs)
    dev = float(np.abs(cuts - REFERENCE_CUTOFFS_K5).max())
    ok = dev <= 0.02
    acceptance(8, ok, f"cutoffs {np.round(cuts, 4).tolist()}, max deviation {dev:.4f}")
    assert ok


def test_criterion_09_augmentation(hand_augmentation, acceptance):
    d, phi, want = hand_augmentation
    a = augment_with_piecewise(d, phi)
    checks = {
        "count": a.m == want["m"],
        "sigma": np.array_equal(a.sigma, want["sigma"]),
        "column": np.array_equal(a.targets[..., 2], want["phi_column"]),
        "prefix": np.array_equal(a.targets[:d.m, :, :2], d.targets),
    }
    ok = all(checks.values())
    acceptance(9, ok, ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items()))
    assert ok


def test_criterion_10_local_search(desk_game, oracle, acceptance):
    t0 = time.perf_counter()
    d = generate_dataset(desk_game, M, O, (0.01, 8.0), seed=0)
    model = train_ensemble(d, DESK_SPEC, ENSEMBLE)
    search = Evaluator(model, oracle, "search")
    final = search.with_mode("final")
    grid = default_grid(0.05, 8.0)
    gmax = grid_optimize(final, grid).best_revenue
    cfg = SearchConfig(bounds=(0.05, 8.0))
    lines, ok = [], gmax is not None
    for algo in ("hc", "sa"):
        bundles = [bundle_summary(run_restarts(algo, search, final, cfg, seed=b)) for b in range(4)]
        best = np.mean([b["best_revenue"] if b["best_revenue"] is not None else 0.0 for b in bundles])
        distinct = np.mean([b["n_distinct"] for b in bundles])
        ok = ok and best >= 0.95 * gmax and distinct <= 0.5 * len(grid)
        lines.append(f"{algo} {best / gmax:.1%} of grid max, {distinct:.0f}/{len(grid)} instances")
    secs = time.perf_counter() - t0
    ok = ok and secs < 1800
    acceptance(10, ok, f"grid max {gmax:.4f}; " + "; ".join(lines) + f"; {secs:.0f}s")
    assert ok


def test_criterion_11_iterative_emd(acceptance):
    t0 = time.perf_counter()
    game = AuctionGame(DESK_CONFIG, PRESETS["paper6"]())
    d = generate_dataset(game, M, O, (0.01, 8.0), seed=0)
    model = train_ensemble(d, DESK_SPEC, 1)
    rep = iterate_emd(game, d, model, rounds=1, cfg=IterateConfig(spec=DESK_SPEC))[0]
    errs = validate_round_report(rep) if rep.get("status") == "ok" else [rep.get("status")]
    secs = time.perf_counter() - t0
    ok = not errs and rep["dataset"]["simulator_queries"] == 0 and secs < 1800
    detail = f"schema problems {errs}" if errs else (
        f"r* {rep['r_star']:.2f}, phi {rep['phi_label']}, simulator queries {rep['dataset']['simulator_queries']}, "
        f"prior regret predicted {rep['prior_in_expanded']['predicted_regret']:.4f} "
        f"true {rep['prior_in_expanded']['true_regret']:.4f}")
    acceptance(11, ok, f"{detail}, {secs:.0f}s")
    assert ok
