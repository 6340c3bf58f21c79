import json
import math

import numpy as np
import pytest

from gamefam.data import SchemaError, to_ex_ante
from gamefam.learn import (ACTIVATIONS, DESK_SPEC, MLP, TUNING_GRID, Ensemble, PayoffModel, RegressorSpec,
                           expand_inputs, gradient_check, load_model, marginalize, predict, sample_types,
                           spec_parse, train, train_ensemble)
from gamefam.sim import TypeDraw


def _with_targets(d, fn):
    """Copy of ``d`` whose per-observation targets are ``fn(sigma, r, own_type)``."""
    e = d.subset(np.arange(d.m))
    o = d.targets.shape[1]
    sig = np.repeat(d.sigma[:, None, :], o, axis=1)
    r = np.repeat(d.reserve[:, None], o, axis=1)
    e.targets = np.asarray(fn(sig, r, d.own_type), dtype=np.float64)
    return e


def test_constant_target(small_dataset):
    d = _with_targets(small_dataset, lambda s, r, t: np.full(s.shape, 3.5))
    m = train(d, RegressorSpec(hidden=(8,), epochs=300, patience=30, learning_rate=3e-3,
                                seed=0))
    assert m.meta["val_mse"] <= 1e-4
    np.testing.assert_allclose(m.predict([0.2, 0.3, 0.5], 1.0, (0.5, 10.0)), 3.5, atol=1e-2)


def test_linear_target(small_dataset):
    def fn(s, r, t):
        base = 2 * s[..., :1] - s[..., 1:2] + 0.5 * r[..., None]
        return np.concatenate([base, -base, base + 1.0], axis=-1)
    m = train(_with_targets(small_dataset, fn), RegressorSpec(hidden=(32,), activation="tanh", epochs=300,
                                                              patience=30, learning_rate=3e-3, seed=0))
    assert m.meta["val_mse"] <= 1e-3


def test_interim_beats_ex_ante_on_type_dependent_target(small_dataset):
    # q*theta/25 with q ~ U(0,1), theta ~ U(0,25): variance 1/9 - 1/16 = 7/144 that no ex ante model can explain
    qt = lambda s, r, t: np.repeat((t[..., 0] * t[..., 1] / 25.0)[..., None], s.shape[-1], axis=-1)
    d = _with_targets(small_dataset, qt)
    spec = RegressorSpec(hidden=(32, 32), activation="tanh", epochs=150, patience=20, seed=0)
    tr, va = d.split(0.2, seed=1)
    interim = train(tr, spec, val=va)
    ex_ante = train(to_ex_ante(tr), spec, val=to_ex_ante(va))
    x, y = va.arrays()
    err_interim = float(np.mean((interim.predict_raw(x) - y) ** 2))
    err_ex_ante = float(np.mean((ex_ante.predict_raw(x[:, :4]) - y) ** 2))
    assert err_interim <= 1e-2
    assert err_ex_ante >= 0.9 * 7 / 144


def test_predict_determinism_and_modes(small_interim_model, small_dataset):
    m = small_interim_model
    sig = np.array([0.2, 0.3, 0.5])
    a = m.predict(sig, 1.0, TypeDraw(0.4, 12.0))
    np.testing.assert_array_equal(a, predict(m, sig, 1.0, (0.4, 12.0)))
    np.testing.assert_array_equal(a, m.predict_types(sig, 1.0, [[0.4, 12.0]])[0])
    with pytest.raises(ValueError):
        m.predict(sig, 1.0)
    with pytest.raises(ValueError):
        m.predict(sig[:2], 1.0, (0.4, 12.0))
    e = train(to_ex_ante(small_dataset), RegressorSpec(hidden=(8,), epochs=5))
    with pytest.raises(ValueError):
        e.predict(sig, 1.0, (0.4, 12.0))
    with pytest.raises(ValueError):
        e.predict_types(sig, 1.0, [[0.4, 12.0]])
    assert e.predict(sig, 1.0).shape == (3,)


def _constant_model(c, mode="interim"):
    S = len(c)
    net = MLP([S + (3 if mode == "interim" else 1), 4, S], "relu", np.random.default_rng(0))
    for p in net.params:
        p[...] = 0.0
    return PayoffModel(mode, S, net, np.zeros(S + 3), np.ones(S + 3), np.asarray(c, float), 1.0,
                       RegressorSpec(hidden=(4,)))


def test_marginalize_constant_model():
    m = _constant_model([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(marginalize(m, [0.3, 0.3, 0.4], 2.0, n=50, rng=0), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        marginalize(m, [0.3, 0.3, 0.4], 2.0, n=0)


def test_marginalize_se_shrinks(small_interim_model):
    sig = [0.3, 0.3, 0.4]
    draws = {n: np.array([marginalize(small_interim_model, sig, 1.0, n, rng=k) for k in range(120)])
             for n in (1000, 10_000)}
    ratio = draws[10_000].std(axis=0) / draws[1000].std(axis=0)
    assert np.all((ratio > 0.2) & (ratio < 0.45)), ratio
    assert 1 / math.sqrt(10) == pytest.approx(0.316, abs=1e-3)


def test_marginal_fn_matches_slow_average(small_interim_model):
    m = small_interim_model
    types = sample_types(0, 200)
    sigs = np.random.default_rng(1).dirichlet(np.ones(3), size=4)
    fast = m.marginal_fn(2.0, types)(sigs)
    slow = np.array([m.predict_types(s, 2.0, types).mean(axis=0) for s in sigs])
    np.testing.assert_allclose(fast, slow, rtol=1e-10, atol=1e-10)
    with pytest.raises(ValueError):
        m.marginal_fn(2.0)


@pytest.mark.parametrize("activation", sorted(ACTIVATIONS))
@pytest.mark.parametrize("hidden", [(5,), (4, 3)])
def test_gradient_check(activation, hidden):
    res = gradient_check(RegressorSpec(hidden=hidden, activation=activation), seed=2)
    assert res["passed"], res["max_rel_error"]


@pytest.mark.parametrize("seed", range(10))
def test_gradient_check_deep_relu(seed):
    res = gradient_check(RegressorSpec(hidden=(4, 3), activation="relu"), seed=seed)
    assert res["min_abs_z"] > 1e-6
    assert res["passed"], res["max_rel_error"]


def test_gradient_check_edge_cases():
    assert gradient_check(RegressorSpec(hidden=(1,), activation="tanh"), n_examples=1)["passed"]
    z = gradient_check(zero=True)
    assert z["max_rel_error"] == 0.0 and all((g == 0).all() for g in z["grads"])


def test_save_load_round_trip(tmp_path, small_interim_model):
    p = tmp_path / "m.json"
    small_interim_model.save(p)
    m2 = PayoffModel.load(p)
    x = np.random.default_rng(0).random((10, small_interim_model.input_dim))
    np.testing.assert_array_equal(m2.predict_raw(x), small_interim_model.predict_raw(x))
    assert m2.spec == small_interim_model.spec and m2.meta == json.loads(p.read_text())["meta"]
    d = json.loads(p.read_text())
    d["schema"] = 0
    p.write_text(json.dumps(d))
    with pytest.raises(SchemaError):
        PayoffModel.load(p)


def test_reproducible_and_improves(small_dataset):
    spec = RegressorSpec(hidden=(8,), epochs=10, seed=3, dropout=0.1)
    a, b = train(small_dataset, spec), train(small_dataset, spec)
    for pa, pb in zip(a.net.params, b.net.params):
        np.testing.assert_array_equal(pa, pb)
    assert a.meta["train_mse"] < a.meta["initial_train_mse"]
    assert 0 <= a.meta["best_epoch"] <= a.meta["epochs_run"] <= 10


def test_expand_inputs():
    x = np.array([[0.5, 0.5, 2.0, 0.5, 10.0]])
    np.testing.assert_array_equal(expand_inputs(x, 2, "effective-bid"), [[0.5, 0.5, 2.0, 0.5, 10.0, 5.0, 3.0]])
    np.testing.assert_array_equal(expand_inputs(x, 2, "raw"), x)
    ex_ante = np.array([[0.5, 0.5, 2.0]])
    np.testing.assert_array_equal(expand_inputs(ex_ante, 2, "effective-bid"), ex_ante)


@pytest.fixture(scope="module")
def feature_model(small_dataset):
    return train(small_dataset, RegressorSpec(hidden=(12,), activation="tanh", epochs=20, features="effective-bid"))


def test_feature_model_fast_path(feature_model):
    assert feature_model.net.sizes[0] == 8 and feature_model.input_dim == 6
    types = sample_types(4, 300)
    sigs = np.random.default_rng(5).dirichlet(np.ones(3), size=3)
    fast = feature_model.marginal_fn(3.0, types)(sigs)
    slow = np.array([feature_model.predict_types(s, 3.0, types).mean(axis=0) for s in sigs])
    np.testing.assert_allclose(fast, slow, rtol=1e-10, atol=1e-10)


def test_reserve_gated_model(small_dataset):
    m = train(small_dataset, RegressorSpec(hidden=(12,), activation="tanh", epochs=20, gate=True))
    sig = np.array([0.2, 0.3, 0.5])
    np.testing.assert_array_equal(m.predict(sig, 3.0, (0.5, 5.9)), 0.0)
    assert np.any(m.predict(sig, 3.0, (0.5, 6.1)) != 0.0)
    types = sample_types(2, 400)
    sigs = np.random.default_rng(3).dirichlet(np.ones(3), size=4)
    for r in (0.5, 3.0, 30.0):
        fast = m.marginal_fn(r, types)(sigs)
        slow = np.array([m.predict_types(s, r, types).mean(axis=0) for s in sigs])
        np.testing.assert_allclose(fast, slow, rtol=1e-10, atol=1e-12)
    # rows that cannot meet the reserve have zero targets, so their error is exactly zero
    x, y = small_dataset.arrays()
    below = x[:, 4] * x[:, 5] < x[:, 3]
    assert below.any() and np.all(y[below] == 0)
    np.testing.assert_array_equal(m.predict_raw(x[below]), 0.0)


def test_ensemble_averages_members(tmp_path, small_dataset):
    spec = RegressorSpec(hidden=(8,), epochs=5, seed=10)
    ens = train_ensemble(small_dataset, spec, 3)
    assert isinstance(ens, Ensemble) and [m.spec.seed for m in ens.members] == [10, 11, 12]
    sig, t = np.array([0.2, 0.3, 0.5]), (0.5, 12.0)
    np.testing.assert_allclose(ens.predict(sig, 1.0, t), np.mean([m.predict(sig, 1.0, t) for m in ens.members], 0))
    types = sample_types(0, 50)
    np.testing.assert_allclose(ens.marginal_fn(1.0, types)(sig[None]),
                               np.mean([m.marginal_fn(1.0, types)(sig[None]) for m in ens.members], axis=0))
    assert ens.meta["members"] == 3 and ens.meta["strategies"] == small_dataset.meta["strategies"]
    ens.save(tmp_path / "e.json")
    back = load_model(tmp_path / "e.json")
    np.testing.assert_array_equal(back.marginal_fn(1.0, types)(sig[None]), ens.marginal_fn(1.0, types)(sig[None]))
    single = train_ensemble(small_dataset, spec, 1)
    assert isinstance(single, PayoffModel)
    single.save(tmp_path / "s.json")
    assert isinstance(load_model(tmp_path / "s.json"), PayoffModel)
    with pytest.raises(ValueError):
        train_ensemble(small_dataset, spec, 0)
    with pytest.raises(ValueError):
        Ensemble([])


@pytest.mark.parametrize("kw", [{"hidden": (0,)}, {"dropout": 1.0}, {"learning_rate": 0.0},
                                {"averaging": 1.0}, {"activation": "gelu"}, {"epochs": 0},
                                {"features": "poly"}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        RegressorSpec(**kw)


def test_spec_parse(tmp_path):
    assert spec_parse("desk") is DESK_SPEC
    assert spec_parse({"hidden": [3]}).hidden == (3,)
    f = tmp_path / "s.json"
    f.write_text(json.dumps({"hidden": [7, 7], "activation": "tanh"}))
    assert spec_parse(str(f)) == RegressorSpec(hidden=(7, 7), activation="tanh")
    assert set(TUNING_GRID) >= {"relu64x2", "desk"}
    with pytest.raises(FileNotFoundError):
        spec_parse(str(tmp_path / "missing.json"))
