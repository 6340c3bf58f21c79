"""Command-line entry point: ``gamefam <command> [flags]``.

Every command that writes ``--out FILE`` also writes ``FILE.manifest.json``
with the command line, resolved configuration, seed, strategy set and
library versions. Exit codes: 0 success, 1 usage, 2 data or schema problem,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, kernel
from .data import SchemaError, generate_dataset, load_dataset, save_dataset, to_ex_ante
from .game import AuctionGame, Oracle, oracle_rows, write_oracle_csv
from .learn import NumericError, PayoffModel, load_model, spec_parse, train_ensemble
from .sim import DESK_CONFIG, AuctionConfig, ConfigError, load_config, play_auction, sample_setting
from .strategies import StrategyError, strategy_set_parse

log = logging.getLogger("gamefam")

CONFIG_ENV = "GAMEFAM_CONFIG"
NAMED_CONFIGS = {"default": AuctionConfig, "desk": lambda: DESK_CONFIG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_config(arg: Optional[str]) -> AuctionConfig:
    """``--config`` value, else ``$GAMEFAM_CONFIG``, else the default auction."""
    name = arg or os.environ.get(CONFIG_ENV) or "default"
    if name in NAMED_CONFIGS:
        return NAMED_CONFIGS[name]()
    if not Path(name).exists():
        raise FileNotFoundError(f"config file not found: {name}")
    return load_config(name)


def _game(args) -> AuctionGame:
    return AuctionGame(resolve_config(args.config), strategy_set_parse(args.strategies))


def _model_game(model: PayoffModel) -> AuctionGame:
    if not model.meta.get("strategies") or not model.meta.get("config"):
        raise SchemaError("model file lacks its strategy set or auction config")
    return AuctionGame(AuctionConfig.from_dict(model.meta["config"]),
                       strategy_set_parse(model.meta["strategies"]))


def _parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _mixture(text: str, n: int) -> np.ndarray:
    """``pure:j``, comma-separated probabilities, or a JSON file with ``sigma``."""
    if text.startswith("pure:"):
        sig = np.zeros(n)
        sig[int(text[5:])] = 1.0
        return sig
    if Path(text).exists():
        obj = json.loads(Path(text).read_text())
        return np.asarray(obj["sigma"] if isinstance(obj, dict) else obj, dtype=float)
    return np.asarray(_parse_floats(text), dtype=float)


def manifest(args, game: Optional[AuctionGame], started: float, outputs: list[str], extra=None) -> dict:
    return {
        "command": args.command,
        "argv": sys.argv[1:],
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "config": None if game is None else game.cfg.to_dict(),
        "strategies": None if game is None else game.strategies.to_list(),
        "versions": {"gamefam": __version__, "numpy": np.__version__,
                     "python": platform.python_version(), "backend": kernel.BACKEND},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": outputs,
        **(extra or {}),
    }


def _write_manifest(args, game, started, extra=None) -> None:
    if getattr(args, "out", None):
        out = Path(args.out)
        body = manifest(args, game, started, [str(out)], extra)
        out.with_name(out.name + ".manifest.json").write_text(json.dumps(body, indent=1) + "\n")


def _emit_lines(args, records) -> None:
    fh = open(args.out, "w") if getattr(args, "out", None) else sys.stdout
    try:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()


# -- commands --------------------------------------------------------------------------------

def cmd_simulate(args) -> dict:
    game = _game(args)
    profile = [int(x) for x in args.profile.split(",")]
    if len(profile) != game.players:
        raise ValueError(f"profile has {len(profile)} entries for {game.players} players")
    if any(not 0 <= j < game.n_strategies for j in profile):
        raise ValueError(f"profile entries must index the {game.n_strategies} strategies")
    rng = np.random.default_rng(args.seed)
    recs = []
    for k in range(args.settings):
        setting = sample_setting(rng, game.players, game.cfg.theta_max)
        out = play_auction(profile, setting, game.cfg, game.strategies, args.reserve, rng)
        recs.append({"setting": k, "reserve": args.reserve, "profile": profile,
                     "types": [[t.quality, t.valuation] for t in setting],
                     "bids": out.bids, "slot": out.slot, "price": out.price,
                     "payoff": out.payoff, "revenue": out.revenue})
    _emit_lines(args, recs)
    return {"game": game}


def cmd_gen_data(args) -> dict:
    game = _game(args)
    d = generate_dataset(game, args.m, args.o, (args.r_min, args.r_max), args.seed)
    save_dataset(d, args.out)
    log.info("wrote %d pairs x %d observations to %s", d.m, d.o, args.out)
    return {"game": game}


def cmd_train(args) -> dict:
    d = load_dataset(args.data)
    if args.mode == "ex-ante":
        d = to_ex_ante(d) if d.form == "interim" else d
    elif d.form != "interim":
        raise SchemaError("interim training needs an interim dataset")
    spec = spec_parse(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    model = train_ensemble(d, spec, args.ensemble)
    model.save(args.out)
    print(json.dumps({"mode": model.mode, "val_mse": model.meta["val_mse"],
                      "train_mse": model.meta["train_mse"], "best_epoch": model.meta["best_epoch"]}))
    game = AuctionGame(AuctionConfig.from_dict(d.meta["config"]), d.strategies)
    return {"game": game}


def cmd_solve(args) -> dict:
    from .nash import solve_model
    model = load_model(args.model)
    game = _model_game(model)
    oracle = Oracle(game, args.oracle_settings, args.seed) if args.oracle_settings > 0 else None
    recs, summary = [], []
    for r in _parse_floats(args.reserve):
        res = solve_model(model, r, oracle, args.eps, args.marginalization_samples, args.seed)
        recs.extend(res.runs)
        summary.append({"r": r, **res.counts(),
                        "regret_abs_errors": [c.regret_error for c in res.candidates
                                              if c.regret_error is not None]})
    _emit_lines(args, recs)
    for row in summary:
        print(json.dumps(row), file=sys.stderr)
    return {"game": game, "extra": {"summary": summary}}


def cmd_piecewise(args) -> dict:
    from .piecewise import (build_equiprobable_partition, percentage_increase,
                            piecewise_best_response, true_devpay_with)
    model = load_model(args.model)
    if model.mode != "interim":
        raise SchemaError("piecewise best responses need an interim model")
    game = _model_game(model)
    sigma = _mixture(args.equilibrium, game.n_strategies)
    part = build_equiprobable_partition(args.k, args.partition_samples, np.random.default_rng(args.seed),
                                        game.cfg.theta_max)
    pw = piecewise_best_response(model, sigma, args.reserve, part, args.n_samples,
                                 np.random.default_rng(args.seed + 1))
    phi = pw["phi"]
    edges = part.edges
    table = [{"interval": c, "start": edges[c], "end": edges[c + 1], "strategy": phi.assignment[c],
              "label": game.strategies[phi.assignment[c]].label} for c in range(part.k)]
    out = {"r": args.reserve, "sigma": sigma.tolist(), "assignment": table, "phi": phi.to_dict(),
           "predicted_phi_payoff": pw["predicted_payoff"],
           "predicted_atomic_best": pw["atomic_best_payoff"],
           "predicted_gain_pct": percentage_increase(pw["predicted_payoff"], pw["atomic_best_payoff"])}
    if args.oracle_settings > 0:
        u = true_devpay_with(Oracle(game, args.oracle_settings, args.seed), phi, sigma, args.reserve)
        out.update(true_phi_payoff=float(u[-1]), true_atomic_best=float(u[:-1].max()),
                   true_gain_pct=percentage_increase(float(u[-1]), float(u[:-1].max())))
    _emit_lines(args, [out])
    return {"game": game}


def _evaluators(args, model, game):
    from .emd import Evaluator
    oracle = Oracle(game, args.oracle_settings, args.seed)
    search = Evaluator(model, oracle, "search", args.eps, args.marginalization_samples, seed=args.seed)
    return search, search.with_mode("final")


def cmd_emd_grid(args) -> dict:
    from .emd import default_grid, grid_optimize
    model = load_model(args.model)
    game = _model_game(model)
    _, final = _evaluators(args, model, game)
    grid = default_grid(args.r_min, args.r_max, args.step)
    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            list(pool.map(final, grid))
    res = grid_optimize(final, grid)
    res.write_csv(args.out)
    extra = {"best_r": res.best_r, "best_revenue": res.best_revenue, "plateau": res.plateau,
             "holes": res.holes(), "n_instances": len(grid)}
    print(json.dumps(extra))
    return {"game": game, "extra": extra}


def cmd_emd_search(args) -> dict:
    from .emd import SearchConfig, bundle_summary, run_restarts
    model = load_model(args.model)
    game = _model_game(model)
    search, final = _evaluators(args, model, game)
    cfg = SearchConfig(restarts=args.restarts, bounds=(args.r_min, args.r_max), max_iters=args.max_iters,
                       restart_dist=args.restart_dist)
    runs = run_restarts(args.algo, search, final, cfg, args.seed)
    _emit_lines(args, [r.to_dict() for r in runs])
    summary = bundle_summary(runs)
    print(json.dumps({k: v for k, v in summary.items() if k != "distinct"}))
    return {"game": game, "extra": {"summary": summary}}


def cmd_emd_iterate(args) -> dict:
    from .emd import IterateConfig, SearchConfig, iterate_emd, validate_round_report
    model = load_model(args.model)
    data = load_dataset(args.data)
    game = _model_game(model)
    if data.strategies != game.strategies:
        raise SchemaError("dataset and model strategy sets differ")
    cfg = IterateConfig(search=SearchConfig(restarts=args.restarts, bounds=(args.r_min, args.r_max)),
                        eps=args.eps, k=args.k, n_types=args.marginalization_samples,
                        spec=model.spec, search_new=not args.no_new_search, selector=args.selector,
                        ensemble=model.meta.get("members", 1))
    reports = iterate_emd(game, data, model, args.rounds, cfg, args.oracle_settings, args.seed)
    Path(args.out).write_text(json.dumps(reports, indent=1) + "\n")
    problems = [p for rep in reports if rep.get("status") == "ok" for p in validate_round_report(rep)]
    if problems:
        raise SchemaError("; ".join(problems))
    if reports and reports[-1].get("status") != "ok":
        print(reports[-1]["status"], file=sys.stderr)
    return {"game": game}


def _counts(text: str, game: AuctionGame) -> np.ndarray:
    n, opp = game.n_strategies, game.players - 1
    if text.startswith("pure:"):
        c = np.zeros(n, dtype=np.int64)
        c[int(text[5:])] = opp
    else:
        c = np.asarray([int(x) for x in text.split(",")], dtype=np.int64)
    if c.shape != (n,) or c.sum() != opp or (c < 0).any():
        raise ValueError(f"opponent profile must be {n} non-negative counts summing to {opp}")
    return c


def cmd_oracle(args) -> dict:
    game = _game(args)
    oracle = Oracle(game, args.settings, args.seed)
    rows = []
    for r in _parse_floats(args.reserve):
        rows.extend(oracle_rows(oracle, _counts(args.profile, game), r))
    if args.out:
        write_oracle_csv(args.out, rows)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return {"game": game}


# -- parser ----------------------------------------------------------------------------------

def _common(p, game=True, seed=0):
    if game:
        p.add_argument("--config", help=f"auction config file or name (default|desk); env {CONFIG_ENV}")
        p.add_argument("--strategies", default="paper10", help="preset name or JSON file")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--threads", type=int, default=1)


def _emd_common(p):
    p.add_argument("--model", required=True)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--oracle-settings", type=int, default=10_000)
    p.add_argument("--marginalization-samples", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gamefam", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="play auctions, emit outcomes as JSON lines")
    _common(p)
    p.add_argument("--reserve", type=float, required=True)
    p.add_argument("--profile", required=True, help="comma-separated strategy index per player")
    p.add_argument("--settings", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-data", help="simulate an interim training set")
    _common(p)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--o", type=int, required=True)
    p.add_argument("--r-min", type=float, default=0.01)
    p.add_argument("--r-max", type=float, default=8.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a deviation-payoff model")
    _common(p, game=False, seed=None)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["ex-ante", "interim"], required=True)
    p.add_argument("--spec", default="relu64x2", help="tuning-grid name or JSON file")
    p.add_argument("--ensemble", type=int, default=1, help="average this many models with consecutive seeds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="replicator dynamics + classification per reserve")
    _common(p, game=False)
    _emd_common(p)
    p.add_argument("--reserve", required=True, help="one or more reserves, comma-separated")
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("piecewise", help="piecewise best response to an equilibrium")
    _common(p, game=False)
    p.add_argument("--model", required=True)
    p.add_argument("--equilibrium", required=True, help="pure:j, comma probabilities, or JSON file")
    p.add_argument("--reserve", type=float, required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--n-samples", type=int, default=100_000)
    p.add_argument("--partition-samples", type=int, default=1_000_000)
    p.add_argument("--oracle-settings", type=int, default=10_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_piecewise)

    p = sub.add_parser("emd-grid", help="final-mode revenue curve over a reserve grid")
    _common(p, game=False)
    _emd_common(p)
    p.add_argument("--r-min", type=float, default=0.05)
    p.add_argument("--r-max", type=float, default=15.0)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emd_grid)

    p = sub.add_parser("emd-search", help="hill climbing or annealing with restarts")
    _common(p, game=False)
    _emd_common(p)
    p.add_argument("--algo", choices=["hc", "sa"], default="hc")
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--r-min", type=float, default=0.05)
    p.add_argument("--r-max", type=float, default=8.0)
    p.add_argument("--restart-dist", choices=["uniform", "bell"], default="uniform")
    p.add_argument("--out")
    p.set_defaults(func=cmd_emd_search)

    p = sub.add_parser("emd-iterate", help="search, expand with a piecewise strategy, retrain")
    _common(p, game=False)
    _emd_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--r-min", type=float, default=0.05)
    p.add_argument("--r-max", type=float, default=8.0)
    p.add_argument("--no-new-search", action="store_true")
    p.add_argument("--selector", choices=["basin", "first", "max-entropy"], default="basin",
                   help="which equilibrium at the optimum the piecewise strategy responds to")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emd_iterate)

    p = sub.add_parser("oracle", help="oracle deviation payoffs for one opponent profile")
    _common(p)
    p.add_argument("--reserve", required=True)
    p.add_argument("--profile", required=True, help="pure:j or comma-separated opponent counts")
    p.add_argument("--settings", type=int, default=10_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as e:
        print(f"gamefam: usage error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = args.func(args) or {}
        _write_manifest(args, out.get("game"), started, out.get("extra"))
    except (NumericError, FloatingPointError) as e:
        print(f"gamefam: numeric failure: {e}", file=sys.stderr)
        return 3
    except (SchemaError, ConfigError, StrategyError, FileNotFoundError, KeyError,
            json.JSONDecodeError, ValueError) as e:
        print(f"gamefam: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except UsageError as e:
        print(f"gamefam: usage error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
