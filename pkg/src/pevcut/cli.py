"""Command-line entry point: ``pevcut {run,baselines,verify-graph,sample,replay}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import experiment as ex
from . import netsim as ns
from .model import ModelError
from .scenario import (SYNTHETIC_PRICE, ScenarioError, feeder_topology, horizon_curve, read_curve,
                       sample_population, write_roster)
from .solvers import SolverError

log = logging.getLogger("pevcut")

EXIT_OK, EXIT_ERROR, EXIT_NO_CONVERGENCE = 0, 1, 2

# common flag -> dotted config key
FLAG_KEYS = {
    "n": "scenario.n",
    "scenario_seed": "scenario.seed",
    "topology": "scenario.topology",
    "edge_file": "scenario.edge_file",
    "dwell": "scenario.dwell",
    "epsilon": "algorithm.epsilon",
    "rho": "algorithm.rho",
    "guard": "algorithm.capacity_guard",
    "K": "algorithm.K",
    "wake": "network.wake",
    "q_delay": "network.q_delay",
    "q_drop": "network.q_drop",
    "seed": "network.seed",
    "max_rounds": "network.max_rounds",
    "join_round": "network.join_round",
}


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise ex.ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = _value(val.strip())
    return out


def resolve_config(args) -> ex.ExperimentConfig:
    """Config file, then ``--set`` overrides, then the named flags (highest precedence)."""
    cfg = ex.load_config(args.config) if getattr(args, "config", None) else ex.ExperimentConfig()
    overrides = parse_set(getattr(args, "set", None))
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    return ex.apply_overrides(cfg, overrides) if overrides else cfg


def _add_config_flags(p: argparse.ArgumentParser, config_required: bool = False):
    p.add_argument("config", nargs=None if config_required else "?", help="TOML or JSON experiment config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    g = p.add_argument_group("common overrides")
    g.add_argument("--n", type=int)
    g.add_argument("--scenario-seed", type=int)
    g.add_argument("--topology")
    g.add_argument("--edge-file")
    g.add_argument("--dwell", type=int)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--rho", type=float)
    g.add_argument("--guard", type=float, help="capacity guard band as a fraction of max(L)")
    g.add_argument("--K", type=int, help="criterion window (default: derived from the network)")
    g.add_argument("--wake", choices=["sync", "jitter", "uniform"])
    g.add_argument("--q-delay", type=float)
    g.add_argument("--q-drop", type=float)
    g.add_argument("--seed", type=int, help="network RNG seed")
    g.add_argument("--max-rounds", type=int)
    g.add_argument("--join-round", type=int, help="activate the second half of the nodes at this round")


def _out_dir(args, cfg) -> Path | None:
    d = getattr(args, "out", None) or cfg.output.dir or os.environ.get(ex.OUT_ENV)
    return Path(d) if d else None


def _run_one(cfg: ex.ExperimentConfig, out: Path | None, baselines: bool, truth) -> tuple:
    res = ex.run_experiment(cfg, out, with_baselines=baselines, ground_truth=truth)
    return res.exit_code, res.summary


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, cfg)
    baselines = cfg.baselines.enabled and not args.no_baselines
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    if not seeds:
        code, summary = _run_one(cfg, out, baselines, args.ground_truth)
        _print_summary(summary)
        return code
    jobs = []
    for s in seeds:
        c = ex.apply_overrides(cfg, {"network.seed": s})
        jobs.append((c, out / f"seed{s}" if out else None, baselines, args.ground_truth))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(*j) for j in jobs]
    for s, (_, summary) in zip(seeds, results):
        print(f"seed {s}:", end=" ")
        _print_summary(summary)
    return max(code for code, _ in results)


def _parse_seeds(text: str) -> list:
    seeds = []
    for part in text.split(","):
        lo, sep, hi = part.partition("-")
        seeds.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
    return seeds


def _print_summary(s: dict):
    run, fin = s["run"], s["final"]
    state = "converged" if run["converged"] else "NOT converged (round cap)"
    print(f"{s['name']}: {state} after {run['rounds']} rounds; J* = {s['ground_truth']['J_star']}; "
          f"max J - J* = {fin['J_max_minus_J_star']}; cost = {fin['cost']}; "
          f"max violation = {fin['max_violation']}")


def cmd_baselines(args) -> int:
    cfg = resolve_config(args)
    res = ex.run_experiment(cfg, None, with_baselines=True, ground_truth=args.ground_truth)
    keys = ("strategy", "cost", "max_violation", "rounds", "converged")
    rows = res.summary["baselines"]
    out = _out_dir(args, cfg)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "baselines.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, keys)
            w.writeheader()
            w.writerows(rows)
    print(f"{'strategy':<12}{'cost':>16}{'max_violation':>16}{'rounds':>8}")
    for r in rows:
        rounds = "-" if r["rounds"] is None else r["rounds"]
        print(f"{r['strategy']:<12}{r['cost']:>16.6f}{r['max_violation']:>16.6g}{rounds:>8}")
    return res.exit_code


def cmd_verify_graph(args) -> int:
    if args.config:
        sc = resolve_config(args).scenario
        sched = feeder_topology(sc.topology, sc.n, sc.edge_file, sc.dwell)
    else:
        sched = feeder_topology(args.topology or "ieee37", args.n, args.edge_file, args.dwell or 1)
    tbar = args.tbar or sched.tbar
    ok = ns.verify_tbar(sched, tbar)
    try:
        d = ns.diameter(sched)
    except ns.GraphError as exc:
        print(f"{sched.name}: n={sched.n} tbar={tbar}: {exc}")
        return EXIT_ERROR
    print(f"{sched.name}: n={sched.n} diameter={d} tbar={tbar} strongly-connected={'yes' if ok else 'NO'}")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    sc = cfg.scenario
    pop = sc.population
    price24 = read_curve(sc.price_csv, "price") if sc.price_csv else SYNTHETIC_PRICE
    price = horizon_curve(price24, pop.T, pop.start_hour)
    pevs = sample_population(sc.n, sc.seed, pop, price)
    write_roster(args.output, pevs)
    print(f"wrote {len(pevs)} PEVs to {args.output}")
    return EXIT_OK


def cmd_replay(args) -> int:
    run_dir = Path(args.run_dir)
    summary = json.loads((run_dir / "summary.json").read_text())
    sc = summary["scenario"]
    eps = summary["config"]["algorithm"]["epsilon"]
    trace = ns.RunTrace.read_jsonl(run_dir / "trace.jsonl", sc["n"], sc["K"], eps)
    J_star = None if args.no_truth else summary["ground_truth"]["J_star"]
    errors = ex.compute_errors(trace, J_star)
    out = Path(args.out) if args.out else run_dir / "errors.replay.csv"
    ex.write_errors_csv(out, errors)
    tail = {k: errors[k][-1] for k in ("e_I", "e_II", "e_III", "e_IV")}
    print(f"replayed {trace.ticks} ticks from {run_dir}; final " +
          " ".join(f"{k}={v:.3g}" for k, v in tail.items()) + f"; wrote {out}")
    pc = ex.premature_consensus(errors, eps, sc["n"]) if J_star is not None else None
    if pc is not None:
        print(f"global criterion fails: consensus on a wrong value at tick {pc}")
    return EXIT_OK if trace.converged else EXIT_NO_CONVERGENCE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pevcut", description="Asynchronous cutting-plane consensus for PEV charging")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment (or a seed sweep)")
    _add_config_flags(r)
    r.add_argument("--out", help=f"output directory (default: config output.dir or ${ex.OUT_ENV})")
    r.add_argument("--no-baselines", action="store_true")
    r.add_argument("--ground-truth", help="JSON cache for the centralized solution")
    r.add_argument("--seeds", help="network seeds to sweep, e.g. 0-9 or 1,4,7")
    r.add_argument("--jobs", type=int, default=1, help="parallel workers for --seeds")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("baselines", help="cost / violation / rounds table per strategy")
    _add_config_flags(b)
    b.add_argument("--out")
    b.add_argument("--ground-truth")
    b.set_defaults(func=cmd_baselines)

    g = sub.add_parser("verify-graph", help="report diameter and check T-bar strong connectivity")
    _add_config_flags(g)
    g.add_argument("--tbar", type=int)
    g.set_defaults(func=cmd_verify_graph)

    s = sub.add_parser("sample", help="draw a PEV roster CSV")
    _add_config_flags(s)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_sample)

    rp = sub.add_parser("replay", help="recompute error series from a run directory")
    rp.add_argument("run_dir")
    rp.add_argument("--out")
    rp.add_argument("--no-truth", action="store_true", help="ignore J* (e_I omitted)")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ex.ConfigError, ScenarioError, ModelError, ns.GraphError, SolverError, OSError) as exc:
        print(f"pevcut: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
