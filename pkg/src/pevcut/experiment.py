"""Experiment configuration, execution and metrics (the library half of the CLI)."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import re
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netsim as ns
from . import processor as proc
from .baselines import admm_solve, mode1_greedy, mode2_selfish
from .model import CocInstance, capacity_violation, total_cost
from .scenario import PopulationParams, Scenario, ScenarioConfig, build_scenario
from .solvers import CentralResult, centralized_solve, oracles_for, slater_holds, solve_primal

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

SCHEMA = "pevcut.summary/1"
OUT_ENV = "PEVCUT_OUT"
SIG_DIGITS = 12


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass
class AlgorithmConfig:
    epsilon: float = 1e-3
    rho: float = 1e-4
    eps_act: float = 1e-7
    cap_factor: int | None = 50
    capacity_guard: float = 0.0
    K: int | None = None


@dataclass
class NetworkConfig:
    wake: str = "jitter"
    wake_lo: float = 0.5
    wake_hi: float = 1.5
    q_delay: float = 0.0
    q_drop: float = 0.0
    delay_steps: float = 1.0
    seed: int = 0
    max_rounds: int = 1000
    liveness_guard: bool = True
    join_round: int | None = None
    join_fraction: float = 0.5


@dataclass
class BaselineConfig:
    enabled: bool = True
    rho_admm: float = 1.0
    admm_tol: float = 1e-4
    admm_max_iters: int = 5000


@dataclass
class OutputConfig:
    dir: str | None = None
    trace: bool = True
    messages: bool = False


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {
    ExperimentConfig: {"scenario": ScenarioConfig, "algorithm": AlgorithmConfig, "network": NetworkConfig,
                       "baselines": BaselineConfig, "output": OutputConfig},
    ScenarioConfig: {"population": PopulationParams},
}


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    pat = re.compile(r'^\s*"?' + re.escape(key) + r'"?\s*[=:]', re.MULTILINE)
    m = pat.search(text)
    return f" (line {text.count(chr(10), 0, m.start()) + 1})" if m else ""


def _build(cls, data: dict, path: str, text: str | None):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown key {where!r}{_line_of(text, key)}")
        sub = _NESTED.get(cls, {}).get(key)
        if sub is not None:
            kwargs[key] = _build(sub, value, where, text)
            continue
        default = fields[key].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        if key in ("arrival", "departure") and isinstance(value, dict):
            value = {int(h): float(w) for h, w in value.items()}
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean{_line_of(text, key)}")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where} must be a number{_line_of(text, key)}")
            if isinstance(default, int) and not isinstance(value, int):
                if float(value).is_integer():
                    value = int(value)
                else:
                    raise ConfigError(f"{where} must be an integer{_line_of(text, key)}")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict, text: str | None = None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "", text)
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a TOML or JSON experiment config."""
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return config_from_dict(data, text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply dotted-key overrides such as ``{"network.seed": 3}``."""
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown key {dotted!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown key {dotted!r}")
        node[parts[-1]] = value
    return config_from_dict(data)


def validate_config(cfg: ExperimentConfig):
    a, n = cfg.algorithm, cfg.network
    if a.epsilon <= 0 or a.rho <= 0:
        raise ConfigError("algorithm.epsilon and algorithm.rho must be positive")
    if not 0 <= a.capacity_guard < 1:
        raise ConfigError("algorithm.capacity_guard must lie in [0, 1)")
    if not (0 <= n.q_delay <= 1 and 0 <= n.q_drop <= 1):
        raise ConfigError("network.q_delay and network.q_drop must lie in [0, 1]")
    if n.max_rounds < 1:
        raise ConfigError("network.max_rounds must be >= 1")
    if n.join_round is not None and not 0 < n.join_fraction < 1:
        raise ConfigError("network.join_fraction must lie in (0, 1)")
    ns.WakeModel(n.wake, n.wake_lo, n.wake_hi)


# ---------------------------------------------------------------------------
# metrics

def compute_errors(trace: ns.RunTrace, J_star: float | None = None) -> dict:
    """Error series over the global clock.

    At each tick, over the processors that have woken at least once:
    ``e_I`` = max |J - J*|, ``e_II`` = max pairwise spread of J, ``e_III`` =
    max of each processor's own ``J(k_i - K) - J(k_i)`` (nan until it has
    ``K + 1`` values) and ``e_IV`` = max oracle gap ``u_i - U_i(pi)``.
    """
    ticks = trace.ticks
    n, K = trace.n, trace.K
    J = np.full(n, np.nan)
    gap = np.full(n, np.nan)
    hist = [[] for _ in range(n)]
    out = {key: np.full(ticks, np.nan) for key in ("e_I", "e_II", "e_III", "e_IV")}
    out["k"] = np.arange(1, ticks + 1)
    out["t"] = np.full(ticks, np.nan)
    out["woken"] = np.zeros(ticks, dtype=int)
    if J_star is None:
        warnings.warn("no ground truth: e_I omitted", stacklevel=2)
    by_tick = {r["k"]: r for r in trace.records}
    stag = np.full(n, np.nan)
    for idx in range(ticks):
        r = by_tick.get(idx + 1)
        if r is not None:
            i = r["node"]
            J[i] = r["J"]
            gap[i] = r["gap"]
            hist[i].append(r["J"])
            if len(hist[i]) > K:
                stag[i] = hist[i][-K - 1] - hist[i][-1]
            out["t"][idx] = r["t"]
        woke = ~np.isnan(J)
        out["woken"][idx] = int(woke.sum())
        if not woke.any():
            continue
        if J_star is not None:
            out["e_I"][idx] = np.max(np.abs(J[woke] - J_star))
        out["e_II"][idx] = np.max(J[woke]) - np.min(J[woke])
        s = stag[woke]
        out["e_III"][idx] = np.max(s) if not np.isnan(s).any() else np.nan
        out["e_IV"][idx] = np.max(gap[woke])
    return out


def premature_consensus(errors: dict, eps: float, n: int) -> int | None:
    """First tick, once all ``n`` processors have woken, at which they agree (``e_II < eps``)
    on a wrong value (``e_I >= eps``)."""
    e1, e2 = errors["e_I"], errors["e_II"]
    bad = np.flatnonzero((errors["woken"] == n) & (e2 < eps) & (e1 >= eps))
    return int(errors["k"][bad[0]]) if len(bad) else None


def feasibility_shift(z, n_pi: int, oracles) -> float:
    """Smallest ``delta >= 0`` such that lowering every ``u_m`` by ``delta`` lands in all ``Z_m``."""
    z = np.asarray(z, dtype=float)
    pi = np.maximum(z[:n_pi], 0.0)
    excess = [z[n_pi + m] - o(pi).value for m, o in enumerate(oracles)]
    return float(max(0.0, max(excess)))


def shifted_point(z, n_pi: int, delta: float) -> np.ndarray:
    zb = np.array(z, dtype=float)
    zb[n_pi:] -= delta
    return zb


# ---------------------------------------------------------------------------
# running

@dataclass
class Prepared:
    scenario: Scenario
    coord: CocInstance
    schedule: ns.GraphSchedule
    d: int
    K: int
    wake: ns.WakeModel


def coordination_instance(inst: CocInstance, guard: float) -> CocInstance:
    """Instance whose capacity is reduced by ``guard * max(L)`` (what the L-holder is told)."""
    if guard == 0:
        return inst
    L = np.maximum(inst.L - guard * float(np.max(inst.L)), 0.0)
    return CocInstance(inst.pevs, L, inst.dt_hours, inst.i_star)


def prepare(cfg: ExperimentConfig, scenario: Scenario | None = None) -> Prepared:
    sc = scenario or build_scenario(cfg.scenario)
    coord = coordination_instance(sc.instance, cfg.algorithm.capacity_guard)
    if not slater_holds(coord):
        raise ConfigError("scenario violates Slater's condition; raise the capacity margin or lower the guard")
    sched = sc.schedule
    net = cfg.network
    if net.join_round is not None:
        first = int(math.ceil(sched.n * (1 - net.join_fraction)))
        sched = sched.with_activation({i: net.join_round for i in range(first, sched.n)})
    if not ns.verify_tbar(sched):
        raise ConfigError(f"schedule is not {sched.tbar}-strongly connected")
    d = ns.diameter(sched)
    wake = ns.WakeModel(net.wake, net.wake_lo, net.wake_hi)
    K = cfg.algorithm.K or ns.criterion_window(d, sched.tbar, wake, net.q_delay, net.delay_steps)
    return Prepared(sc, coord, sched, d, K, wake)


def make_processors(inst: CocInstance, M, alg: AlgorithmConfig, K: int) -> tuple:
    cap = None if alg.cap_factor is None else int(alg.cap_factor * (inst.T + inst.n))
    ps = [proc.initialize(i, float(M[i]), inst.T, inst.n, epsilon=alg.epsilon, K=K, rho=alg.rho,
                          eps_act=alg.eps_act, cap=cap, is_istar=(i == inst.istar_index))
          for i in range(inst.n)]
    return ps, oracles_for(inst)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    prepared: Prepared
    trace: ns.RunTrace
    central: object
    processors: list
    profiles: np.ndarray
    errors: dict
    summary: dict
    baselines: list

    @property
    def exit_code(self) -> int:
        return 0 if self.trace.converged else 2


def _num(x):
    if x is None:
        return None
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(f"{x:.{SIG_DIGITS}g}")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (str, type(None))):
        return obj
    return _num(obj)


def load_ground_truth(path, cfg: ExperimentConfig) -> CentralResult | None:
    """Cached centralized result, if ``path`` exists and was computed for the same scenario/algorithm."""
    path = Path(path)
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    if data.get("key") != _truth_key(cfg):
        log.info("ground-truth cache %s is for a different scenario; recomputing", path)
        return None
    return CentralResult.from_json(data["result"])


def save_ground_truth(path, cfg: ExperimentConfig, central: CentralResult):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"key": _truth_key(cfg), "result": central.to_json()}) + "\n")


def _truth_key(cfg: ExperimentConfig) -> str:
    blob = json.dumps({"scenario": dataclasses.asdict(cfg.scenario), "rho": cfg.algorithm.rho,
                       "guard": cfg.algorithm.capacity_guard}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def run_experiment(cfg: ExperimentConfig, out_dir=None, scenario: Scenario | None = None,
                   with_baselines: bool | None = None, ground_truth=None) -> ExperimentResult:
    """Build the scenario, run the protocol, compute metrics and (optionally) write the artifacts.

    ``ground_truth`` names an optional JSON cache for the centralized solve.
    """
    prep = prepare(cfg, scenario)
    inst = prep.coord
    alg, net = cfg.algorithm, cfg.network
    central = load_ground_truth(ground_truth, cfg) if ground_truth else None
    if central is None:
        central = centralized_solve(inst, alg.rho, check_slater=False)
        if ground_truth:
            save_ground_truth(ground_truth, cfg, central)
    ps, ors = make_processors(inst, prep.scenario.M, alg, prep.K)
    sim = ns.SimConfig(net.q_delay, net.q_drop, net.delay_steps, prep.wake, net.seed, net.max_rounds,
                       net.liveness_guard)
    trace = ns.run(prep.schedule, ps, ors, sim)
    profiles = np.array([o(p.pi).argmin if p.z is not None else np.zeros(inst.T) for p, o in zip(ps, ors)])
    errors = compute_errors(trace, central.J_star)
    rows = []
    if with_baselines if with_baselines is not None else cfg.baselines.enabled:
        rows = compare_baselines(cfg, prep, trace, profiles)
    summary = build_summary(cfg, prep, trace, central, ps, ors, profiles, errors, rows)
    res = ExperimentResult(cfg, prep, trace, central, ps, profiles, errors, summary, rows)
    out_dir = out_dir or cfg.output.dir or os.environ.get(OUT_ENV)
    if out_dir:
        write_outputs(res, Path(out_dir))
    return res


def compare_baselines(cfg: ExperimentConfig, prep: Prepared, trace: ns.RunTrace, profiles) -> list:
    """Cost, worst feeder overload and rounds per strategy, all measured against the true ``L``."""
    inst = prep.scenario.instance
    rows = [{"strategy": "coordinated", "cost": total_cost(inst, profiles),
             "max_violation": capacity_violation(inst, profiles), "rounds": trace.rounds,
             "converged": trace.converged}]
    P, c, _ = solve_primal(inst)
    rows.append({"strategy": "centralized", "cost": c, "max_violation": capacity_violation(inst, P),
                 "rounds": None, "converged": True})
    for r in (mode1_greedy(inst), mode2_selfish(inst)):
        rows.append({"strategy": r.name, "cost": r.cost, "max_violation": r.violation, "rounds": 0,
                     "converged": True})
    b = cfg.baselines
    a = admm_solve(inst, b.rho_admm, b.admm_tol, b.admm_max_iters)
    rows.append({"strategy": "admm", "cost": a.cost, "max_violation": a.violation, "rounds": a.rounds,
                 "converged": a.converged})
    return rows


def build_summary(cfg, prep, trace, central, ps, ors, profiles, errors, rows) -> dict:
    inst = prep.coord
    eps = cfg.algorithm.epsilon
    J = trace.final_J()
    shifts = [feasibility_shift(p.z, inst.T, ors) for p in ps if p.z is not None]
    delta = max(shifts) if shifts else None
    stop_idx = (trace.stop_tick - 1) if trace.stop_tick else None
    return _clean({
        "schema": SCHEMA,
        "name": cfg.name,
        "config": cfg.to_dict(),
        "scenario": {"n": inst.n, "T": inst.T, "i_star": inst.i_star, "diameter": prep.d,
                     "tbar": prep.schedule.tbar, "K": prep.K, "L": inst.L,
                     "L_true": prep.scenario.instance.L, "M": prep.scenario.M},
        "ground_truth": {"J_star": central.J_star, "cost": central.cost, "pi_star": central.pi_star},
        "run": {"converged": trace.converged, "rounds": trace.rounds, "ticks": trace.ticks,
                "stop_tick": trace.stop_tick, "stop_time": trace.stop_time,
                "messages": len(trace.messages)},
        "nodes": [{"node": f["node"], "J": f["J"], "k_i": f["k_i"], "stopped": f["stopped"],
                   "first_stop": f["first_stop"]} for f in trace.final],
        "final": {"J_max_minus_J_star": float(np.max(J) - central.J_star),
                  "J_min_minus_J_star": float(np.min(J) - central.J_star),
                  "spread": float(np.ptp(J)),
                  "e_II_at_stop": errors["e_II"][stop_idx] if stop_idx is not None else None,
                  "premature_consensus_tick": premature_consensus(errors, eps, inst.n),
                  "feasibility_shift": delta,
                  "shift_constant": None if delta is None else delta / math.sqrt(eps),
                  "cost": total_cost(inst, profiles),
                  "max_violation": capacity_violation(prep.scenario.instance, profiles)},
        "baselines": rows,
    })


def write_outputs(res: ExperimentResult, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(res.summary, indent=2, sort_keys=True) + "\n")
    if res.config.output.trace:
        res.trace.to_jsonl(out / "trace.jsonl")
    if res.config.output.messages:
        res.trace.messages_to_jsonl(out / "messages.jsonl")
    write_errors_csv(out / "errors.csv", res.errors)
    inst = res.prepared.scenario.instance
    with open(out / "profiles.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pev", "slot", "kw"])
        for i, p in enumerate(res.profiles):
            for t, v in enumerate(p):
                w.writerow([inst.pevs[i].id, t + 1, _num(v)])
    with open(out / "load.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "baseload", "L", "coordinated"] + [r["strategy"] for r in res.baselines[2:4]])
        extra = [mode1_greedy(inst).profiles.sum(0), mode2_selfish(inst).profiles.sum(0)] if res.baselines else []
        agg = res.profiles.sum(0)
        for t in range(inst.T):
            w.writerow([t + 1, _num(res.prepared.scenario.baseload[t]), _num(inst.L[t]), _num(agg[t])]
                       + [_num(e[t]) for e in extra])


def write_errors_csv(path, errors: dict):
    keys = ("k", "t", "e_I", "e_II", "e_III", "e_IV")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for idx in range(len(errors["k"])):
            w.writerow([_num(errors[k][idx]) if k != "k" else int(errors[k][idx]) for k in keys])
