import json
from pathlib import Path

import numpy as np
import pytest

from pevcut import experiment as ex
from pevcut import netsim as ns
from pevcut.model import CocInstance, PevSpec
from pevcut.scenario import Scenario, ScenarioConfig, feeder_topology

GOLDEN = Path(__file__).parent / "golden" / "summary_schema.json"


def key_paths(x, pre=""):
    out = set()
    if isinstance(x, dict):
        for k, v in x.items():
            p = f"{pre}.{k}" if pre else k
            out.add(p)
            out |= key_paths(v, p)
    elif isinstance(x, list) and x and isinstance(x[0], dict):
        for item in x:
            out |= key_paths(item, pre + "[]")
    return out


# -- configuration -------------------------------------------------------------

def test_load_toml_and_json(tmp_path):
    t = tmp_path / "c.toml"
    t.write_text('name = "x"\n[network]\nwake = "uniform"\nq_drop = 0.1\n[scenario.population]\nT = 4\n')
    cfg = ex.load_config(t)
    assert cfg.network.wake == "uniform" and cfg.network.q_drop == 0.1 and cfg.scenario.population.T == 4
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"algorithm": {"epsilon": 1e-4}, "scenario": {"M_range": [1, 2]}}))
    cfg = ex.load_config(j)
    assert cfg.algorithm.epsilon == 1e-4 and cfg.scenario.M_range == (1, 2)


@pytest.mark.parametrize("text,match", [
    ('[network]\nwak = "sync"\n', r"network\.wak.*line 2"),
    ('[network]\nseed = "x"\n', r"network\.seed must be a number.*line 2"),
    ('[network]\nseed = 1.5\n', "integer"),
    ('[output]\ntrace = 1\n', "boolean"),
    ('[algorithm]\nepsilon = -1\n', "positive"),
    ('[network]\nq_drop = 2\n', r"\[0, 1\]"),
    ('[network]\nwake = "poisson"\n', "wake"),
    ('[network\n', "c.toml"),
    ('bogus = 1\n', "bogus"),
])
def test_config_errors(tmp_path, text, match):
    f = tmp_path / "c.toml"
    f.write_text(text)
    with pytest.raises((ex.ConfigError, ValueError), match=match):
        ex.load_config(f)


def test_json_syntax_error_has_line(tmp_path):
    f = tmp_path / "c.json"
    f.write_text('{\n "a": 1,\n}\n')
    with pytest.raises(ex.ConfigError, match="line 3"):
        ex.load_config(f)


def test_overrides():
    cfg = ex.apply_overrides(ex.ExperimentConfig(), {"network.seed": 4, "scenario.population.T": 3})
    assert cfg.network.seed == 4 and cfg.scenario.population.T == 3
    with pytest.raises(ex.ConfigError):
        ex.apply_overrides(cfg, {"network.nope": 1})
    with pytest.raises(ex.ConfigError):
        ex.apply_overrides(cfg, {"nope.seed": 1})


# -- error series ------------------------------------------------------------

def fake_trace(rows, n, K=1):
    recs = [{"k": k + 1, "t": float(k), "node": i, "J": J, "gap": g, "k_i": 0, "stopped": False}
            for k, (i, J, g) in enumerate(rows)]
    return ns.RunTrace.from_records(recs, n, K, 1e-3)


def test_errors_identical_J_gives_zero_spread():
    tr = fake_trace([(0, 5.0, 0.1), (1, 5.0, 0.2), (0, 5.0, 0.0)], 2)
    e = ex.compute_errors(tr, 4.0)
    assert np.all(e["e_II"] == 0)
    assert np.allclose(e["e_I"], 1.0)
    assert e["e_IV"][-1] == pytest.approx(0.2)


def test_errors_stagnation_uses_local_history():
    tr = fake_trace([(0, 5.0, 0), (1, 9.0, 0), (0, 4.0, 0), (1, 8.5, 0)], 2, K=1)
    e = ex.compute_errors(tr, 1.0)
    assert np.isnan(e["e_III"][1])
    assert np.isnan(e["e_III"][2])
    assert e["e_III"][3] == pytest.approx(1.0)


def test_missing_truth_omits_e_I():
    tr = fake_trace([(0, 5.0, 0)], 1)
    with pytest.warns(UserWarning, match="e_I omitted"):
        e = ex.compute_errors(tr, None)
    assert np.all(np.isnan(e["e_I"]))


def test_premature_consensus_detector():
    tr = fake_trace([(0, 5.0, 0), (1, 5.0, 0), (0, 5.0, 0), (1, 5.0, 0)], 2)
    e = ex.compute_errors(tr, 1.0)
    assert ex.premature_consensus(e, 1e-3, 2) == 2
    ok = ex.compute_errors(fake_trace([(0, 1.0, 0), (1, 1.0, 0)], 2), 1.0)
    assert ex.premature_consensus(ok, 1e-3, 2) is None
    # a lone awake node trivially agrees with itself; that is not consensus
    lone = ex.compute_errors(fake_trace([(0, 5.0, 0)], 2), 1.0)
    assert ex.premature_consensus(lone, 1e-3, 2) is None


def test_feasibility_shift():
    from pevcut.scenario import random_instance
    from pevcut.solvers import oracles_for
    inst = random_instance(2, 2, 0)
    ors = oracles_for(inst)
    pi = np.array([0.3, 0.1])
    U = np.array([o(pi).value for o in ors])
    z = np.concatenate([pi, U + [0.2, -0.1]])
    d = ex.feasibility_shift(z, 2, ors)
    assert d == pytest.approx(0.2)
    zb = ex.shifted_point(z, 2, d)
    assert np.all(zb[2:] <= U + 1e-12)
    assert ex.feasibility_shift(zb, 2, ors) == pytest.approx(0.0, abs=1e-12)


# -- end-to-end ------------------------------------------------------------

def test_toy_run_converges_and_reports(toy_cfg, tmp_path):
    res = ex.run_experiment(toy_cfg, tmp_path)
    s = res.summary
    assert res.exit_code == 0
    assert s["ground_truth"]["J_star"] == pytest.approx(res.central.J_star)
    assert s["run"]["rounds"] >= 1
    assert all(n["first_stop"] is not None for n in s["nodes"])
    for name in ("summary.json", "trace.jsonl", "errors.csv", "profiles.csv", "load.csv"):
        assert (tmp_path / name).exists()
    tail = {k: res.errors[k][-1] for k in ("e_I", "e_II", "e_III", "e_IV")}
    assert all(v < toy_cfg.algorithm.epsilon for v in tail.values())


def test_summary_matches_golden_schema(toy_cfg):
    s = ex.run_experiment(toy_cfg).summary
    golden = json.loads(GOLDEN.read_text())
    assert s["schema"] == golden["schema"] == ex.SCHEMA
    assert sorted(key_paths(s)) == golden["keys"]


def test_round_cap_exit(toy_cfg):
    cfg = ex.apply_overrides(toy_cfg, {"network.q_drop": 1.0, "network.max_rounds": 30})
    res = ex.run_experiment(cfg, with_baselines=False)
    assert res.exit_code == 2
    assert res.summary["run"]["converged"] is False and res.summary["run"]["stop_tick"] is None


def test_same_config_same_summary_bytes(toy_cfg, tmp_path):
    ex.run_experiment(toy_cfg, tmp_path / "a")
    ex.run_experiment(toy_cfg, tmp_path / "b")
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    assert (tmp_path / "a" / "trace.jsonl").read_bytes() == (tmp_path / "b" / "trace.jsonl").read_bytes()


def test_ground_truth_cache(toy_cfg, tmp_path):
    gt = tmp_path / "gt.json"
    a = ex.run_experiment(toy_cfg, ground_truth=gt).summary
    assert gt.exists()
    b = ex.run_experiment(toy_cfg, ground_truth=gt).summary
    assert a == b
    other = ex.apply_overrides(toy_cfg, {"scenario.seed": 5})
    assert ex.load_ground_truth(gt, other) is None


def test_plug_and_play_activation(toy_cfg):
    cfg = ex.apply_overrides(toy_cfg, {"network.join_round": 5, "scenario.n": 4,
                                       "scenario.population.T": 3})
    res = ex.run_experiment(cfg, with_baselines=False)
    first = {i: min(r["t"] for r in res.trace.records if r["node"] == i) for i in range(4)}
    assert first[2] >= 5 and first[3] >= 5 and first[0] < 5
    assert res.exit_code == 0


def test_capacity_guard_tightens_coordination_only():
    inst = ex.coordination_instance(
        CocInstance([PevSpec(0, 1.0, 0.0, 0.5, 1.0, 1, 3, 1.0, 1.0, np.ones(2))], [2.0, 1.0]), 0.1)
    assert np.allclose(inst.L, [1.8, 0.8])


def test_decoupled_all_strategies_agree():
    # rising prices and fixed energy: greedy, selfish and optimal all charge as early as possible
    price = np.array([1.0, 2.0, 3.0])
    pevs = [PevSpec(i, 1.0, 0.0, 0.6, 0.6, 1, 4, 0.4, 1.0, price, 0.0) for i in range(3)]
    inst = CocInstance(pevs, np.full(3, 10.0))
    cfg = ex.config_from_dict({"scenario": {"n": 3, "topology": "line"}, "network": {"wake": "sync"}})
    sc = Scenario(cfg.scenario, inst, feeder_topology("line", 3), np.zeros(3), np.array([150.0, 160, 170]))
    res = ex.run_experiment(cfg, scenario=sc, with_baselines=True)
    costs = {r["strategy"]: r["cost"] for r in res.baselines}
    assert max(costs.values()) - min(costs.values()) < 1e-4
