import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pevcut.baselines import admm_solve, mode1_greedy, mode2_selfish
from pevcut.model import CocInstance, PevSpec
from pevcut.scenario import ScenarioConfig, build_scenario, random_instance
from pevcut.solvers import centralized_solve


def pev(pid, price, e, pmax=1.0, ta=1, alpha=0.0, smax=None):
    price = np.asarray(price, dtype=float)
    cap = 10.0
    s1 = e / cap
    return PevSpec(pid, cap, 0.0, s1, smax if smax is not None else s1, ta, len(price) + 1, pmax, 1.0,
                   price, alpha)


def test_mode1_examples():
    inst = CocInstance([pev(0, [1, 1, 1, 1], 1.0)], [5.0] * 4)
    assert np.allclose(mode1_greedy(inst).profiles[0], [1, 0, 0, 0])
    inst = CocInstance([pev(0, [1, 1, 1, 1], 1.5)], [5.0] * 4)
    assert np.allclose(mode1_greedy(inst).profiles[0], [1, 0.5, 0, 0])


def test_mode1_respects_arrival():
    inst = CocInstance([pev(0, [1, 1, 1, 1], 1.5, ta=3)], [5.0] * 4)
    assert np.allclose(mode1_greedy(inst).profiles[0], [0, 0, 1, 0.5])


def test_mode1_overloads_tight_feeder():
    inst = CocInstance([pev(0, [1, 1, 1], 1.0), pev(1, [1, 1, 1], 1.0)], [1.5, 1.5, 1.5])
    r = mode1_greedy(inst)
    assert r.violation == pytest.approx(0.5)


def test_mode2_cheapest_slot():
    inst = CocInstance([pev(0, [3, 1, 2], 1.5)], [5.0] * 3)
    assert np.allclose(mode2_selfish(inst).profiles[0], [0, 1, 0.5])


def test_mode2_flat_prices_spread_evenly():
    inst = CocInstance([pev(0, [1, 1, 1, 1], 2.0, alpha=0.3)], [5.0] * 4)
    assert np.allclose(mode2_selfish(inst).profiles[0], 0.5)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_cost_ordering_where_it_must_hold(seed):
    inst = random_instance(3, 3, seed)
    m1, m2 = mode1_greedy(inst), mode2_selfish(inst)
    central = centralized_solve(inst)
    assert m2.cost <= central.cost + 1e-6
    if m1.violation == 0:
        assert central.cost <= m1.cost + 1e-6


def test_cost_ordering_on_feeder_scenario():
    inst = build_scenario(ScenarioConfig()).instance
    m1, m2 = mode1_greedy(inst), mode2_selfish(inst)
    central = centralized_solve(inst)
    assert m2.cost <= central.cost <= m1.cost
    assert m1.violation > 0 and m2.violation > 0


def test_admm_decoupled_converges_immediately():
    inst = random_instance(3, 3, 2, contended=False)
    r = admm_solve(inst, tol=1e-6)
    assert r.converged and r.rounds <= 3
    assert np.allclose(r.profiles, mode2_selfish(inst).profiles, atol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_admm_contended_matches_centralized(seed):
    inst = random_instance(3, 3, seed)
    r = admm_solve(inst, tol=1e-7, max_iters=20000)
    central = centralized_solve(inst)
    assert r.converged
    assert r.cost == pytest.approx(central.cost, abs=1e-4)
    assert r.violation <= 1e-5
    assert len(r.history) == r.rounds


def test_admm_reports_cap():
    inst = random_instance(3, 3, 0)
    r = admm_solve(inst, tol=1e-14, max_iters=5)
    assert not r.converged and r.rounds == 5
