import numpy as np
import pytest

from oracles import region, spec_for
from pevcut import processor as proc
from pevcut.geometry import CutKind, CutSet, GeometryError, nonnegativity_cuts, objective_bound_cut
from pevcut.model import CocInstance, PevSpec
from pevcut.solvers import LocalOracle, centralized_solve, master_solve, oracles_for, primal_recovery
from pevcut.baselines import mode2_selfish
from pevcut.scenario import random_instance


def _state(T=2, n=1, M=200.0, pid=0, **kw):
    return proc.initialize(pid, M, T, n, **kw)


def test_initialize_cut_structure():
    s = _state(T=16, n=36)
    kinds = list(s.cuts.kinds)
    assert kinds.count(CutKind.OBJECTIVE_BOUND) == 1
    assert kinds.count(CutKind.NONNEGATIVITY) == 16
    assert len(s.cuts) == 17


def test_different_M_different_initial_J():
    a, b = _state(n=2, M=150.0), _state(n=2, M=200.0, pid=1)
    Ja = master_solve(a.cuts, a.rho).J
    Jb = master_solve(b.cuts, b.rho).J
    assert Ja != pytest.approx(Jb)


def test_dimension_mismatch_rejected():
    with pytest.raises(GeometryError):
        CutSet.from_cuts([objective_bound_cut(2, 3, 1.0)] + nonnegativity_cuts(3, 3), 5, 2)
    with pytest.raises(proc.ProcessorError):
        _state(M=-1.0)
    with pytest.raises(proc.ProcessorError):
        proc.initialize(0, 1.0, 2, 2, index=2)


def test_read_phase():
    s = _state(n=2)
    assert proc.read_phase(s, []).same_as(s.cuts)
    tighter = s.cuts.union(CutSet.from_cuts([objective_bound_cut(2, 2, 1.0)], 4, 2))
    tmp = proc.read_phase(s, [tighter])
    rng = np.random.default_rng(0)
    for z in rng.uniform(-1, 250, size=(300, 4)):
        assert tmp.contains(z) == (tighter.contains(z) and s.cuts.contains(z))
    assert proc.read_phase(s, [tighter, tighter]).same_as(tmp)
    with pytest.raises(GeometryError):
        proc.read_phase(s, [CutSet.new(5, 2)])


def _toy_oracle(istar=False):
    spec = spec_for([1, 2], 0.0)
    return LocalOracle(spec, region([1, 1], 1.0, 2.0), istar, np.ones(2) if istar else None)


def test_generate_cut_empty_branch():
    s = _state()
    cut, res = proc.generate_cut(s, np.array([0.0, 0.0, 0.5]), _toy_oracle())
    assert res.value == pytest.approx(1.0)
    assert cut.is_empty


def test_generate_cut_example():
    s = _state()
    cut, _ = proc.generate_cut(s, np.array([0.0, 0.0, 2.0]), _toy_oracle())
    assert np.allclose(cut.a, [-1, 0, 1]) and cut.b == pytest.approx(1.0)
    assert cut.kind == CutKind.ORACLE


def test_generate_cut_istar_example():
    s = _state(is_istar=True)
    cut, _ = proc.generate_cut(s, np.array([0.0, 0.0, 2.0]), _toy_oracle(istar=True))
    assert np.allclose(cut.a, [0, 1, 1]) and cut.b == pytest.approx(1.0)


def test_generated_cut_separates_and_is_valid():
    inst = random_instance(3, 3, 5)
    ors = oracles_for(inst)
    s = proc.initialize(1, 100.0, 3, 3)
    rng = np.random.default_rng(2)
    for _ in range(50):
        z = np.concatenate([rng.uniform(0, 2, 3), rng.uniform(-1, 5, 3)])
        cut, res = proc.generate_cut(s, z, ors[1])
        if cut.is_empty:
            continue
        assert cut.violation(z) > 0
        # every point of Z_1 satisfies it: take u_1 = U_1(pi') at random pi'
        for pi in rng.uniform(0, 2, (10, 3)):
            w = np.concatenate([pi, rng.uniform(-1, 1, 3)])
            w[3 + 1] = ors[1](pi).value
            assert cut.violation(w) <= 1e-9


def _run_sequential(inst, rounds=200, epsilon=1e-6, K=None):
    ors = oracles_for(inst)
    K = K or max(1, inst.n)
    ps = [proc.initialize(i, 150.0 + 10 * i, inst.T, inst.n, epsilon=epsilon, K=K,
                          is_istar=(i == inst.istar_index)) for i in range(inst.n)]
    for r in range(rounds):
        snaps = [p.cuts for p in ps]
        for i, p in enumerate(ps):
            proc.iterate(p, [snaps[j] for j in range(inst.n) if j != i], ors[i], fresh=True)
        if all(p.stopped for p in ps):
            return ps, r + 1
    return ps, rounds


def test_isolated_processor_reaches_own_dual_optimum():
    spec = PevSpec(0, 2.0, 0.0, 0.5, 0.9, 1, 4, 1.0, 1.0, np.array([1.0, 2.0, 3.0]), 0.5)
    inst = CocInstance([spec], [5.0, 5.0, 5.0])
    ps, rounds = _run_sequential(inst, epsilon=1e-8)
    ref = centralized_solve(inst)
    assert ps[0].stopped and rounds <= 10
    assert abs(ps[0].J - ref.J_star) < 1e-6


def test_two_processor_contended_toy():
    inst = random_instance(2, 2, 0)
    ref = centralized_solve(inst)
    ps, rounds = _run_sequential(inst, rounds=30, epsilon=1e-5)
    assert all(abs(p.J - ref.J_star) <= 1e-3 for p in ps)


def test_new_cut_slack_or_active_at_next_optimum():
    inst = random_instance(2, 3, 1)
    ors = oracles_for(inst)
    s = proc.initialize(0, 150.0, 3, 2, is_istar=True)
    for _ in range(15):
        before = len(s.cuts)
        proc.iterate(s, [], ors[0])
        nxt = master_solve(s.cuts, s.rho).z
        assert s.cuts.contains(nxt, 1e-7)
        assert len(s.cuts) <= before + 1


def test_J_history_nonincreasing():
    inst = random_instance(3, 3, 2)
    ors = oracles_for(inst)
    ps = [proc.initialize(i, 150.0, 3, 3, K=3, is_istar=(i == 0)) for i in range(3)]
    Js = [[] for _ in ps]
    for _ in range(40):
        snaps = [p.cuts for p in ps]
        for i, p in enumerate(ps):
            proc.iterate(p, [snaps[(i + 1) % 3]], ors[i], fresh=True)
            Js[i].append(p.J)
    for seq in Js:
        assert np.all(np.diff(seq) <= 1e-9)


def test_local_criterion_cases():
    s = _state(epsilon=1e-3, K=2)
    s.history.extend([5.0, 5.0, 5.0])
    s.gap = 0.0
    proc._update_conditions(s, fresh=False, needs_fresh=False)
    assert proc.local_criterion(s) and s.stopped and s.first_stop == s.clock
    s2 = _state(epsilon=1e-3, K=2)
    s2.history.extend([5.002, 5.001, 5.0])
    s2.gap = 0.0
    proc._update_conditions(s2, False, False)
    assert not s2.cond1 and not proc.local_criterion(s2)
    s3 = _state(epsilon=1e-3, K=2)
    s3.history.extend([5.0, 5.0, 5.0])
    s3.gap = 1.5e-3
    proc._update_conditions(s3, False, False)
    assert s3.cond1 and not s3.cond2 and not proc.local_criterion(s3)


def test_liveness_guard_requires_fresh_input():
    s = _state(epsilon=1e-3, K=2)
    s.history.extend([5.0, 5.0, 5.0])
    s.gap = 0.0
    for _ in range(2):
        proc._update_conditions(s, fresh=False, needs_fresh=True)
    assert s.cond1 and s.cond2 and not s.stopped
    proc._update_conditions(s, fresh=True, needs_fresh=True)
    assert s.stopped


def test_extract_profile_requires_stop():
    s = _state()
    with pytest.raises(proc.ProcessorError):
        proc.extract_profile(s, _toy_oracle())


def test_extract_profile_decoupled_is_selfish():
    inst = random_instance(3, 3, 3, contended=False)
    ps, _ = _run_sequential(inst, epsilon=1e-6)
    ors = oracles_for(inst)
    P = np.array([proc.extract_profile(p, o) for p, o in zip(ps, ors)])
    assert np.allclose(P, mode2_selfish(inst).profiles, atol=1e-6)


def test_extract_profile_contended_residual_small():
    inst = random_instance(2, 3, 6)
    ps, _ = _run_sequential(inst, epsilon=1e-4)
    ors = oracles_for(inst)
    P = np.array([proc.extract_profile(p, o) for p, o in zip(ps, ors)])
    resid = float(np.max(P.sum(axis=0) - inst.L))
    assert resid <= 10 * np.sqrt(1e-4)


def test_extract_profile_tiny_epsilon_matches_centralized():
    inst = random_instance(2, 3, 8)
    ref = centralized_solve(inst, rho=1e-6)
    ors = oracles_for(inst)
    ps = [proc.initialize(i, 150.0, 3, 2, epsilon=1e-8, K=2, rho=1e-6, is_istar=(i == 0)) for i in range(2)]
    for _ in range(300):
        snaps = [p.cuts for p in ps]
        for i, p in enumerate(ps):
            proc.iterate(p, [snaps[1 - i]], ors[i], fresh=True)
        if all(p.stopped for p in ps):
            break
    assert all(p.stopped for p in ps)
    P = np.array([proc.extract_profile(p, o) for p, o in zip(ps, ors)])
    assert np.allclose(P, ref.profiles, atol=1e-3)


def test_trace_record_fields():
    s = _state()
    rec = proc.trace_record(s)
    assert set(rec) >= {"k_i", "J", "z_norm", "cuts", "cond1", "cond2", "stopped"}
