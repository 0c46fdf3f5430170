"""Per-PEV processor: one round of reading, master solve, pruning, cut generation and writing."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import (CutKind, CutPlane, CutSet, GeometryError, nonnegativity_cuts,
                       objective_bound_cut)
from .solvers import LocalOracle, MasterResult, OracleResult, master_solve


class ProcessorError(RuntimeError):
    pass


@dataclass
class ProcessorState:
    """State of cutting-plane processor ``index`` (its coordinate in ``u``)."""

    id: int
    index: int
    n_pi: int
    n_u: int
    M: float
    cuts: CutSet
    epsilon: float = 1e-3
    K: int = 1
    rho: float = 1e-4
    eps_act: float = 1e-7
    cap: int | None = None
    is_istar: bool = False
    clock: int = 0
    z: np.ndarray | None = None
    J: float = np.inf
    gap: float = np.inf
    last_oracle: OracleResult | None = None
    history: deque = field(default_factory=deque)
    fresh_rounds: deque = field(default_factory=deque)
    cond1: bool = False
    cond2: bool = False
    stopped: bool = False
    first_stop: int | None = None

    def __post_init__(self):
        self.history = deque(self.history, maxlen=self.K + 1)
        self.fresh_rounds = deque(self.fresh_rounds, maxlen=self.K)

    @property
    def dim(self) -> int:
        return self.n_pi + self.n_u

    @property
    def pi(self) -> np.ndarray:
        return self.z[:self.n_pi]

    @property
    def u_own(self) -> float:
        return float(self.z[self.n_pi + self.index])


def initial_cuts(n_pi: int, n_u: int, M: float, origin=(-1, 0)) -> CutSet:
    cuts = [objective_bound_cut(n_pi, n_u, M, origin)] + nonnegativity_cuts(n_pi, n_u, origin)
    return CutSet.from_cuts(cuts, n_pi + n_u, n_pi)


def initialize(pid: int, M: float, n_pi: int, n_u: int, index: int | None = None, **kw) -> ProcessorState:
    """Initial state with ``H(0) = {e.z <= M} U {-pi_t <= 0}``."""
    if M <= 0:
        raise ProcessorError("M must be positive")
    if n_pi < 0 or n_u < 1:
        raise ProcessorError("need n_pi >= 0 and at least one u-coordinate")
    index = pid if index is None else index
    if not 0 <= index < n_u:
        raise ProcessorError(f"u-index {index} outside 0..{n_u - 1}")
    cuts = initial_cuts(n_pi, n_u, M, (pid, 0))
    return ProcessorState(pid, index, n_pi, n_u, M, cuts, **kw)


def read_phase(state: ProcessorState, neighbor_sets) -> CutSet:
    """Temporary set: own cuts united with every inbound snapshot."""
    for s in neighbor_sets:
        if s.dim != state.dim or s.n_pi != state.n_pi:
            raise GeometryError(f"inbound set {s} does not match dimension {state.dim}")
    return state.cuts.union(*neighbor_sets)


def generate_cut(state: ProcessorState, z, oracle) -> tuple:
    """Oracle cut for query ``z``; returns ``(cut, oracle_result)``.

    The cut is the empty cut when ``z`` already satisfies ``u_i <= U_i(pi)``.
    """
    z = np.asarray(z, dtype=float)
    pi = z[:state.n_pi]
    res = oracle(pi)
    u_i = z[state.n_pi + state.index]
    origin = (state.id, state.clock)
    if u_i <= res.value:
        return CutPlane.empty(state.dim, origin), res
    f_p = oracle.f(res.argmin)
    direction = res.argmin - oracle.L if res.shift_applied else res.argmin
    a = np.zeros(state.dim)
    a[:state.n_pi] = -direction
    a[state.n_pi + state.index] = 1.0
    cut = CutPlane(a, f_p, origin, CutKind.ORACLE)
    if not cut.violation(z) > 0:
        # u_i > U_i(pi) can only round away when both sides agree to machine precision
        return CutPlane.empty(state.dim, origin), res
    return cut, res


def local_criterion(state: ProcessorState) -> bool:
    """Condition 1 (J stagnation over K rounds) and Condition 2 (oracle gap) both below epsilon."""
    return state.cond1 and state.cond2


def _update_conditions(state: ProcessorState, fresh: bool, needs_fresh: bool):
    h = state.history
    state.cond1 = len(h) == state.K + 1 and (h[0] - h[-1]) < state.epsilon
    state.cond2 = state.gap < state.epsilon
    state.fresh_rounds.append(fresh)
    live = (not needs_fresh) or (len(state.fresh_rounds) == state.K and any(state.fresh_rounds))
    state.stopped = state.cond1 and state.cond2 and live
    if state.stopped and state.first_stop is None:
        state.first_stop = state.clock


def iterate(state: ProcessorState, inbound, oracle: LocalOracle, needs_fresh: bool = False,
            fresh: bool | None = None) -> CutSet:
    """One local round; mutates ``state`` and returns the snapshot to publish.

    ``needs_fresh`` enables the liveness guard: the processor only reports
    stopped if it received at least one new inbound snapshot in its last
    ``K`` rounds.  ``fresh`` says whether this round's inbound data contains
    anything new (defaults to "any inbound at all").
    """
    inbound = list(inbound)
    if fresh is None:
        fresh = bool(inbound)
    tmp = read_phase(state, inbound)
    master: MasterResult = master_solve(tmp, state.rho, state.z)
    z = master.z
    pruned = tmp.prune_active(z, state.eps_act, state.cap, master.lam)
    state.z = z
    state.J = master.J
    cut, res = generate_cut(state, z, oracle)
    state.last_oracle = res
    state.gap = state.u_own - res.value
    state.cuts = pruned.add(cut)
    state.history.append(master.J)
    _update_conditions(state, fresh, needs_fresh)
    state.clock += 1
    return state.cuts


def extract_profile(state: ProcessorState, oracle: LocalOracle) -> np.ndarray:
    """Charging profile that minimizes the local Lagrangian at the processor's final price."""
    if not state.stopped:
        raise ProcessorError(f"processor {state.id} has not met its stopping criterion")
    return oracle(state.pi).argmin


def trace_record(state: ProcessorState) -> dict:
    return {
        "k_i": state.clock,
        "J": state.J,
        "z_norm": float(np.linalg.norm(state.z)) if state.z is not None else None,
        "cuts": len(state.cuts),
        "u_i": state.u_own if state.z is not None else None,
        "U_i": state.last_oracle.value if state.last_oracle is not None else None,
        "gap": state.gap,
        "cond1": state.cond1,
        "cond2": state.cond2,
        "stopped": state.stopped,
    }
