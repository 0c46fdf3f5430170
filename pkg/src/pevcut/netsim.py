"""Deterministic discrete-event simulation of the asynchronous exchange.

Universal time is measured in communication rounds: a nominal processor wakes
once per unit of time.  The edge schedule is indexed by the integer round
``floor(t)``.  The analysis-only global clock ``k`` ticks once per wake event;
events at equal universal time are ordered deliveries first, then wakes by
node id.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import networkx as nx
import numpy as np

from . import processor as proc
from .processor import ProcessorState

log = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


def _edge_set(edges, bidirectional: bool = False) -> frozenset:
    out = set()
    for i, j in edges:
        if i == j:
            continue
        out.add((int(i), int(j)))
        if bidirectional:
            out.add((int(j), int(i)))
    return frozenset(out)


@dataclass(frozen=True)
class GraphSchedule:
    """Time-varying digraph: ``graphs`` are cycled, each held for ``dwell`` rounds."""

    n: int
    graphs: tuple
    dwell: int = 1
    tbar: int = 1
    activation: dict = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        if not self.graphs:
            raise GraphError("schedule needs at least one edge set")
        graphs = tuple(frozenset(g) for g in self.graphs)
        for g in graphs:
            for i, j in g:
                if not (0 <= i < self.n and 0 <= j < self.n):
                    raise GraphError(f"edge ({i}, {j}) outside 0..{self.n - 1}")
        object.__setattr__(self, "graphs", graphs)
        if self.dwell < 1 or self.tbar < 1:
            raise GraphError("dwell and tbar must be >= 1")

    @classmethod
    def static(cls, n: int, edges, bidirectional: bool = True, **kw) -> "GraphSchedule":
        return cls(n, (_edge_set(edges, bidirectional),), **kw)

    @classmethod
    def switching(cls, n: int, edge_lists: Sequence, dwell: int = 1, bidirectional: bool = True,
                  **kw) -> "GraphSchedule":
        return cls(n, tuple(_edge_set(e, bidirectional) for e in edge_lists), dwell, **kw)

    @property
    def period(self) -> int:
        return self.dwell * len(self.graphs)

    def edges_at(self, r: int) -> frozenset:
        return self.graphs[(r // self.dwell) % len(self.graphs)]

    def out_neighbors(self, i: int, r: int) -> list:
        return sorted(j for (a, j) in self.edges_at(r) if a == i)

    def in_neighbors(self, i: int, r: int) -> list:
        return sorted(a for (a, j) in self.edges_at(r) if j == i)

    def activation_round(self, i: int) -> int:
        return int(self.activation.get(i, 0))

    def recurring_edges(self, tbar: int | None = None) -> frozenset:
        """Edges present in every ``tbar``-window (the finite-horizon stand-in for E_inf)."""
        tbar = tbar or self.tbar
        span = math.lcm(self.period, tbar)
        common = None
        for s in range(span // tbar):
            window = frozenset().union(*(self.edges_at(r) for r in range(s * tbar, (s + 1) * tbar)))
            common = window if common is None else common & window
        return common

    def with_activation(self, activation: dict) -> "GraphSchedule":
        return GraphSchedule(self.n, self.graphs, self.dwell, self.tbar, dict(activation), self.name)


def _digraph(n: int, edges) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(range(n))
    g.add_edges_from(edges)
    return g


def diameter(schedule: GraphSchedule) -> int:
    """Diameter of the digraph of recurring edges."""
    if schedule.n == 1:
        return 0
    g = _digraph(schedule.n, schedule.recurring_edges())
    lengths = dict(nx.all_pairs_shortest_path_length(g))
    best = 0
    for i in range(schedule.n):
        for j in range(schedule.n):
            if j not in lengths[i]:
                raise GraphError(f"not strongly connected: no path from {i} to {j}")
            best = max(best, lengths[i][j])
    return best


def verify_tbar(schedule: GraphSchedule, tbar: int | None = None, horizon: int | None = None) -> bool:
    """True iff every window ``[s*tbar, (s+1)*tbar)`` unions to a strongly connected digraph."""
    tbar = tbar or schedule.tbar
    horizon = horizon or max(tbar, math.lcm(schedule.period, tbar))
    if horizon < tbar:
        raise GraphError("horizon shorter than the connectivity window")
    if schedule.n == 1:
        return True
    for s in range(horizon // tbar):
        edges = set().union(*(schedule.edges_at(r) for r in range(s * tbar, (s + 1) * tbar)))
        if not nx.is_strongly_connected(_digraph(schedule.n, edges)):
            return False
    return True


# ---------------------------------------------------------------------------
# wake models

@dataclass(frozen=True)
class WakeModel:
    """When processors wake.

    ``sync``: every node at each integer time; ``jitter``: once per round at a
    uniform offset; ``uniform``: i.i.d. intervals in ``[lo, hi]``.
    """

    kind: str = "jitter"
    lo: float = 0.5
    hi: float = 1.5

    def __post_init__(self):
        if self.kind not in ("sync", "jitter", "uniform"):
            raise ValueError(f"unknown wake model {self.kind!r}")
        if self.kind == "uniform" and not 0 < self.lo <= self.hi:
            raise ValueError("uniform wake model needs 0 < lo <= hi")

    def first(self, start: int, rng) -> float:
        if self.kind == "sync":
            return float(start)
        if self.kind == "jitter":
            return start + float(rng.random())
        return start + float(rng.uniform(0.0, self.hi))

    def next(self, t: float, rng) -> float:
        if self.kind == "sync":
            return math.floor(t) + 1.0
        if self.kind == "jitter":
            return math.floor(t) + 1.0 + float(rng.random())
        return t + float(rng.uniform(self.lo, self.hi))

    @property
    def factor(self) -> int:
        """Local rounds a single hop can take in the worst case."""
        if self.kind == "sync":
            return 1
        if self.kind == "jitter":
            return 2
        return math.ceil(self.hi / self.lo) + 1


def criterion_window(d: int, tbar: int, wake: WakeModel, q_delay: float = 0.0,
                     delay_steps: float = 1.0) -> int:
    """``K = d * Tbar`` scaled by the local rounds one hop may cost under the wake and delay model."""
    per_hop = wake.factor + (math.ceil(delay_steps) if q_delay > 0 else 0)
    return max(1, d * tbar * per_hop)


# ---------------------------------------------------------------------------
# event loop

@dataclass
class SimConfig:
    q_delay: float = 0.0
    q_drop: float = 0.0
    delay_steps: float = 1.0
    wake: WakeModel = field(default_factory=WakeModel)
    seed: int = 0
    max_rounds: int = 500
    liveness_guard: bool = True
    log_messages: bool = True


@dataclass
class RunTrace:
    """Everything observable about one run."""

    n: int
    K: int
    epsilon: float
    records: list
    messages: list
    converged: bool
    stop_tick: int | None
    stop_time: float | None
    final: list
    ticks: int

    @property
    def rounds(self) -> int:
        """Communication rounds elapsed (universal time, rounded up)."""
        t = self.stop_time if self.stop_time is not None else (self.records[-1]["t"] if self.records else 0)
        return int(math.floor(t)) + 1

    def node_series(self, i: int, key: str = "J") -> np.ndarray:
        return np.array([r[key] for r in self.records if r["node"] == i], dtype=float)

    def final_J(self) -> np.ndarray:
        return np.array([f["J"] for f in self.final], dtype=float)

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(json.dumps(r, sort_keys=True).encode())
        return h.hexdigest()

    @classmethod
    def from_records(cls, records: list, n: int, K: int, epsilon: float) -> "RunTrace":
        """Rebuild a trace from its JSON-lines records (message log and final states are not kept)."""
        records = sorted(records, key=lambda r: r["k"])
        last = {}
        for r in records:
            last[r["node"]] = r
        final = [{"node": i, "J": last[i]["J"] if i in last else float("inf"),
                  "k_i": last[i]["k_i"] if i in last else 0,
                  "stopped": last[i]["stopped"] if i in last else False,
                  "first_stop": None, "z": None} for i in range(n)]
        converged = bool(last) and len(last) == n and all(r["stopped"] for r in last.values())
        ticks = records[-1]["k"] if records else 0
        stop_tick = ticks if converged else None
        stop_time = records[-1]["t"] if converged else None
        return cls(n, K, epsilon, records, [], converged, stop_tick, stop_time, final, ticks)

    @classmethod
    def read_jsonl(cls, path, n: int, K: int, epsilon: float) -> "RunTrace":
        with open(path) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        return cls.from_records(records, n, K, epsilon)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    def messages_to_jsonl(self, path):
        with open(path, "w") as fh:
            for m in self.messages:
                fh.write(json.dumps(m, sort_keys=True) + "\n")


def run(schedule: GraphSchedule, processors: list, oracles: list, config: SimConfig | None = None,
        on_record: Callable | None = None) -> RunTrace:
    """Run the cutting-plane protocol on every processor until all active ones meet the local criterion.

    ``processors[i]`` and ``oracles[i]`` belong to graph node ``i``.  A
    non-converged run (round cap reached) is reported through
    ``RunTrace.converged`` rather than raised.
    """
    config = config or SimConfig()
    n = schedule.n
    if len(processors) != n or len(oracles) != n:
        raise GraphError("need one processor and one oracle per graph node")
    ss = np.random.SeedSequence(config.seed)
    wake_ss, fault_ss = ss.spawn(2)
    wake_rngs = [np.random.default_rng(s) for s in wake_ss.spawn(n)]
    fault_rng = np.random.default_rng(fault_ss)
    has_inbound = [any(j == i for g in schedule.graphs for (_, j) in g) for i in range(n)]

    inbox = [dict() for _ in range(n)]
    seq = itertools.count()
    heap = []
    for i in range(n):
        t0 = config.wake.first(schedule.activation_round(i), wake_rngs[i])
        heapq.heappush(heap, (t0, 1, i, next(seq), None))
    last_activation = max((schedule.activation_round(i) for i in range(n)), default=0)

    records, messages = [], []
    state_seen = {}
    active = [False] * n
    k = 0
    converged = False
    stop_tick = stop_time = None

    def deliver(src, dst, version, snap, t):
        cur = inbox[dst].get(src)
        if cur is None or cur[0] < version:
            inbox[dst][src] = (version, snap)

    while heap:
        t, kind, node, _, payload = heapq.heappop(heap)
        if t >= config.max_rounds:
            break
        if kind == 0:
            src, version, snap = payload
            deliver(src, node, version, snap, t)
            continue
        i = node
        active[i] = True
        r = int(math.floor(t))
        k += 1
        state: ProcessorState = processors[i]
        inbound = [snap for (_, snap) in (inbox[i][s] for s in sorted(inbox[i]))]
        versions = {s: v for s, (v, _) in inbox[i].items()}
        fresh = any(versions[s] > state_seen.get((i, s), -1) for s in versions) if versions else False
        for s, v in versions.items():
            state_seen[(i, s)] = v
        out = proc.iterate(state, inbound, oracles[i], needs_fresh=config.liveness_guard and has_inbound[i],
                           fresh=fresh)
        version = state.clock
        for j in schedule.out_neighbors(i, r):
            if schedule.activation_round(j) > r:
                continue
            drop_u, delay_u = fault_rng.random(), fault_rng.random()
            status = "delivered"
            if drop_u < config.q_drop:
                status = "dropped"
            elif delay_u < config.q_delay:
                status = "delayed"
                heapq.heappush(heap, (t + config.delay_steps, 0, j, next(seq), (i, version, out)))
            else:
                deliver(i, j, version, out, t)
            if config.log_messages:
                messages.append({"t": t, "k": k, "src": i, "dst": j, "version": version,
                                 "cuts": len(out), "status": status})
        rec = {"k": k, "t": t, "node": i, **proc.trace_record(state)}
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if t >= last_activation and all(active) and all(p.stopped for p in processors):
            converged = True
            stop_tick, stop_time = k, t
            break
        heapq.heappush(heap, (config.wake.next(t, wake_rngs[i]), 1, i, next(seq), None))

    final = [{"node": i, "J": p.J, "k_i": p.clock, "stopped": p.stopped, "first_stop": p.first_stop,
              "z": None if p.z is None else p.z.tolist()} for i, p in enumerate(processors)]
    K = processors[0].K if processors else 0
    eps = processors[0].epsilon if processors else 0.0
    return RunTrace(n, K, eps, records, messages, converged, stop_tick, stop_time, final, k)


def align_clocks(trace: RunTrace, key: str = "J") -> np.ndarray:
    """Step-resample each node's series onto the global clock.

    ``Q[i, k]`` is node ``i``'s value from its latest wake at or before tick
    ``k``; ``+inf`` (``nan`` for other keys) before its first wake.  Column 0
    is the pre-run state.
    """
    fill = np.inf if key == "J" else np.nan
    Q = np.full((trace.n, trace.ticks + 1), fill)
    cur = np.full(trace.n, fill)
    by_tick = {r["k"]: r for r in trace.records}
    for kk in range(1, trace.ticks + 1):
        r = by_tick.get(kk)
        if r is not None:
            v = r[key]
            cur[r["node"]] = np.nan if v is None else v
        Q[:, kk] = cur
    return Q


def local_clock_at(trace: RunTrace) -> np.ndarray:
    """``C[i, k]``: node ``i``'s local clock right after global tick ``k`` (0 before it wakes)."""
    C = np.zeros((trace.n, trace.ticks + 1), dtype=int)
    cur = np.zeros(trace.n, dtype=int)
    by_tick = {r["k"]: r for r in trace.records}
    for kk in range(1, trace.ticks + 1):
        r = by_tick.get(kk)
        if r is not None:
            cur[r["node"]] = r["k_i"]
        C[:, kk] = cur
    return C


def sync_reference(schedule: GraphSchedule, processors: list, oracles: list, max_rounds: int = 500,
                   liveness_guard: bool = True) -> list:
    """Plain round-robin loop (node order, freshest caches, no faults) for cross-checking :func:`run`.

    Returns the per-node final ``J``.
    """
    n = schedule.n
    cache = [None] * n
    seen = {}
    has_inbound = [any(j == i for g in schedule.graphs for (_, j) in g) for i in range(n)]
    heard = [dict() for _ in range(n)]
    for r in range(max_rounds):
        for i in range(n):
            if schedule.activation_round(i) > r:
                continue
            inbound = [heard[i][s][1] for s in sorted(heard[i])]
            fresh = any(v > seen.get((i, s), -1) for s, (v, _) in heard[i].items())
            for s, (v, _) in heard[i].items():
                seen[(i, s)] = v
            out = proc.iterate(processors[i], inbound, oracles[i],
                               needs_fresh=liveness_guard and has_inbound[i], fresh=fresh)
            cache[i] = (processors[i].clock, out)
            for j in schedule.out_neighbors(i, r):
                if schedule.activation_round(j) <= r:
                    heard[j][i] = cache[i]
            if all(schedule.activation_round(m) <= r for m in range(n)) and \
                    all(p.stopped for p in processors):
                return [p.J for p in processors]
    return [p.J for p in processors]
