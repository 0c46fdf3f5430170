"""Scenario construction: synthetic or CSV price/baseload curves, PEV rosters,
feeder-shaped communication graphs and capacity vectors."""

from __future__ import annotations

import csv
import logging
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from .model import CocInstance, ModelError, PevSpec
from .netsim import GraphError, GraphSchedule

log = logging.getLogger(__name__)

HORIZON_START_HOUR = 17
HORIZON_SLOTS = 16

# day-ahead style energy price ($/kWh) by hour of day, evening peak and night trough
SYNTHETIC_PRICE = np.array([
    0.062, 0.058, 0.055, 0.053, 0.054, 0.060, 0.072, 0.085, 0.090, 0.088, 0.084, 0.082,
    0.080, 0.082, 0.088, 0.098, 0.115, 0.140, 0.165, 0.172, 0.158, 0.130, 0.100, 0.078])

# residential load per household (kW) by hour of day
SYNTHETIC_BASELOAD = np.array([
    0.85, 0.72, 0.66, 0.62, 0.62, 0.68, 0.82, 0.95, 0.98, 0.96, 0.95, 0.97,
    1.00, 1.05, 1.12, 1.25, 1.45, 1.70, 1.90, 1.95, 1.85, 1.62, 1.35, 1.08])

DEFAULT_ARRIVAL = {17: 0.10, 18: 0.25, 19: 0.25, 20: 0.20, 21: 0.10, 22: 0.05, 23: 0.05}
DEFAULT_DEPARTURE = {6: 0.15, 7: 0.35, 8: 0.35, 9: 0.15}

# IEEE 37-bus feeder line segments (regulator bus 799 removed, 701 is the head)
IEEE37_LINES = (
    (701, 702), (702, 705), (702, 713), (702, 703), (703, 727), (703, 730), (704, 714),
    (704, 720), (705, 742), (705, 712), (706, 725), (707, 724), (707, 722), (708, 733),
    (708, 732), (709, 731), (709, 708), (710, 735), (710, 736), (711, 741), (711, 740),
    (713, 704), (714, 718), (720, 707), (720, 706), (727, 744), (730, 709), (733, 734),
    (734, 737), (734, 710), (737, 738), (738, 711), (744, 728), (744, 729), (709, 775),
)
# tie line from the head to bus 737 brings the diameter from 15 down to 10
ALT37_TIES = ((701, 737),)


class ScenarioError(ValueError):
    pass


def horizon_hours(T: int = HORIZON_SLOTS, start: int = HORIZON_START_HOUR) -> list:
    return [(start + k) % 24 for k in range(T)]


def hour_to_slot(hour: int, start: int = HORIZON_START_HOUR) -> int:
    """1-based slot that begins at ``hour``; the hour right after the horizon maps to ``T + 1``."""
    return (hour - start) % 24 + 1


def horizon_curve(curve24, T: int = HORIZON_SLOTS, start: int = HORIZON_START_HOUR) -> np.ndarray:
    curve24 = np.asarray(curve24, dtype=float)
    if curve24.shape == (T,):
        return curve24.copy()
    if curve24.shape != (24,):
        raise ScenarioError(f"need 24 hourly values or {T} slot values, got {curve24.shape}")
    return curve24[horizon_hours(T, start)]


# ---------------------------------------------------------------------------
# capacity

def build_L(baseload, policy: str = "headroom", margin: float = 0.0, energy: float | None = None,
            dt: float = 1.0, peak: float | None = None) -> np.ndarray:
    """Feeder capacity available to PEVs.

    ``headroom``: ``(1 + margin) * peak - baseload`` where ``peak`` defaults to
    ``max(baseload)``.  ``valley-fill``: lift the baseload troughs to a flat
    level that admits ``(1 + margin) * energy`` kWh.
    """
    b = np.asarray(baseload, dtype=float)
    if np.any(b < 0):
        raise ScenarioError("baseload must be nonnegative")
    if policy == "headroom":
        top = float(np.max(b)) if peak is None else float(peak)
        L = (1.0 + margin) * top - b
    elif policy in ("valley-fill", "valley_fill"):
        if energy is None:
            raise ScenarioError("valley-fill needs the total PEV energy")
        target = (1.0 + margin) * energy / dt
        lo, hi = float(b.min()), float(b.max()) + target
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.maximum(mid - b, 0.0).sum() < target:
                lo = mid
            else:
                hi = mid
        L = np.maximum(hi - b, 0.0)
    else:
        raise ScenarioError(f"unknown capacity policy {policy!r}")
    L = np.maximum(L, 0.0)
    if not np.any(L > 0):
        warnings.warn("capacity vector is identically zero", stacklevel=2)
    return L


# ---------------------------------------------------------------------------
# populations

@dataclass
class PopulationParams:
    cap_kwh: tuple = (18.0, 20.0)
    soc_start: tuple = (0.3, 0.5)
    soc_target: tuple = (0.7, 0.9)
    soc_max: float = 0.95
    p_max_kw: float = 3.3
    eta: float = 0.9
    alpha: float = 1e-4
    T: int = HORIZON_SLOTS
    start_hour: int = HORIZON_START_HOUR
    dt_hours: float = 1.0
    arrival: dict = field(default_factory=lambda: dict(DEFAULT_ARRIVAL))
    departure: dict = field(default_factory=lambda: dict(DEFAULT_DEPARTURE))
    max_resample: int = 1000


def _hist_sampler(hist: dict):
    hours = np.array([int(h) for h in hist], dtype=int)
    w = np.array([float(hist[h]) for h in hist], dtype=float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ScenarioError("histogram weights must be nonnegative with positive total")
    return hours, w / w.sum()


def sample_population(n: int, seed: int, params: PopulationParams | None = None, price=None) -> list:
    """Draw ``n`` PEVs; windows and SOC targets are resampled until the demand fits."""
    if n < 1:
        raise ScenarioError("need n >= 1")
    params = params or PopulationParams()
    price = horizon_curve(SYNTHETIC_PRICE if price is None else price, params.T, params.start_hour)
    rng = np.random.default_rng(seed)
    arr_h, arr_w = _hist_sampler(params.arrival)
    dep_h, dep_w = _hist_sampler(params.departure)
    pevs = []
    for i in range(n):
        cap = float(rng.uniform(*params.cap_kwh))
        for _ in range(params.max_resample):
            ta = hour_to_slot(int(rng.choice(arr_h, p=arr_w)), params.start_hour)
            td = hour_to_slot(int(rng.choice(dep_h, p=dep_w)), params.start_hour)
            s0 = float(rng.uniform(*params.soc_start))
            s1 = float(rng.uniform(*params.soc_target))
            spec = PevSpec(i, cap, s0, s1, params.soc_max, ta, td, params.p_max_kw, params.eta, price,
                           params.alpha)
            try:
                spec.validate(params.dt_hours)
            except ModelError:
                continue
            pevs.append(spec)
            break
        else:
            raise ScenarioError(f"could not draw a feasible PEV {i} in {params.max_resample} tries")
    return pevs


ROSTER_FIELDS = ("id", "cap_kwh", "soc_start", "soc_target", "soc_max", "t_arrive", "t_depart",
                 "p_max_kw", "eta", "alpha")


def write_roster(path, pevs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROSTER_FIELDS)
        for p in pevs:
            w.writerow([repr(getattr(p, f)) if isinstance(getattr(p, f), float) else getattr(p, f)
                        for f in ROSTER_FIELDS])


def read_roster(path, price, dt_hours: float = 1.0) -> list:
    price = np.asarray(price, dtype=float)
    pevs = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(ROSTER_FIELDS) - set(reader.fieldnames or ()) - {"alpha"}
        if missing:
            raise ScenarioError(f"{path}: missing roster columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                spec = PevSpec(
                    int(row["id"]), float(row["cap_kwh"]), float(row["soc_start"]),
                    float(row["soc_target"]), float(row["soc_max"]), int(row["t_arrive"]),
                    int(row["t_depart"]), float(row["p_max_kw"]), float(row["eta"]), price,
                    float(row.get("alpha") or 1e-4))
                spec.validate(dt_hours)
                pevs.append(spec)
            except (TypeError, ValueError) as exc:
                raise ScenarioError(f"{path}:{line}: {exc}") from exc
    return pevs


def read_curve(path, column: str) -> np.ndarray:
    """Read a ``slot,<column>`` CSV (slots 1-based or hours 0-23) into an array ordered by slot."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "slot" not in reader.fieldnames or column not in reader.fieldnames:
            raise ScenarioError(f"{path}: expected header 'slot,{column}'")
        for line, row in enumerate(reader, start=2):
            try:
                rows.append((int(row["slot"]), float(row[column])))
            except ValueError as exc:
                raise ScenarioError(f"{path}:{line}: {exc}") from exc
    rows.sort()
    return np.array([v for _, v in rows])


def write_curve(path, values, column: str, first_slot: int = 1):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", column])
        for k, v in enumerate(values):
            w.writerow([k + first_slot, repr(float(v))])


# ---------------------------------------------------------------------------
# topologies

def _bfs_relabel(edges, root):
    g = nx.Graph()
    g.add_edges_from(edges)
    order = [root]
    seen = {root}
    q = deque([root])
    while q:
        v = q.popleft()
        for w in sorted(g.neighbors(v)):
            if w not in seen:
                seen.add(w)
                order.append(w)
                q.append(w)
    if len(order) != g.number_of_nodes():
        raise GraphError("edge list is not connected")
    index = {bus: k for k, bus in enumerate(order)}
    return [(index[a], index[b]) for a, b in edges], order


def ieee37_edges(ties: bool = False):
    """Bus-graph edges relabelled 0..35 in BFS order from the feeder head; also returns bus names."""
    lines = list(IEEE37_LINES) + (list(ALT37_TIES) if ties else [])
    return _bfs_relabel(lines, 701)


def radial_tree_edges(n: int, seed: int = 123, max_children: int = 3):
    """Deterministic random radial tree used as a stand-in for larger feeders."""
    rng = np.random.default_rng(seed)
    edges = []
    children = np.zeros(n, dtype=int)
    for v in range(1, n):
        # attach to a recent node so the tree stays long and thin like a feeder
        lo = max(0, v - 6)
        while True:
            parent = int(rng.integers(lo, v))
            if children[parent] < max_children:
                break
            lo = 0
        children[parent] += 1
        edges.append((parent, v))
    return edges


def read_edge_list(path):
    edges = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"from", "to"} <= set(reader.fieldnames):
            raise ScenarioError(f"{path}: expected header 'from,to'")
        for line, row in enumerate(reader, start=2):
            try:
                edges.append((int(row["from"]), int(row["to"])))
            except ValueError as exc:
                raise ScenarioError(f"{path}:{line}: {exc}") from exc
    return edges


def feeder_topology(name: str, n: int | None = None, edge_file=None, dwell: int = 1) -> GraphSchedule:
    """Bidirectional communication graph named after a feeder layout.

    ``ieee37`` (diameter 15) and ``alt37`` (diameter 10) have 36 nodes;
    ``alternating`` switches between the two every ``dwell`` rounds with
    ``tbar = 2 * dwell``.  ``line``, ``ring``, ``complete`` and ``ieee123``
    (a generated radial tree) take ``n``; ``custom`` reads ``edge_file``.
    """
    if name == "ieee37":
        edges, _ = ieee37_edges()
        return GraphSchedule.static(36, edges, tbar=1, name=name)
    if name == "alt37":
        edges, _ = ieee37_edges(ties=True)
        return GraphSchedule.static(36, edges, tbar=1, name=name)
    if name == "alternating":
        e1, _ = ieee37_edges()
        e2, _ = ieee37_edges(ties=True)
        # relabelling may differ once ties are added; map alt37 back to ieee37 labels
        _, order1 = ieee37_edges()
        _, order2 = ieee37_edges(ties=True)
        back = {k: order1.index(bus) for k, bus in enumerate(order2)}
        e2 = [(back[a], back[b]) for a, b in e2]
        return GraphSchedule.switching(36, [e1, e2], dwell=dwell, tbar=2 * dwell, name=name)
    if name in ("line", "ring", "complete", "ieee123"):
        n = n if n is not None else (123 if name == "ieee123" else None)
        if n is None or n < 1:
            raise ScenarioError(f"topology {name!r} needs n >= 1")
        if name == "line":
            edges = [(i, i + 1) for i in range(n - 1)]
        elif name == "ring":
            edges = [(i, (i + 1) % n) for i in range(n)] if n > 2 else [(i, i + 1) for i in range(n - 1)]
        elif name == "complete":
            edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
        else:
            edges = radial_tree_edges(n)
        return GraphSchedule.static(n, edges, tbar=1, name=name)
    if name == "custom":
        if edge_file is None:
            raise ScenarioError("custom topology needs an edge-list file")
        edges = read_edge_list(edge_file)
        nodes = sorted({v for e in edges for v in e})
        if nodes != list(range(len(nodes))):
            raise ScenarioError("custom edge list must use node ids 0..n-1")
        return GraphSchedule.static(len(nodes), edges, tbar=1, name=name)
    raise ScenarioError(f"unknown topology {name!r}")


# ---------------------------------------------------------------------------
# full scenario

@dataclass
class ScenarioConfig:
    n: int = 36
    seed: int = 0
    generator: str = "population"
    topology: str = "ieee37"
    edge_file: str | None = None
    dwell: int = 1
    population: PopulationParams = field(default_factory=PopulationParams)
    price_csv: str | None = None
    baseload_csv: str | None = None
    roster_csv: str | None = None
    household_scale: float = 1.0
    capacity_policy: str = "headroom"
    capacity_margin: float = 0.05
    M_range: tuple = (150.0, 200.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scenario:
    config: ScenarioConfig
    instance: CocInstance
    schedule: GraphSchedule
    baseload: np.ndarray
    M: np.ndarray


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    """Roster, capacity, topology and per-processor ``M_i`` for one experiment."""
    pop = cfg.population
    if cfg.generator == "random":
        inst = random_instance(cfg.n, pop.T, cfg.seed, dt=pop.dt_hours)
        schedule = feeder_topology(cfg.topology, cfg.n, cfg.edge_file, cfg.dwell)
        if schedule.n != cfg.n:
            raise ScenarioError(f"topology {cfg.topology!r} has {schedule.n} nodes, config says n={cfg.n}")
        M = np.random.default_rng([cfg.seed, 1]).uniform(*cfg.M_range, size=cfg.n)
        return Scenario(cfg, inst, schedule, np.zeros(pop.T), M)
    if cfg.generator != "population":
        raise ScenarioError(f"unknown generator {cfg.generator!r} (population, random)")
    price24 = read_curve(cfg.price_csv, "price") if cfg.price_csv else SYNTHETIC_PRICE
    base24 = read_curve(cfg.baseload_csv, "kw") if cfg.baseload_csv else SYNTHETIC_BASELOAD
    price = horizon_curve(price24, pop.T, pop.start_hour)
    baseload = horizon_curve(base24, pop.T, pop.start_hour) * cfg.household_scale * cfg.n
    peak = float(np.max(base24)) * cfg.household_scale * cfg.n
    if cfg.roster_csv:
        pevs = read_roster(cfg.roster_csv, price, pop.dt_hours)
        if len(pevs) != cfg.n:
            raise ScenarioError(f"roster has {len(pevs)} PEVs, config says n={cfg.n}")
    else:
        pevs = sample_population(cfg.n, cfg.seed, pop, price)
    schedule = feeder_topology(cfg.topology, cfg.n, cfg.edge_file, cfg.dwell)
    if schedule.n != cfg.n:
        raise ScenarioError(f"topology {cfg.topology!r} has {schedule.n} nodes, roster has {cfg.n}")
    energy = sum((p.soc_target - p.soc_start) * p.cap_kwh / p.eta for p in pevs)
    L = build_L(baseload, cfg.capacity_policy, cfg.capacity_margin, energy, pop.dt_hours, peak)
    inst = CocInstance(pevs, L, pop.dt_hours)
    rng = np.random.default_rng([cfg.seed, 1])
    M = rng.uniform(*cfg.M_range, size=cfg.n)
    return Scenario(cfg, inst, schedule, baseload, M)


def random_instance(n: int, T: int, seed: int, contended: bool = True, alpha: float | tuple = (0.05, 0.5),
                    dt: float = 1.0) -> CocInstance:
    """Small random instance (used by the property and acceptance suites).

    With ``contended`` the capacity sits between the selfish peak and the
    flat-spread load, so the coupling binds while Slater holds.
    """
    from .solvers import dual_oracle, slater_holds

    rng = np.random.default_rng(seed)
    for _ in range(100):
        price = rng.uniform(0.5, 2.0, T)
        pevs = []
        for i in range(n):
            ta = int(rng.integers(1, T))
            td = int(rng.integers(ta + 1, T + 2))
            pmax = float(rng.uniform(0.5, 1.5))
            cap = float(rng.uniform(1.0, 3.0))
            s0 = float(rng.uniform(0.0, 0.3))
            room = 0.9 * pmax * (td - ta) * dt / cap
            s1 = float(min(s0 + rng.uniform(0.1, 0.6) * room, 1.0))
            smax = float(min(1.0, s1 + rng.uniform(0.0, 0.3)))
            a = float(rng.uniform(*alpha)) if isinstance(alpha, tuple) else float(alpha)
            pevs.append(PevSpec(i, cap, s0, s1, smax, ta, td, pmax, 0.9, price, a))
        probe = CocInstance(pevs, np.full(T, 1e6), dt)
        selfish = sum(dual_oracle(p, r, np.zeros(T)).argmin for p, r in zip(probe.pevs, probe.regions))
        if contended:
            spread = sum(np.where(r.window, (r.e_min + r.e_max) / (2 * r.window.sum() * dt), 0.0)
                         for r in probe.regions)
            hi = float(selfish.max())
            L = np.full(T, float(rng.uniform(0.55, 0.85)) * hi)
            L = np.maximum(L, 1.05 * spread + 0.05)
        else:
            L = selfish + 1.0
        inst = CocInstance(pevs, L, dt)
        if contended and not np.any(selfish > L + 1e-6):
            continue
        if slater_holds(inst):
            return inst
    raise ScenarioError("could not draw a Slater instance")
