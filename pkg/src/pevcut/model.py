"""PEV battery data, private feasible charging regions and the coupled problem."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ModelError(ValueError):
    """Raised for malformed PEV specs or instances."""


@dataclass(frozen=True)
class PevSpec:
    """Private battery and availability data of one PEV.

    Slots are 1-based.  The availability window is ``t_arrive <= t < t_depart``,
    so a PEV leaving at the end of a ``T``-slot horizon has ``t_depart = T + 1``.
    """

    id: int
    cap_kwh: float
    soc_start: float
    soc_target: float
    soc_max: float
    t_arrive: int
    t_depart: int
    p_max_kw: float
    eta: float
    price: np.ndarray
    alpha: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "price", np.asarray(self.price, dtype=float))
        if self.price.ndim != 1:
            raise ModelError("price must be a vector")

    @property
    def T(self) -> int:
        return len(self.price)

    def validate(self, dt_hours: float = 1.0) -> None:
        T = self.T
        if not 0.0 <= self.soc_start <= self.soc_target <= self.soc_max <= 1.0:
            raise ModelError(f"pev {self.id}: SOC ordering violated")
        if not 1 <= self.t_arrive < self.t_depart <= T + 1:
            raise ModelError(f"pev {self.id}: bad window [{self.t_arrive}, {self.t_depart})")
        if self.p_max_kw <= 0 or self.cap_kwh <= 0 or not 0 < self.eta <= 1:
            raise ModelError(f"pev {self.id}: nonpositive power/capacity or bad efficiency")
        if self.alpha < 0:
            raise ModelError(f"pev {self.id}: alpha must be >= 0")
        supply = self.eta * self.p_max_kw * (self.t_depart - self.t_arrive) * dt_hours
        demand = (self.soc_target - self.soc_start) * self.cap_kwh
        if supply < demand - 1e-12:
            raise ModelError(f"pev {self.id}: demand {demand:.3f} kWh exceeds deliverable {supply:.3f} kWh")


@dataclass(frozen=True)
class FeasibleRegion:
    """Box x energy-interval set of admissible charging profiles.

    ``p_max`` is per slot and zero outside the window; energy bounds apply to
    ``sum(p) * dt`` (grid-side kWh, already divided by the efficiency).
    """

    e_min: float
    e_max: float
    p_max: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "p_max", np.asarray(self.p_max, dtype=float))
        if self.e_min < 0 or self.e_min > self.e_max:
            raise ModelError("need 0 <= e_min <= e_max")
        if np.any(self.p_max < 0):
            raise ModelError("p_max must be nonnegative")
        if self.e_min > self.p_max.sum() * self.dt + 1e-12:
            raise ModelError("region is empty: e_min exceeds window capacity")

    @property
    def T(self) -> int:
        return len(self.p_max)

    @property
    def window(self) -> np.ndarray:
        return self.p_max > 0

    @classmethod
    def from_window(cls, T: int, window: Sequence[int], p_max: float, e_min: float, e_max: float,
                    dt: float = 1.0) -> "FeasibleRegion":
        """Build a region from 1-based active slots and a scalar power limit."""
        ub = np.zeros(T)
        for t in window:
            ub[t - 1] = p_max
        return cls(e_min, e_max, ub, dt)

    @classmethod
    def from_spec(cls, spec: PevSpec, dt: float = 1.0) -> "FeasibleRegion":
        spec.validate(dt)
        ub = np.zeros(spec.T)
        ub[spec.t_arrive - 1:spec.t_depart - 1] = spec.p_max_kw
        e_min = (spec.soc_target - spec.soc_start) * spec.cap_kwh / spec.eta
        e_max = (spec.soc_max - spec.soc_start) * spec.cap_kwh / spec.eta
        # the upper SOC bound may exceed what the window can deliver; keep it
        # tight so that the region stays compact and its midpoint meaningful
        e_max = min(e_max, ub.sum() * dt)
        e_min = min(e_min, e_max)
        return cls(e_min, e_max, ub, dt)


@dataclass(frozen=True)
class CocInstance:
    """Coordinated charging problem: private PEVs sharing a feeder limit ``L``."""

    pevs: tuple
    L: np.ndarray
    dt_hours: float = 1.0
    i_star: int | None = None
    regions: tuple = field(init=False, repr=False)

    def __post_init__(self):
        pevs = tuple(self.pevs)
        object.__setattr__(self, "pevs", pevs)
        object.__setattr__(self, "L", np.asarray(self.L, dtype=float))
        if np.any(self.L < 0):
            raise ModelError("L must be nonnegative")
        ids = [p.id for p in pevs]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate PEV ids")
        for p in pevs:
            if p.T != self.T:
                raise ModelError(f"pev {p.id}: price length {p.T} != T={self.T}")
        if pevs:
            i_star = min(ids) if self.i_star is None else self.i_star
            if i_star not in ids:
                raise ModelError(f"i_star {i_star} is not a PEV id")
            object.__setattr__(self, "i_star", i_star)
        regions = tuple(FeasibleRegion.from_spec(p, self.dt_hours) for p in pevs)
        object.__setattr__(self, "regions", regions)

    @property
    def T(self) -> int:
        return len(self.L)

    @property
    def n(self) -> int:
        return len(self.pevs)

    @property
    def dim(self) -> int:
        return self.T + self.n

    def index_of(self, pev_id: int) -> int:
        for k, p in enumerate(self.pevs):
            if p.id == pev_id:
                return k
        raise KeyError(pev_id)

    @property
    def istar_index(self) -> int:
        return self.index_of(self.i_star)


def cost(spec: PevSpec, p, dt: float = 1.0) -> float:
    """Charging cost ``c.p*dt + alpha/2 |p|^2`` of one profile."""
    p = np.asarray(p, dtype=float)
    if p.shape != spec.price.shape:
        raise ModelError(f"profile length {p.shape} does not match horizon {spec.price.shape}")
    return float(spec.price @ p * dt + 0.5 * spec.alpha * (p @ p))


def total_cost(inst: CocInstance, profiles) -> float:
    return sum(cost(s, p, inst.dt_hours) for s, p in zip(inst.pevs, profiles))


def contains(region: FeasibleRegion, p, tol: float = 1e-9) -> bool:
    p = np.asarray(p, dtype=float)
    if p.shape != region.p_max.shape:
        return False
    if np.any(p < -tol) or np.any(p > region.p_max + tol):
        return False
    energy = p.sum() * region.dt
    return bool(region.e_min - tol <= energy <= region.e_max + tol)


def midpoint_profile(region: FeasibleRegion) -> np.ndarray:
    """Flat profile delivering the middle of the energy interval over the window."""
    w = region.window
    p = np.zeros(region.T)
    if not w.any():
        return p
    level = (region.e_min + region.e_max) / (2 * w.sum() * region.dt)
    p[w] = np.minimum(level, region.p_max[w])
    return p


def slater_check(inst: CocInstance) -> bool:
    """Sufficient certificate for strict feasibility of the coupling constraint.

    Uses the flat midpoint profile of every PEV; it must sit strictly inside
    ``(0, p_max)`` on the window and the aggregate must stay strictly below
    ``L``.  ``False`` is inconclusive; :func:`pevcut.solvers.slater_margin`
    decides exactly with an LP.
    """
    if inst.n == 0:
        return True
    agg = np.zeros(inst.T)
    for region in inst.regions:
        p = midpoint_profile(region)
        w = region.window
        if np.any(p[w] <= 0) or np.any(p[w] >= region.p_max[w]):
            return False
        agg += p
    return bool(np.all(agg < inst.L))


def aggregate(profiles) -> np.ndarray:
    return np.sum(np.asarray(profiles, dtype=float), axis=0)


def capacity_violation(inst: CocInstance, profiles) -> float:
    """Largest per-slot excess of the aggregate profile over ``L`` (0 if none)."""
    if len(profiles) == 0:
        return 0.0
    return float(max(0.0, np.max(aggregate(profiles) - inst.L)))
