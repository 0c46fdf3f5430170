"""Comparison strategies: uncoordinated charging modes and a sharing-form ADMM."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import CocInstance, capacity_violation, total_cost
from .solvers import dual_oracle, waterfill

log = logging.getLogger(__name__)


@dataclass
class BaselineResult:
    name: str
    profiles: np.ndarray
    cost: float
    violation: float
    rounds: int | None = None
    converged: bool = True
    history: list = field(default_factory=list)


def _result(name, inst, profiles, **kw) -> BaselineResult:
    profiles = np.asarray(profiles, dtype=float).reshape(inst.n, inst.T)
    return BaselineResult(name, profiles, total_cost(inst, profiles), capacity_violation(inst, profiles), **kw)


def mode1_greedy(inst: CocInstance) -> BaselineResult:
    """Charge at full power from arrival until the required energy is in (last slot fractional)."""
    out = np.zeros((inst.n, inst.T))
    for k, r in enumerate(inst.regions):
        need = r.e_min
        for t in np.flatnonzero(r.window):
            if need <= 0:
                break
            step = min(r.p_max[t], need / r.dt)
            out[k, t] = step
            need -= step * r.dt
    return _result("mode1", inst, out)


def mode2_selfish(inst: CocInstance) -> BaselineResult:
    """Each PEV minimizes its own cost over its region, ignoring the feeder limit."""
    out = [dual_oracle(s, r, np.zeros(inst.T)).argmin for s, r in zip(inst.pevs, inst.regions)]
    return _result("mode2", inst, out)


def admm_solve(inst: CocInstance, rho_admm: float = 1.0, tol: float = 1e-6, max_iters: int = 5000,
               balance: bool = True, balance_every: int = 10, balance_until: int = 200) -> BaselineResult:
    """Sharing ADMM for ``min sum f_i(x_i)`` s.t. ``x_i in P_i``, ``sum x_i <= L``.

    Starts from the selfish profiles.  Each round every PEV takes a proximal
    step over its own region and a coordinator projects the average onto
    ``{xbar <= L/n}``.  The penalty adapts by residual balancing every
    ``balance_every`` rounds up to ``balance_until`` (adapting forever can
    cycle).  Stops when both primal and dual residuals fall below ``tol``;
    ``rounds`` counts the exchange rounds used.
    """
    n, T = inst.n, inst.T
    if n == 0:
        return _result("admm", inst, np.zeros((0, T)), rounds=0)
    x = mode2_selfish(inst).profiles.copy()
    xbar = x.mean(axis=0)
    zbar = np.minimum(xbar, inst.L / n)
    u = np.zeros(T)
    rho = float(rho_admm)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        v = x - xbar + zbar - u
        for k, (s, r) in enumerate(zip(inst.pevs, inst.regions)):
            g = s.price * r.dt - rho * v[k]
            x[k], _ = waterfill(s.alpha + rho, g, r.p_max, r.e_min, r.e_max, r.dt)
        xbar = x.mean(axis=0)
        z_old = zbar
        zbar = np.minimum(u + xbar, inst.L / n)
        u = u + xbar - zbar
        r_norm = float(np.sqrt(n) * np.linalg.norm(xbar - zbar))
        s_norm = float(rho * np.sqrt(n) * np.linalg.norm(zbar - z_old))
        history.append({"round": it, "cost": total_cost(inst, x), "r": r_norm, "s": s_norm, "rho": rho})
        if r_norm < tol and s_norm < tol:
            converged = True
            break
        if balance and it % balance_every == 0 and it <= balance_until:
            if r_norm > 10 * s_norm:
                rho *= 2.0
                u /= 2.0
            elif s_norm > 10 * r_norm:
                rho /= 2.0
                u *= 2.0
    if not converged:
        log.warning("ADMM stopped at the iteration cap (%d)", max_iters)
    return _result("admm", inst, x, rounds=it, converged=converged, history=history)
