"""Convex kernels: the local dual oracle, the penalized master problem and the
centralized reference solvers."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import quadprog

from .geometry import CutSet
from .model import CocInstance, FeasibleRegion, PevSpec, cost

log = logging.getLogger(__name__)

PI_TOL = 1e-9
MU_WIDTH = 1e-12
ENERGY_TOL = 1e-10


class SolverError(RuntimeError):
    pass


class MasterInfeasible(SolverError):
    """The polyhedron of a master problem is empty; cut validity was broken."""


class ContractError(ValueError):
    pass


class NonUniqueWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# separable quadratic over box x energy interval

def waterfill(q: float, g, ub, lo: float, hi: float, dt: float = 1.0):
    """Minimize ``sum(q/2 p_t^2 + g_t p_t)`` s.t. ``0 <= p <= ub``, ``lo <= dt*sum(p) <= hi``.

    For ``q > 0`` the energy multiplier ``mu`` is found by bisection and then
    polished by solving the piecewise-linear energy equation exactly on the
    identified segment.  For ``q == 0`` the slots are filled greedily by
    marginal cost, lowest index first on ties.

    Returns ``(p, tied)`` where ``tied`` flags a non-unique minimizer.
    """
    g = np.asarray(g, dtype=float)
    ub = np.asarray(ub, dtype=float)
    cap = ub.sum() * dt
    if lo > cap + 1e-12 or lo > hi:
        raise SolverError("empty feasible region")
    hi = min(hi, cap)
    if q > 0:
        return _waterfill_strict(q, g, ub, lo, hi, dt), False
    return _fill_linear(g, ub, lo, hi, dt)


def _profile(q, g, ub, mu, dt):
    return np.clip(-(g + mu * dt) / q, 0.0, ub)


def _waterfill_strict(q, g, ub, lo, hi, dt):
    p = _profile(q, g, ub, 0.0, dt)
    energy = p.sum() * dt
    if lo - ENERGY_TOL <= energy <= hi + ENERGY_TOL and lo <= energy <= hi:
        return p
    target = hi if energy > hi else lo
    active = ub > 0
    if energy > hi:
        a, b = 0.0, float(np.max(-g[active] / dt)) + 1.0
    else:
        a, b = float(np.min(-(q * ub[active] + g[active]) / dt)) - 1.0, 0.0
    # sum(p(mu)) is nonincreasing in mu
    for _ in range(200):
        mid = 0.5 * (a + b)
        if _profile(q, g, ub, mid, dt).sum() * dt > target:
            a = mid
        else:
            b = mid
        if b - a <= MU_WIDTH * max(1.0, abs(a), abs(b)):
            break
    mu = 0.5 * (a + b)
    p = _profile(q, g, ub, mu, dt)
    raw = -(g + mu * dt) / q
    free = active & (raw > 0) & (raw < ub)
    if free.any():
        at_ub = active & (raw >= ub)
        mu_exact = (q * (ub[at_ub].sum() - target / dt) - g[free].sum()) / (free.sum() * dt)
        p_exact = _profile(q, g, ub, mu_exact, dt)
        if abs(p_exact.sum() * dt - target) <= abs(p.sum() * dt - target):
            p = p_exact
    return p


def _fill_linear(g, ub, lo, hi, dt):
    order = np.argsort(g, kind="stable")
    p = np.zeros_like(g)
    energy = 0.0
    marginal = None
    for t in order:
        if ub[t] <= 0:
            continue
        if g[t] < 0:
            room = hi - energy
        elif energy < lo:
            room = lo - energy
        else:
            break
        take = min(ub[t], max(room, 0.0) / dt)
        if take <= 0:
            break
        p[t] = take
        energy += take * dt
        marginal = t
    tied = False
    if marginal is not None:
        # an open slot priced like the marginal one could take its energy
        peers = (ub > 0) & (p < ub)
        peers[marginal] = False
        tied = bool(np.any(np.abs(g[peers] - g[marginal]) <= 1e-12 * (1 + abs(g[marginal]))))
    if hi > lo and np.any(np.abs(g[ub > 0]) <= 1e-15):
        tied = True
    return p, tied


# ---------------------------------------------------------------------------
# local dual oracle

@dataclass(frozen=True)
class OracleResult:
    value: float
    argmin: np.ndarray
    shift_applied: bool
    tied: bool = False


def dual_oracle(spec: PevSpec, region: FeasibleRegion, pi, is_istar: bool = False,
                L=None) -> OracleResult:
    """Evaluate ``U_i(pi) = min_{p in P_i} f_i(p) + pi.p`` (minus ``pi.L`` for the L-holder)."""
    pi = np.asarray(pi, dtype=float)
    if pi.shape != spec.price.shape:
        raise ContractError("pi has the wrong length")
    if np.any(pi < -PI_TOL):
        raise ContractError(f"negative price multiplier {pi.min():.3e}")
    dt = region.dt
    g = spec.price * dt + pi
    p, tied = waterfill(spec.alpha, g, region.p_max, region.e_min, region.e_max, dt)
    value = cost(spec, p, dt) + float(pi @ p)
    if is_istar:
        if L is None:
            raise ContractError("the L-holder needs L")
        value -= float(pi @ np.asarray(L, dtype=float))
    return OracleResult(value, p, bool(is_istar), tied)


class LocalOracle:
    """A processor's private view: its PEV data, and ``L`` if it is the L-holder."""

    def __init__(self, spec: PevSpec, region: FeasibleRegion, is_istar: bool = False, L=None):
        self.spec = spec
        self.region = region
        self.is_istar = is_istar
        self.L = None if L is None else np.asarray(L, dtype=float)

    def __call__(self, pi) -> OracleResult:
        return dual_oracle(self.spec, self.region, np.maximum(pi, 0.0), self.is_istar, self.L)

    def f(self, p) -> float:
        return cost(self.spec, p, self.region.dt)

    @classmethod
    def for_instance(cls, inst: CocInstance, k: int) -> "LocalOracle":
        spec = inst.pevs[k]
        istar = spec.id == inst.i_star
        return cls(spec, inst.regions[k], istar, inst.L if istar else None)


def surrogate_objective(z, n_pi: int, rho: float) -> float:
    """``J(z) = e.z - rho |z|^2``."""
    z = np.asarray(z, dtype=float)
    return float(z[n_pi:].sum() - rho * (z @ z))


# ---------------------------------------------------------------------------
# master problem: projection onto a polyhedron

@dataclass(frozen=True)
class MasterResult:
    z: np.ndarray
    J: float
    active: np.ndarray
    lam: np.ndarray
    kkt: float


def kkt_residual(A, b, y, z, lam) -> float:
    """KKT residual of ``min 1/2|z-y|^2 s.t. A z <= b`` on row-normalized constraints."""
    if len(b) == 0:
        return float(np.max(np.abs(z - y), initial=0.0))
    norms = np.linalg.norm(A, axis=1)
    An, bn, ln = A / norms[:, None], b / norms, lam * norms
    viol = An @ z - bn
    return float(max(np.max(np.abs(z - y + An.T @ ln)),
                     np.max(viol, initial=0.0),
                     np.max(-ln, initial=0.0),
                     np.max(np.abs(ln * viol))))


def nnls(E, f, maxiter: int | None = None, start=None):
    """Lawson-Hanson active-set solver for ``min |E w - f|`` s.t. ``w >= 0``.

    ``start`` optionally seeds the passive set (boolean mask or indices).
    """
    E = np.asarray(E, dtype=float)
    f = np.asarray(f, dtype=float)
    m, n = E.shape
    maxiter = maxiter or 3 * n + 30
    tol = 10 * np.finfo(float).eps * max(m, n) * max(1.0, np.linalg.norm(E, 1))
    w = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    if start is not None:
        passive[start] = True
        while passive.any():
            idx = np.flatnonzero(passive)
            s = np.linalg.lstsq(E[:, idx], f, rcond=None)[0]
            if np.all(s > tol):
                w[idx] = s
                break
            passive[idx[np.argmin(s)]] = False
    grad = E.T @ (f - E @ w)
    for _ in range(maxiter):
        cand = np.where(passive, -np.inf, grad)
        j = int(np.argmax(cand))
        if cand[j] <= tol:
            break
        passive[j] = True
        while True:
            idx = np.flatnonzero(passive)
            s = np.zeros(n)
            s[idx] = np.linalg.lstsq(E[:, idx], f, rcond=None)[0]
            if np.all(s[idx] > 0):
                w = s
                break
            neg = idx[s[idx] <= 0]
            step = np.min(w[neg] / (w[neg] - s[neg]))
            w = w + step * (s - w)
            drop = passive & (w <= tol)
            drop[neg[np.argmin(w[neg])]] = True
            passive &= ~drop
            w[~passive] = 0.0
            if not passive.any():
                break
        grad = E.T @ (f - E @ w)
    else:
        log.debug("nnls hit the iteration cap")
    return w, float(np.linalg.norm(E @ w - f))


def project_polyhedron(A, b, y, z_hint=None):
    """Euclidean projection of ``y`` onto ``{z : A z <= b}``.

    Uses a dual active-set QP; if that fails or leaves a KKT residual, falls
    back to the least-distance reduction solved by NNLS (seeded with the rows
    tight at ``z_hint``).  A residual still above tolerance after that gets a
    primal active-set clean-up.
    Returns ``(z, lam)`` with ``z = y - A.T @ lam``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    y = np.asarray(y, dtype=float)
    m, d = A.shape
    if m == 0:
        return y.copy(), np.zeros(0)
    norms = np.linalg.norm(A, axis=1)
    An = A / norms[:, None]
    bn = b / norms
    h = bn - An @ y
    if np.all(h >= 0):
        return y.copy(), np.zeros(m)
    scale = float(np.max(np.abs(h)))
    E = np.vstack([-An.T, (-h / scale)[None, :]])
    f = np.zeros(d + 1)
    f[-1] = 1.0
    best = _dual_active_set(An, bn, y)
    tol = 1e-9 * (1.0 + np.abs(y).max())
    if best is None or best[0] > tol:
        start = None
        if z_hint is not None:
            hint = np.abs(An @ np.asarray(z_hint, dtype=float) - bn) <= 1e-9 * (1 + np.abs(bn))
            start = np.flatnonzero(hint)
        for cand in (start, None):
            try:
                alt = _ldp(An, bn, y, E, f, scale, cand)
            except MasterInfeasible:
                if best is None and cand is None:
                    raise
                continue
            if best is None or alt[0] < best[0]:
                best = alt
            if best[0] <= tol:
                break
    if best[0] > tol:
        refined = _refine(An, bn, y, best[2])
        if refined[0] < best[0]:
            best = refined
    _, z, lam_n = best
    return z, lam_n / norms


def _dual_active_set(An, bn, y):
    # Goldfarb-Idnani dual active-set QP; None when it gives up on a degenerate set
    try:
        z, _, _, _, lam, _ = quadprog.solve_qp(np.eye(len(y)), y, -An.T, -bn, 0)
    except ValueError:
        return None
    return kkt_residual(An, bn, y, z, lam), z, lam


def _ldp(An, bn, y, E, f, scale, start):
    w, _ = nnls(E, f, start=start)
    r = E @ w - f
    if -r[-1] <= 1e-12:
        raise MasterInfeasible("least-distance subproblem reports an empty polyhedron")
    lam_n = w / (-r[-1]) * scale
    z = y - An.T @ lam_n
    return kkt_residual(An, bn, y, z, lam_n), z, lam_n


def _refine(An, bn, y, lam, iters: int = 200):
    """Primal active-set clean-up started from an approximate multiplier vector."""
    m = len(bn)
    W = list(np.flatnonzero(lam > 1e-10 * max(1.0, lam.max(initial=0.0))))
    best = None
    for _ in range(iters):
        lam_new = np.zeros(m)
        if W:
            Aw = An[W]
            lw = np.linalg.lstsq(Aw @ Aw.T, Aw @ y - bn[W], rcond=None)[0]
            if lw.min() < -1e-12 * max(1.0, np.abs(lw).max()):
                W.pop(int(np.argmin(lw)))
                continue
            lam_new[W] = np.maximum(lw, 0.0)
        z = y - An.T @ lam_new
        res = kkt_residual(An, bn, y, z, lam_new)
        if best is None or res < best[0]:
            best = (res, z, lam_new)
        viol = An @ z - bn
        j = int(np.argmax(viol))
        if viol[j] <= 1e-12 * (1.0 + abs(bn[j])) or j in W:
            break
        W.append(j)
    return best


def master_solve(cuts: CutSet, rho: float, z_hint=None) -> MasterResult:
    """Maximize ``e.z - rho |z|^2`` over the polyhedron of ``cuts``.

    The maximizer is the projection of ``e/(2 rho)`` onto the polyhedron.
    """
    if rho <= 0:
        raise ContractError("rho must be positive")
    y = np.zeros(cuts.dim)
    y[cuts.n_pi:] = 1.0 / (2.0 * rho)
    z, lam = project_polyhedron(cuts.A, cuts.b, y, z_hint)
    kkt = kkt_residual(cuts.A, cuts.b, y, z, lam)
    if kkt > 1e-6 * (1.0 + np.abs(y).max()):
        raise MasterInfeasible(f"master projection failed (KKT residual {kkt:.2e})")
    active = np.flatnonzero(lam > 0)
    return MasterResult(z, surrogate_objective(z, cuts.n_pi, rho), active, lam, kkt)


# ---------------------------------------------------------------------------
# primal recovery and centralized reference

def primal_recovery(pi_star, inst: CocInstance):
    """Profiles ``argmin U_i(pi_star)`` for every PEV, plus the capacity residual.

    Returns ``(profiles, residual)``; ``residual`` is ``max(sum_i p_i - L)``.
    """
    pi_star = np.asarray(pi_star, dtype=float)
    profiles = []
    tied = False
    for k in range(inst.n):
        spec = inst.pevs[k]
        res = dual_oracle(spec, inst.regions[k], np.maximum(pi_star, 0.0))
        tied |= res.tied
        if spec.alpha == 0:
            tied = True
        profiles.append(res.argmin)
    if tied:
        warnings.warn("cost not strictly convex: recovered profiles use a lowest-slot tie-break",
                      NonUniqueWarning, stacklevel=2)
    profiles = np.array(profiles).reshape(inst.n, inst.T)
    residual = float(np.max(profiles.sum(axis=0) - inst.L)) if inst.n else 0.0
    return profiles, residual


def oracles_for(inst: CocInstance) -> list:
    return [LocalOracle.for_instance(inst, k) for k in range(inst.n)]


def surrogate_value(pi, inst: CocInstance, rho: float, oracles=None):
    """Best penalized surrogate objective reachable at price ``pi``.

    With ``pi`` fixed the optimal ``u_i`` is ``min(U_i(pi), 1/(2 rho))``, so the
    returned point lies in the feasible set and its objective is a lower bound
    on the surrogate optimum.  Returns ``(J, z)``.
    """
    pi = np.maximum(np.asarray(pi, dtype=float), 0.0)
    oracles = oracles or oracles_for(inst)
    u = np.array([o(pi).value for o in oracles])
    u = np.minimum(u, 1.0 / (2 * rho))
    z = np.concatenate([pi, u])
    return surrogate_objective(z, inst.T, rho), z


@dataclass
class CentralResult:
    J_star: float
    z_star: np.ndarray
    pi_star: np.ndarray
    profiles: np.ndarray
    cost: float
    coupling_dual: np.ndarray
    kkt: float

    def to_json(self) -> dict:
        return {"J_star": self.J_star, "z_star": self.z_star.tolist(), "pi_star": self.pi_star.tolist(),
                "profiles": self.profiles.tolist(), "cost": self.cost,
                "coupling_dual": self.coupling_dual.tolist(), "kkt": self.kkt}

    @classmethod
    def from_json(cls, d: dict) -> "CentralResult":
        return cls(d["J_star"], np.array(d["z_star"]), np.array(d["pi_star"]), np.array(d["profiles"]),
                   d["cost"], np.array(d["coupling_dual"]), d["kkt"])


def _cvx():
    import cvxpy as cp
    return cp


def slater_margin(inst: CocInstance) -> float:
    """Largest ``s`` such that relatively interior profiles keep ``sum p <= L - s``.

    Positive means Slater's condition holds.  Slots outside a PEV's window are
    fixed at zero and do not count toward interiority.
    """
    cp = _cvx()
    if inst.n == 0:
        return float(np.min(inst.L, initial=np.inf))
    s = cp.Variable()
    P = cp.Variable((inst.n, inst.T))
    cons = [cp.sum(P, axis=0) + s <= inst.L, s <= 1e3]
    for k, r in enumerate(inst.regions):
        w = r.window
        cons.append(P[k, ~w] == 0) if (~w).any() else None
        cons += [P[k, w] >= s, P[k, w] <= r.p_max[w] - s]
        energy = cp.sum(P[k]) * r.dt
        if r.e_max > r.e_min:
            cons += [energy >= r.e_min + s, energy <= r.e_max - s]
        else:
            cons.append(energy == r.e_min)
    prob = cp.Problem(cp.Maximize(s), [c for c in cons if c is not None])
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return -np.inf
    return float(s.value)


def slater_holds(inst: CocInstance) -> bool:
    from .model import slater_check
    return slater_check(inst) or slater_margin(inst) > 1e-9


def solve_primal(inst: CocInstance):
    """Solve the coupled charging QP directly; returns ``(profiles, cost, coupling_dual)``."""
    cp = _cvx()
    P = cp.Variable((inst.n, inst.T))
    obj = 0
    cons = []
    for k, (spec, r) in enumerate(zip(inst.pevs, inst.regions)):
        obj += spec.price @ P[k] * r.dt + 0.5 * spec.alpha * cp.sum_squares(P[k])
        cons += [P[k] >= 0, P[k] <= r.p_max,
                 cp.sum(P[k]) * r.dt >= r.e_min, cp.sum(P[k]) * r.dt <= r.e_max]
    coupling = cp.sum(P, axis=0) <= inst.L
    prob = cp.Problem(cp.Minimize(obj), cons + [coupling])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11,
               max_iter=500)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise SolverError(f"centralized QP status {prob.status}")
    profiles = np.clip(P.value, 0.0, None)
    profiles = np.minimum(profiles, np.array([r.p_max for r in inst.regions]))
    return profiles, float(sum(cost(s, p, inst.dt_hours) for s, p in zip(inst.pevs, profiles))), \
        np.maximum(np.asarray(coupling.dual_value, dtype=float), 0.0)


def solve_surrogate(inst: CocInstance, rho: float):
    """Solve the penalized surrogate with every ``U_i`` written through its QP dual.

    Returns the optimal price vector.  The inner dual of ``U_i`` is
    ``max -alpha/2 |q|^2 - nu.ub + m_lo e_min - m_hi e_max`` subject to
    ``c dt + pi + nu + (m_hi - m_lo) dt - alpha q >= 0``.
    """
    cp = _cvx()
    T, n = inst.T, inst.n
    pi = cp.Variable(T, nonneg=True)
    u = cp.Variable(n)
    cons = []
    for k, (spec, r) in enumerate(zip(inst.pevs, inst.regions)):
        nu = cp.Variable(T, nonneg=True)
        mlo = cp.Variable(nonneg=True)
        mhi = cp.Variable(nonneg=True)
        value = -nu @ r.p_max + mlo * r.e_min - mhi * r.e_max
        grad = spec.price * r.dt + pi + nu + (mhi - mlo) * r.dt
        if spec.alpha > 0:
            q = cp.Variable(T)
            value = value - 0.5 * spec.alpha * cp.sum_squares(q)
            grad = grad - spec.alpha * q
        if spec.id == inst.i_star:
            value = value - pi @ inst.L
        cons += [grad >= 0, u[k] <= value]
    obj = cp.sum(u) - rho * (cp.sum_squares(pi) + cp.sum_squares(u))
    prob = cp.Problem(cp.Maximize(obj), cons)
    # Phi is re-evaluated with the exact oracles afterwards, so an
    # "inaccurate" interior-point finish still yields a valid lower bound.
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Solution may be inaccurate")
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12,
                   max_iter=500)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise SolverError(f"surrogate solve status {prob.status}")
    if prob.status != "optimal":
        log.debug("surrogate solve finished %s", prob.status)
    return np.maximum(np.asarray(pi.value, dtype=float), 0.0)


def centralized_solve(inst: CocInstance, rho: float = 1e-4, tol: float = 1e-6,
                      check_slater: bool = True) -> CentralResult:
    """Primal and surrogate ground truth for an instance.

    ``J_star`` is the penalized surrogate objective evaluated with the exact
    oracles at the solver's price vector, hence a certified lower bound on the
    true surrogate optimum.
    """
    if check_slater and not slater_holds(inst):
        raise SolverError("Slater's condition could not be certified")
    profiles, total, dual = solve_primal(inst)
    pi = solve_surrogate(inst, rho)
    J, z = surrogate_value(pi, inst, rho)
    kkt = _primal_kkt(inst, profiles, dual)
    if kkt > tol * (1 + abs(total)):
        log.warning("centralized KKT residual %.2e above tolerance %.2e", kkt, tol)
    return CentralResult(J, z, pi, profiles, total, dual, kkt)


def _primal_kkt(inst: CocInstance, profiles, dual) -> float:
    """Stationarity of each profile against the coupling dual, plus feasibility."""
    res = max(0.0, float(np.max(profiles.sum(axis=0) - inst.L)))
    res = max(res, float(np.max(np.abs(dual * np.minimum(inst.L - profiles.sum(axis=0), 0)), initial=0)))
    for k, spec in enumerate(inst.pevs):
        best = dual_oracle(spec, inst.regions[k], dual)
        mine = cost(spec, profiles[k], inst.dt_hours) + dual @ profiles[k]
        res = max(res, mine - best.value)
    return res
