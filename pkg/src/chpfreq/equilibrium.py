"""Steady states after step disturbances, and the power-sharing problems they solve.

Two independent routes are provided:

* closed-form equilibria derived from the controller fixed points
  (:func:`mode1_equilibrium`, :func:`mode2_equilibrium`);
* diagonal quadratic programs with a single balance constraint, solved
  analytically (:func:`solve_qp`) or by bisection on the multiplier
  (:func:`solve_qp_numeric`).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .dynamics import CoupledModel, Loads
from .netmodel import CombinedSystem, HeatArea, PumpCoupling, require_valid


class UnbalancedError(ValueError):
    """No controllable element can absorb the disturbance."""


class ModeError(ValueError):
    pass


class InfeasibleError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


class InconsistentInjectionError(ValueError):
    pass


class SecurityConstraintError(ValueError):
    """Equilibrium angles violate |eta*| < pi/2 or no power flow exists."""


# ---------------------------------------------------------------------------
# QP with one equality constraint
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QPSpec:
    """min 0.5 * sum(cost_i x_i^2)  s.t.  sum(coef_i x_i) = rhs."""

    labels: tuple[str, ...]
    costs: np.ndarray
    coefs: np.ndarray
    rhs: float

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "costs", np.asarray(self.costs, dtype=float))
        object.__setattr__(self, "coefs", np.asarray(self.coefs, dtype=float))
        if not (len(self.labels) == self.costs.size == self.coefs.size):
            raise ValueError("labels, costs and coefs must have equal length")
        if np.any(self.costs <= 0):
            raise ValueError("all diagonal costs must be > 0")


@dataclass
class QPSolution:
    labels: tuple[str, ...]
    x: np.ndarray
    lam: float

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.labels, self.x.tolist()))

    def residual(self, spec: QPSpec) -> float:
        return float(spec.coefs @ self.x - spec.rhs)


def solve_qp(spec: QPSpec) -> QPSolution:
    """Analytic KKT solution.

    Stationarity Q x + c*lam = 0 gives x = -c*lam/Q; the constraint then fixes
    lam = -rhs / sum(c^2/Q).
    """
    if not spec.labels:
        raise InfeasibleError("QP has no variables")
    w = float(np.sum(spec.coefs**2 / spec.costs))
    if w == 0.0:
        if spec.rhs == 0.0:
            return QPSolution(spec.labels, np.zeros(len(spec.labels)), 0.0)
        raise InfeasibleError("balance constraint has no active variable")
    lam = -spec.rhs / w
    return QPSolution(spec.labels, -spec.coefs * lam / spec.costs, lam)


def solve_qp_numeric(spec: QPSpec, tol: float = 1e-10, bound: float = 1e15) -> QPSolution:
    """Bisection on the multiplier of the balance constraint.

    For fixed lam each variable minimizes 0.5*Q x^2 + lam*c*x independently;
    the constraint residual is then monotone non-increasing in lam.
    """
    if not spec.labels:
        raise InfeasibleError("QP has no variables")
    Q, c, b = spec.costs, spec.coefs, spec.rhs

    def primal(lam):
        return -(lam * c) / Q

    def resid(lam):
        return float(c @ primal(lam) - b)

    lo, hi = -1.0, 1.0
    while resid(lo) < 0.0:
        lo *= 2.0
        if abs(lo) > bound:
            raise NumericFailure("could not bracket the multiplier from below")
    while resid(hi) > 0.0:
        hi *= 2.0
        if abs(hi) > bound:
            raise NumericFailure("could not bracket the multiplier from above")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if resid(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    lam = lo if abs(resid(lo)) <= abs(resid(hi)) else hi
    if abs(resid(lam)) >= tol * max(1.0, abs(b)):
        raise NumericFailure(f"bisection stalled with residual {resid(lam):.3e}")
    return QPSolution(spec.labels, primal(lam), lam)


# ---------------------------------------------------------------------------
# sharing problems
# ---------------------------------------------------------------------------


def _gens(system):
    return [b for b in system.buses if b.generator is not None]


def _heat_total(area: HeatArea, dH: dict) -> float:
    return sum(e.load_base for e in area.edges) + sum(dH.get(e.id, 0.0) for e in area.edges)


def electric_sharing_qp(system: CombinedSystem, dP: dict) -> QPSpec:
    """Generation / Mode-1 pump / damping allocation of an electric step."""
    labels, costs, coefs = [], [], []
    for b in _gens(system):
        labels.append(f"pG_{b.id}")
        costs.append(b.generator.cost)
        coefs.append(1.0)
    for p in system.pumps:
        if p.mode == 1:
            labels.append(f"pP_{p.id}")
            costs.append(1.0 / p.a1)
            coefs.append(-1.0)
    for b in system.buses:
        if b.D > 0:
            labels.append(f"pU_{b.id}")
            costs.append(1.0 / b.D)
            coefs.append(-1.0)
    return QPSpec(tuple(labels), np.array(costs), np.array(coefs), float(sum(dP.values())))


def heat_sharing_qp(system: CombinedSystem, area_id: str, dH: dict, hP: dict) -> QPSpec:
    """Heat-source allocation in one area given the pump heat output."""
    area = system.area(area_id)
    src = area.edges_with_role("source")
    rhs = _heat_total(area, dH) - sum(hP.get(e.id, 0.0) for e in area.edges)
    return QPSpec(
        tuple(f"hG_{e.id}" for e in src),
        np.array([e.source.cost for e in src]),
        np.ones(len(src)),
        float(rhs),
    )


def _single_mode2_pumps(system) -> dict[str, PumpCoupling]:
    out = {}
    for p in system.pumps:
        if p.mode != 2:
            continue
        if p.area in out:
            raise ModeError(
                f"area {p.area!r} has more than one Mode-2 pump; the individual pump split "
                "is not fixed by the aggregate balances"
            )
        out[p.area] = p
    return out


def joint_sharing_qp(system: CombinedSystem, dP: dict, dH: dict) -> QPSpec:
    """Combined heat-and-power sharing with the pump powers eliminated.

    Substituting p^P_a = (sum dH_a - sum h^G_a) / C_o,a into the electric balance
    leaves one constraint
        sum pG + sum_a sum h^G_a / C_o,a - sum pU = sum dP + sum_a sum dH_a / C_o,a
    with heat costs weighted by alpha_a = m_a / C_o,a.  Areas without a Mode-2
    pump are decoupled and excluded.
    """
    pumps = _single_mode2_pumps(system)
    labels, costs, coefs = [], [], []
    rhs = float(sum(dP.values()))
    for b in _gens(system):
        labels.append(f"pG_{b.id}")
        costs.append(b.generator.cost)
        coefs.append(1.0)
    for a in system.areas:
        p = pumps.get(a.id)
        if p is None:
            continue
        for e in a.edges_with_role("source"):
            labels.append(f"hG_{e.id}")
            costs.append(p.alpha * e.source.cost)
            coefs.append(1.0 / p.cop)
        rhs += _heat_total(a, dH) / p.cop
    for b in system.buses:
        if b.D > 0:
            labels.append(f"pU_{b.id}")
            costs.append(1.0 / b.D)
            coefs.append(-1.0)
    return QPSpec(tuple(labels), np.array(costs), np.array(coefs), rhs)


# ---------------------------------------------------------------------------
# closed-form equilibria
# ---------------------------------------------------------------------------


@dataclass
class EquilibriumSolution:
    mode: int
    omega: float
    Tbar: dict[str, float]
    pG: dict[str, float]
    pP: dict[str, float]
    pU: dict[str, float]
    hG: dict[str, float]
    hP: dict[str, float]
    T: dict[str, np.ndarray]
    eta: np.ndarray
    lam: float
    mu: dict[str, float]
    dP: dict[str, float] = field(default_factory=dict)
    dH: dict[str, float] = field(default_factory=dict)

    def starred(self) -> dict[str, float]:
        """Flat name -> value map of every starred quantity."""
        out = {"omega": self.omega}
        out.update({f"Tbar_{k}": v for k, v in self.Tbar.items()})
        out.update({f"pG_{k}": v for k, v in self.pG.items()})
        out.update({f"pP_{k}": v for k, v in self.pP.items()})
        out.update({f"pU_{k}": v for k, v in self.pU.items()})
        out.update({f"hG_{k}": v for k, v in self.hG.items()})
        out.update({f"hP_{k}": v for k, v in self.hP.items()})
        for a, T in self.T.items():
            out.update({f"T_{a}_{i}": float(v) for i, v in enumerate(T)})
        return out

    def electric_residual(self, system) -> float:
        """1'pG - 1'pL - 1'pP - 1'pU (Mode-2 pumps included)."""
        return sum(self.pG.values()) - sum(self.dP.values()) - sum(self.pP.values()) - sum(self.pU.values())

    def heat_residual(self, system, area_id) -> float:
        a = system.area(area_id)
        ids = {e.id for e in a.edges}
        return (
            sum(v for k, v in self.hG.items() if k in ids)
            + sum(v for k, v in self.hP.items() if k in ids)
            - _heat_total(a, self.dH)
        )

    def state(self, model: CoupledModel) -> np.ndarray:
        """Full state vector of this equilibrium in ``model``'s layout."""
        L = model.layout
        x = np.zeros(L.size)
        x[L.eta] = self.eta
        x[L.omega] = self.omega
        Tbar = np.array([self.Tbar[a] for a in model.area_ids])
        omega = np.full(len(model.bus_ids), self.omega)
        pG = np.array([self.pG[b] for b in model.gen_bus_ids])
        hG = np.array([self.hG[e] for e in model.source_ids])
        xg, xs = model.block_states_for(pG, hG, omega, Tbar)
        x[L.gen] = xg
        x[L.heat] = xs
        for k, a in enumerate(model.area_ids):
            x[L.area_T(k)] = self.T[a]
        return x


def starred_from_state(model: CoupledModel, x, loads: Loads) -> dict[str, float]:
    """Same keys as :meth:`EquilibriumSolution.starred`, read off a state.

    ``omega`` is the largest-magnitude bus frequency so that a lack of
    synchronisation shows up in the comparison.
    """
    out = model.outputs(x, loads)
    w = out.omega
    d = {"omega": float(w[np.argmax(np.abs(w))]) if w.size else 0.0}
    d.update({f"Tbar_{a}": float(v) for a, v in zip(model.area_ids, out.Tbar)})
    d.update({f"pG_{b}": float(v) for b, v in zip(model.gen_bus_ids, out.pG)})
    d.update({f"pP_{p}": float(v) for p, v in zip(model.pump_ids, out.pP)})
    d.update({f"pU_{b.id}": float(b.D * w[i]) for i, b in enumerate(model.system.buses)})
    d.update({f"hG_{e}": float(v) for e, v in zip(model.source_ids, out.hG)})
    d.update({f"hP_{p}": float(v) for p, v in zip(model.pump_ids, out.hP)})
    for k, a in enumerate(model.area_ids):
        T = x[model.layout.area_T(k)]
        d.update({f"T_{a}_{i}": float(v) for i, v in enumerate(T)})
    return d


def max_starred_gap(a: dict, b: dict) -> float:
    if a.keys() != b.keys():
        raise KeyError(f"mismatched quantities: {sorted(set(a) ^ set(b))}")
    return max((abs(a[k] - b[k]) for k in a), default=0.0)


def temperature_profile(area: HeatArea, h_star, Tbar_star: float, tol: float = 1e-9) -> np.ndarray:
    """Steady temperatures with A_h T = h, pinned by the average temperature.

    A_h has a one-dimensional null space (constants), so the bordered system
    [A_h; V'/vol] T = [h; Tbar] has a unique least-squares solution with zero
    residual whenever 1'h = 0.
    """
    h = np.asarray(h_star, dtype=float)
    if h.shape != (area.dim,):
        raise ValueError(f"h has shape {h.shape}, area {area.id!r} needs ({area.dim},)")
    if abs(h.sum()) > tol:
        raise InconsistentInjectionError(f"area {area.id!r}: injections sum to {h.sum():.3e}, expected 0")
    K = np.vstack([area.A_h, area.volumes / area.total_volume])
    rhs = np.append(h, Tbar_star)
    T, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    res = np.max(np.abs(K @ T - rhs))
    if res > 1e-10 * max(1.0, np.max(np.abs(rhs))):
        raise NumericFailure(f"temperature profile residual {res:.3e}")
    return T


def _equilibrium_angles(system: CombinedSystem, injection: np.ndarray, eta0=None) -> np.ndarray:
    """Line angles with E' B sin(eta) = injection, eta = eta_loop + E theta."""
    nb, nl = len(system.buses), len(system.lines)
    if nl == 0:
        return np.zeros(0)
    bidx = system.bus_index
    E = np.zeros((nl, nb))
    for k, ln in enumerate(system.lines):
        E[k, bidx[ln.from_bus]] = 1.0
        E[k, bidx[ln.to_bus]] = -1.0
    B = np.array([ln.B for ln in system.lines])
    eta0 = np.array([ln.eta0 for ln in system.lines]) if eta0 is None else np.asarray(eta0, float)
    # loop component of the initial angles is invariant under eta' = E omega
    coef, *_ = np.linalg.lstsq(E, eta0, rcond=None)
    eta_loop = eta0 - E @ coef
    Er = E[:, 1:]

    def F(theta):
        return Er.T @ (B * np.sin(eta_loop + Er @ theta)) - injection[1:]

    def J(theta):
        return Er.T @ ((B * np.cos(eta_loop + Er @ theta))[:, None] * Er)

    sol = optimize.root(F, np.zeros(nb - 1), jac=J, method="hybr", options={"xtol": 1e-14})
    eta = eta_loop + Er @ sol.x
    res = np.max(np.abs(E.T @ (B * np.sin(eta)) - injection))
    if not np.isfinite(res) or res > 1e-10:
        raise SecurityConstraintError(f"no equilibrium power flow (residual {res:.3e})")
    if np.any(np.abs(eta) >= math.pi / 2):
        raise SecurityConstraintError("equilibrium violates |eta*| < pi/2")
    return eta


def _finish(system, mode, omega, Tbar, pG, pP, pU, hG, hP, lam, mu, dP, dH, eta0):
    # bus injections balancing the line flows
    inj = np.zeros(len(system.buses))
    bidx = system.bus_index
    for b, v in pG.items():
        inj[bidx[b]] += v
    for b, v in dP.items():
        inj[bidx[b]] -= v
    for b, v in pU.items():
        inj[bidx[b]] -= v
    for p in system.pumps:
        inj[bidx[p.bus]] -= pP[p.id]
    eta = _equilibrium_angles(system, inj, eta0)
    T = {}
    for a in system.areas:
        h = np.zeros(a.dim)
        for j, e in enumerate(a.edges):
            h[j] = hG.get(e.id, 0.0) + hP.get(e.id, 0.0) - e.load_base - dH.get(e.id, 0.0)
        T[a.id] = temperature_profile(a, h, Tbar[a.id])
    return EquilibriumSolution(mode, omega, Tbar, pG, pP, pU, hG, hP, T, eta, lam, mu, dict(dP), dict(dH))


def _check_inputs(system, dP, dH):
    bids = {b.id for b in system.buses}
    eids = {e.id for a in system.areas for e in a.edges}
    for k in dP:
        if k not in bids:
            raise KeyError(f"unknown bus {k!r}")
        if system.bus(k).kind == "pump-converter":
            raise ValueError(f"bus {k!r} is a converter bus and carries no load")
    for k in dH:
        if k not in eids:
            raise KeyError(f"unknown heat edge {k!r}")


def mode1_equilibrium(system: CombinedSystem, dP: dict | None = None, dH: dict | None = None, eta0=None) -> EquilibriumSolution:
    """Steady state under Mode-1 pumps (or no pumps).

    omega* = -sum(dP) / (sum gains + sum a1 + sum D); then per area the heat
    sources absorb sum(dH) - sum(h^P*) in proportion to their gains.
    """
    require_valid(system)
    dP, dH = dict(dP or {}), dict(dH or {})
    _check_inputs(system, dP, dH)
    if any(p.mode != 1 for p in system.pumps):
        raise ModeError("mode1_equilibrium needs every pump in Mode 1")
    gens = _gens(system)
    S = sum(b.generator.gain for b in gens) + sum(p.a1 for p in system.pumps) + sum(b.D for b in system.buses)
    if S == 0:
        raise UnbalancedError("no generator, damping or pump to balance the electric network")
    w = -sum(dP.values()) / S
    pG = {b.id: -b.generator.gain * w for b in gens}
    pP = {p.id: p.a1 * w for p in system.pumps}
    pU = {b.id: b.D * w for b in system.buses}
    hP = {p.id: p.cop * p.a1 * w for p in system.pumps}
    Tbar, hG, mu = {}, {}, {}
    for a in system.areas:
        src = a.edges_with_role("source")
        gsum = sum(e.source.gain for e in src)
        need = _heat_total(a, dH) - sum(hP.get(e.id, 0.0) for e in a.edges)
        if gsum == 0:
            raise UnbalancedError(f"area {a.id!r} has no heat source to set its average temperature")
        Tbar[a.id] = -need / gsum
        mu[a.id] = Tbar[a.id]
        for e in src:
            hG[e.id] = -e.source.gain * Tbar[a.id]
    return _finish(system, 1, w, Tbar, pG, pP, pU, hG, hP, w, mu, dP, dH, eta0)


def mode2_equilibrium(system: CombinedSystem, dP: dict | None = None, dH: dict | None = None, eta0=None) -> EquilibriumSolution:
    """Steady state under Mode-2 (converter-linked) pumps.

    Each pumped area has Tbar* = omega*/m and p^P* = (sum dH + G_h omega*/m)/C_o,
    where G_h is the summed source gain; inserting these into the electric
    balance gives one linear equation in omega*.
    """
    require_valid(system)
    dP, dH = dict(dP or {}), dict(dH or {})
    _check_inputs(system, dP, dH)
    if any(p.mode != 2 for p in system.pumps):
        raise ModeError("mode2_equilibrium needs every pump in Mode 2")
    pumps = _single_mode2_pumps(system)
    gens = _gens(system)
    den = sum(b.generator.gain for b in gens) + sum(b.D for b in system.buses)
    num = -sum(dP.values())
    for a in system.areas:
        p = pumps.get(a.id)
        if p is None:
            continue
        g = sum(e.source.gain for e in a.edges_with_role("source"))
        den += g / (p.m * p.cop)
        num -= _heat_total(a, dH) / p.cop
    if den == 0:
        raise UnbalancedError("no generator, damping or heat source to balance the disturbance")
    w = num / den
    pG = {b.id: -b.generator.gain * w for b in gens}
    pU = {b.id: b.D * w for b in system.buses}
    Tbar, hG, pP, hP, mu = {}, {}, {}, {}, {}
    for a in system.areas:
        src = a.edges_with_role("source")
        g = sum(e.source.gain for e in src)
        p = pumps.get(a.id)
        if p is not None:
            Tbar[a.id] = w / p.m
            pP[p.id] = (_heat_total(a, dH) + g * Tbar[a.id]) / p.cop
            hP[p.id] = p.cop * pP[p.id]
            mu[a.id] = w / p.cop
        else:
            if g == 0:
                raise UnbalancedError(f"area {a.id!r} has no heat source to set its average temperature")
            Tbar[a.id] = -_heat_total(a, dH) / g
            mu[a.id] = Tbar[a.id]
        for e in src:
            hG[e.id] = -e.source.gain * Tbar[a.id]
    return _finish(system, 2, w, Tbar, pG, pP, pU, hG, hP, w, mu, dP, dH, eta0)


def equilibrium(system: CombinedSystem, dP=None, dH=None, eta0=None) -> EquilibriumSolution:
    modes = system.modes
    if modes == {2}:
        return mode2_equilibrium(system, dP, dH, eta0)
    if modes <= {1}:
        return mode1_equilibrium(system, dP, dH, eta0)
    raise ModeError("systems mixing Mode-1 and Mode-2 pumps have no closed-form oracle")


def sharing_by_qp(system: CombinedSystem, dP=None, dH=None, numeric: bool = False) -> dict[str, float]:
    """Allocation from the optimisation route, keyed like ``starred()``.

    Mode 1 solves the electric problem, then one heat problem per area using
    the resulting pump heat.  Mode 2 solves the joint problem and recovers the
    pump powers from the heat balances.  Also returns the multipliers under
    ``lam`` and ``mu_<area>``.
    """
    solve = solve_qp_numeric if numeric else solve_qp
    dP, dH = dict(dP or {}), dict(dH or {})
    out: dict[str, float] = {}
    if system.modes <= {1}:
        e = solve(electric_sharing_qp(system, dP))
        out.update(e.as_dict())
        out["lam"] = e.lam
        hP = {p.id: p.cop * out[f"pP_{p.id}"] for p in system.pumps}
        out.update({f"hP_{k}": v for k, v in hP.items()})
        for a in system.areas:
            spec = heat_sharing_qp(system, a.id, dH, hP)
            s = solve(spec)
            out.update(s.as_dict())
            out[f"mu_{a.id}"] = s.lam
        return out
    if system.modes == {2}:
        pumps = _single_mode2_pumps(system)
        j = solve(joint_sharing_qp(system, dP, dH))
        out.update(j.as_dict())
        out["lam"] = j.lam
        for a in system.areas:
            p = pumps.get(a.id)
            if p is None:
                s = solve(heat_sharing_qp(system, a.id, dH, {}))
                out.update(s.as_dict())
                out[f"mu_{a.id}"] = s.lam
                continue
            hg = sum(out[f"hG_{e.id}"] for e in a.edges_with_role("source"))
            out[f"pP_{p.id}"] = (_heat_total(a, dH) - hg) / p.cop
            out[f"hP_{p.id}"] = _heat_total(a, dH) - hg
            out[f"mu_{a.id}"] = j.lam / p.cop
        return out
    raise ModeError("systems mixing Mode-1 and Mode-2 pumps have no sharing problem")


def kkt_residuals(spec: QPSpec, sol: QPSolution) -> tuple[float, float]:
    """(stationarity, primal feasibility) residuals, infinity norm."""
    stat = spec.costs * sol.x + spec.coefs * sol.lam
    return float(np.max(np.abs(stat), initial=0.0)), abs(sol.residual(spec))


# ---------------------------------------------------------------------------
# matched Mode-1 variant
# ---------------------------------------------------------------------------


def matched_mode1_gains(system: CombinedSystem, dP=None, dH=None) -> dict[str, float]:
    """a1 per pump such that Mode 1 reproduces the Mode-2 steady state.

    Choosing a1 = p^P*/omega* for every pump makes the Mode-1 electric balance
    identical, hence the same omega*, p^P* and heat-side equilibrium.  With no
    heat-load step this is sum(G_h)/(m C_o), independent of the electric step.
    """
    sol = mode2_equilibrium(system, dP, dH)
    if sol.omega == 0:
        pumps = _single_mode2_pumps(system)
        gains = {}
        for a_id, p in pumps.items():
            g = sum(e.source.gain for e in system.area(a_id).edges_with_role("source"))
            gains[p.id] = g / (p.m * p.cop)
    else:
        gains = {p.id: sol.pP[p.id] / sol.omega for p in system.pumps}
    bad = [k for k, v in gains.items() if not v > 0]
    if bad:
        raise ValueError(f"no positive Mode-1 gain reproduces the Mode-2 steady state for pumps {bad}")
    return gains


def as_mode1(system: CombinedSystem, gains: dict[str, float]) -> CombinedSystem:
    """Copy of a Mode-2 system with every converter bus turned into a Mode-1 pump bus."""
    conv = {p.bus for p in system.pumps}
    buses = [
        dataclasses.replace(b, kind="pump-mode1") if b.kind == "pump-converter" and b.id in conv else b
        for b in system.buses
    ]
    pumps = [dataclasses.replace(p, mode=1, a1=gains[p.id], m=None) for p in system.pumps]
    return dataclasses.replace(system, buses=tuple(buses), pumps=tuple(pumps))

