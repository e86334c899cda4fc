"""Storage functions around an equilibrium, and monotonicity audits.

Every function accepts a single state vector or a (samples, n) array and
returns a :class:`StorageBreakdown` whose fields are arrays of matching
leading shape.  Generator and heat-source terms are quadratics in the
control-block states with weight :func:`block_storage_weight`, which is
tau/Q for first-order blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import CoupledModel, block_storage_weight
from .equilibrium import EquilibriumSolution, ModeError, equilibrium
from .solver import Trajectory


@dataclass
class StorageBreakdown:
    kinetic: np.ndarray
    line: np.ndarray
    generator: np.ndarray
    thermal: np.ndarray
    source: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.kinetic + self.line + self.generator + self.thermal + self.source

    def parts(self) -> dict[str, np.ndarray]:
        return {
            "kinetic": self.kinetic,
            "line": self.line,
            "generator": self.generator,
            "thermal": self.thermal,
            "source": self.source,
        }


def _prep(model: CoupledModel, states, eq):
    X = np.asarray(states, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.layout.size:
        raise ValueError(f"state has {X.shape[1]} entries, model layout needs {model.layout.size}")
    xs = eq.state(model) if isinstance(eq, EquilibriumSolution) else np.asarray(eq, dtype=float)
    if xs.shape != (model.layout.size,):
        raise ValueError(f"equilibrium has shape {xs.shape}, model layout needs ({model.layout.size},)")
    return X, xs, single


def _squeeze(parts, single):
    if single:
        parts = [p[0] for p in parts]
    return StorageBreakdown(*parts)


def line_potential(B, eta, eta_star):
    """sum B[(cos eta* - cos eta) - sin eta* (eta - eta*)] along the last axis."""
    return np.sum(B * ((np.cos(eta_star) - np.cos(eta)) - np.sin(eta_star) * (eta - eta_star)), axis=-1)


def _electric(model, X, xs):
    L = model.layout
    Mi = model.M[model.inertial_idx]
    dw = X[:, L.omega] - xs[L.omega]
    kinetic = 0.5 * np.sum(Mi * dw**2, axis=1)
    line = line_potential(model.B, X[:, L.eta], xs[L.eta])
    cg = np.array([block_storage_weight(g) for g in model.gen_specs])
    dg = X[:, L.gen] - xs[L.gen]
    gen = 0.5 * np.sum(cg * dg**2, axis=1)
    return kinetic, line, gen


def _area_heat(model, X, xs, k):
    """Thermal and source storage of area k, per sample."""
    L = model.layout
    w = model.avg_weights[k]
    dT = (X[:, L.T] - xs[L.T]) @ w
    thermal = 0.5 * model.total_volume[k] * dT**2
    src = np.flatnonzero(model.src_area == k)
    cs = np.array([block_storage_weight(model.src_specs[j]) for j in src])
    ds = X[:, L.heat][:, src] - xs[L.heat][src]
    source = 0.5 * np.sum(cs * ds**2, axis=1)
    return thermal, source


def v1e(model: CoupledModel, states, eq) -> StorageBreakdown:
    """Electric storage: kinetic + line potential + generator blocks."""
    X, xs, single = _prep(model, states, eq)
    kin, line, gen = _electric(model, X, xs)
    z = np.zeros(len(X))
    return _squeeze([kin, line, gen, z, z.copy()], single)


def v1h(model: CoupledModel, states, eq, area=None) -> StorageBreakdown:
    """Heat storage of one area (by id), or summed over all areas when ``area`` is None."""
    X, xs, single = _prep(model, states, eq)
    ks = range(len(model.area_ids)) if area is None else [model.area_ids.index(str(area))]
    thermal = np.zeros(len(X))
    source = np.zeros(len(X))
    for k in ks:
        t, s = _area_heat(model, X, xs, k)
        thermal += t
        source += s
    z = np.zeros(len(X))
    return _squeeze([z, z.copy(), z.copy(), thermal, source], single)


def area_weights(model: CoupledModel) -> np.ndarray:
    """m/C_o for the area's converter-linked pump, 1 for areas without one."""
    w = np.ones(len(model.area_ids))
    for k in model.m2_idx:
        w[model.pump_area[k]] = model.pump_m[k] / model.pump_cop[k]
    return w


def v2(model: CoupledModel, states, eq) -> StorageBreakdown:
    """Aggregate storage for converter-linked systems; heat terms weighted by m/C_o."""
    if model.system.modes != {2}:
        raise ModeError("v2 applies to systems whose pumps are all in Mode 2")
    X, xs, single = _prep(model, states, eq)
    kin, line, gen = _electric(model, X, xs)
    thermal = np.zeros(len(X))
    source = np.zeros(len(X))
    for k, a in enumerate(area_weights(model)):
        t, s = _area_heat(model, X, xs, k)
        thermal += a * t
        source += a * s
    return _squeeze([kin, line, gen, thermal, source], single)


STORAGE_FUNCTIONS = {"v1e": v1e, "v1h": v1h, "v2": v2}


@dataclass
class MonotoneReport:
    passed: bool
    flagged: np.ndarray
    tol: float
    max_increase: float = 0.0

    @property
    def first_violation(self) -> int | None:
        return int(self.flagged[0]) if len(self.flagged) else None


def check_monotone(series, tol: float = 1e-9) -> MonotoneReport:
    """Flag every k with V[k+1] - V[k] > tol * max(1, V[k])."""
    v = np.asarray(series, dtype=float)
    if v.size < 2:
        return MonotoneReport(True, np.zeros(0, dtype=int), tol)
    inc = np.diff(v)
    flagged = np.flatnonzero(inc > tol * np.maximum(1.0, v[:-1]))
    return MonotoneReport(len(flagged) == 0, flagged, tol, float(max(inc.max(), 0.0)))


@dataclass
class FunctionAudit:
    name: str
    passed: bool
    kind: str  # "monotone" or "converges"
    segments: list[MonotoneReport] = field(default_factory=list)
    first_violation_time: float | None = None
    final_value: float = 0.0
    min_value: float = 0.0


@dataclass
class AuditReport:
    functions: list[FunctionAudit]

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.functions)

    def lines(self) -> list[str]:
        out = []
        for f in self.functions:
            status = "PASS" if f.passed else "FAIL"
            msg = f"{f.name:4s} {f.kind:9s} {status}  final={f.final_value:.3e}  min={f.min_value:.3e}"
            if f.first_violation_time is not None:
                msg += f"  first violation at t={f.first_violation_time:.6g}"
            out.append(msg)
        return out


def segment_equilibria(traj: Trajectory, system=None) -> list[EquilibriumSolution]:
    """Equilibrium for the loads of each trajectory segment.

    The angles of each target share the loop component of the trajectory's
    angles at the segment start (invariant of the dynamics).  ``system``
    overrides the model's own system as the source of the targets.
    """
    model = traj.model
    system = system or model.system
    out = []
    for s, (a, _, loads) in enumerate(traj.segments):
        k = traj.segment_samples(s)[0]
        dP = {b: float(v) for b, v in zip(model.bus_ids, loads.pL) if v != 0.0}
        dH = {}
        for e, pos in model.edge_pos.items():
            d = loads.hL[pos] - model.base_hL[pos]
            if d != 0.0:
                dH[e] = float(d)
        eta0 = traj.states[k, model.layout.eta]
        out.append(equilibrium(system, dP, dH, eta0=eta0))
    return out


def default_functions(model: CoupledModel, constant_pump: bool = False) -> list[tuple[str, str]]:
    """(function, check kind) pairs suited to the system's pump mode."""
    if model.system.modes == {2}:
        return [("v2", "monotone")]
    fns = [("v1e", "monotone")]
    if model.area_ids:
        fns.append(("v1h", "monotone" if constant_pump else "converges"))
    return fns


def pump_heat_constant(traj: Trajectory, atol: float = 1e-12) -> bool:
    """True when every Mode-1 pump's heat output never leaves its initial value."""
    model = traj.model
    if not np.any(model.pump_a1[model.m1_idx]):
        return True
    hP = np.array([model.pump_power(x, traj.loads_at_sample(k))[1] for k, x in enumerate(traj.states)])
    return bool(np.max(np.abs(hP - hP[0])) <= atol)


def audit(
    traj: Trajectory,
    functions=None,
    tol: float = 1e-9,
    converge_tol: float = 1e-8,
    constant_pump: bool = False,
    equilibria=None,
) -> AuditReport:
    """Evaluate storage functions along ``traj`` and check them.

    "monotone" checks non-increase within every load segment, restarting the
    baseline (and the equilibrium) at each disturbance.  "converges" checks
    that the value at the final sample is below ``converge_tol``.
    Without an explicit ``functions`` list, v1h is checked for monotone
    decrease when the pump heat stays constant along the trajectory, and for
    convergence otherwise.
    """
    model = traj.model
    if functions is None:
        constant_pump = constant_pump or pump_heat_constant(traj)
        functions = default_functions(model, constant_pump)
    eqs = equilibria if equilibria is not None else segment_equilibria(traj)
    results = []
    for name, kind in functions:
        fn = STORAGE_FUNCTIONS[name]
        reports = []
        first_t = None
        final = 0.0
        vmin = np.inf
        for s in range(len(traj.segments)):
            idx = traj.segment_samples(s)
            vals = fn(model, traj.states[idx], eqs[s]).total
            vmin = min(vmin, float(vals.min()))
            final = float(vals[-1])
            if kind == "monotone":
                rep = check_monotone(vals, tol)
                reports.append(rep)
                if not rep.passed and first_t is None:
                    first_t = float(traj.times[idx[rep.first_violation]])
        if kind == "monotone":
            ok = all(r.passed for r in reports)
        else:
            ok = abs(final) <= converge_tol
        results.append(FunctionAudit(name, ok, kind, reports, first_t, final, vmin))
    return AuditReport(results)
