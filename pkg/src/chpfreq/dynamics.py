"""Right-hand side of the coupled swing / heat-transport / controller dynamics.

State layout (one flat vector)::

    eta      line angle differences
    omega    frequency deviations at buses with M > 0
    gen      one block state per generator
    T        per area: edge temperatures then node temperatures
    heat     one block state per heat source

Buses with zero inertia have their frequency eliminated algebraically, so the
system is a plain ODE.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .netmodel import BlockSpec, CombinedSystem, require_valid

logger = logging.getLogger(__name__)


class UnsupportedBlockError(TypeError):
    pass


@dataclass(frozen=True)
class Step:
    """Step change of an electric load (``kind='bus'``) or heat load (``kind='edge'``)."""

    time: float
    kind: str
    target: str
    delta: float


@dataclass(frozen=True)
class DisturbanceSchedule:
    steps: tuple[Step, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(sorted(self.steps, key=lambda s: s.time)))

    @property
    def times(self) -> list[float]:
        return sorted({s.time for s in self.steps})

    def active(self, t: float) -> list[Step]:
        """Steps in force at time t (a step applies from its own instant on)."""
        return [s for s in self.steps if s.time <= t]

    def totals(self, t: float = math.inf) -> tuple[dict[str, float], dict[str, float]]:
        dP: dict[str, float] = {}
        dH: dict[str, float] = {}
        for s in self.active(t):
            d = dP if s.kind == "bus" else dH
            d[s.target] = d.get(s.target, 0.0) + s.delta
        return dP, dH


@dataclass
class Loads:
    pL: np.ndarray  # per bus
    hL: np.ndarray  # per stacked edge position (all areas)


@dataclass
class AlgebraicOutputs:
    omega: np.ndarray  # all buses
    flows: np.ndarray
    pG: np.ndarray  # per generator
    pP: np.ndarray  # per pump
    hP: np.ndarray  # per pump
    hG: np.ndarray  # per heat source
    Tbar: np.ndarray  # per area
    security: bool = False

    @property
    def omega_alg(self) -> np.ndarray:
        return self.omega


@dataclass(frozen=True)
class StateLayout:
    n_lines: int
    n_inertial: int
    n_gen: int
    area_dims: tuple[int, ...]
    n_sources: int
    labels: tuple[str, ...] = field(default=(), compare=False)

    @property
    def eta(self) -> slice:
        return slice(0, self.n_lines)

    @property
    def omega(self) -> slice:
        s = self.n_lines
        return slice(s, s + self.n_inertial)

    @property
    def gen(self) -> slice:
        s = self.n_lines + self.n_inertial
        return slice(s, s + self.n_gen)

    @property
    def T(self) -> slice:
        s = self.n_lines + self.n_inertial + self.n_gen
        return slice(s, s + sum(self.area_dims))

    def area_T(self, k: int) -> slice:
        s = self.T.start + sum(self.area_dims[:k])
        return slice(s, s + self.area_dims[k])

    @property
    def heat(self) -> slice:
        s = self.T.stop
        return slice(s, s + self.n_sources)

    @property
    def size(self) -> int:
        return self.heat.stop


def passivity_margin(block, freq_grid) -> float:
    """Minimum of Re G(j*nu) over ``freq_grid`` for an LTI control block.

    A positive value certifies input strict passivity on the grid.
    """
    if not isinstance(block, BlockSpec):
        raise UnsupportedBlockError(f"passivity margin needs an LTI BlockSpec, got {type(block).__name__}")
    nu = np.asarray(freq_grid, dtype=float)
    return float(np.min(block.transfer(nu).real))


def block_storage_weight(block: BlockSpec) -> float:
    """Weight c of the quadratic storage 0.5*c*(x - x*)^2 of a control block.

    With k = c/tau, the block realization tau*x' = -x - (1-alpha)*g*u,
    y = x - alpha*g*u gives
        dV/dt + (u-u*)(y-y*) = -k dx^2 + (1 - k(1-alpha)g) dx du - alpha g du^2.
    k = 1/((1+alpha) g) makes this form negative semidefinite for every
    alpha >= 0 (determinant alpha/(1+alpha)^2), and reduces to tau/g for the
    first-order block.
    """
    a = block.alpha if block.kind == "lead-lag" else 0.0
    return block.tau / ((1.0 + a) * block.gain)


class CoupledModel:
    """Compiled, immutable view of a validated :class:`CombinedSystem`."""

    def __init__(self, system: CombinedSystem, validate: bool = True):
        if validate:
            require_valid(system)
        self.system = system
        buses = system.buses
        nb = len(buses)
        bidx = system.bus_index
        self.bus_ids = [b.id for b in buses]

        # lines: eta' = E omega, bus inflow = -E^T p
        self.line_ids = [ln.id for ln in system.lines]
        E = np.zeros((len(system.lines), nb))
        for k, ln in enumerate(system.lines):
            E[k, bidx[ln.from_bus]] = 1.0
            E[k, bidx[ln.to_bus]] = -1.0
        self.E = E
        self.B = np.array([ln.B for ln in system.lines], dtype=float)
        self.eta0 = np.array([ln.eta0 for ln in system.lines], dtype=float)

        self.M = np.array([b.M for b in buses], dtype=float)
        self.D = np.array([b.D for b in buses], dtype=float)
        self.inertial = np.array([b.M > 0 for b in buses])
        self.inertial_idx = np.flatnonzero(self.inertial)
        self.converter = np.array([b.kind == "pump-converter" for b in buses])
        self.algebraic_idx = np.flatnonzero(~self.inertial & ~self.converter)
        self.converter_idx = np.flatnonzero(self.converter)

        # generators
        self.gen_bus_ids = [b.id for b in buses if b.generator is not None]
        self.gen_specs = [b.generator for b in buses if b.generator is not None]
        self.gen_bus = np.array([bidx[i] for i in self.gen_bus_ids], dtype=int)
        self.gen_tau = np.array([g.tau for g in self.gen_specs], dtype=float)
        self.gen_sg = np.array([g.state_gain for g in self.gen_specs], dtype=float)
        self.gen_ff = np.array([g.feedthrough for g in self.gen_specs], dtype=float)
        self.gen_gain = np.array([g.gain for g in self.gen_specs], dtype=float)
        G = np.zeros((nb, len(self.gen_specs)))
        G[self.gen_bus, np.arange(len(self.gen_specs))] = 1.0
        self.gen_to_bus = G

        # heating areas, stacked block-diagonally
        self.area_ids = [a.id for a in system.areas]
        dims = [a.dim for a in system.areas]
        nT = sum(dims)
        self.A = np.zeros((nT, nT))
        self.V = np.zeros(nT)
        self.avg_weights = np.zeros((len(system.areas), nT))
        self.edge_pos: dict[str, int] = {}  # edge id -> position in T
        self.node_pos: dict[str, int] = {}
        self.edge_area: dict[str, int] = {}
        off = 0
        for k, a in enumerate(system.areas):
            sl = slice(off, off + a.dim)
            self.A[sl, sl] = a.A_h
            self.V[sl] = a.volumes
            self.avg_weights[k, sl] = a.volumes / a.total_volume
            for j, e in enumerate(a.edges):
                self.edge_pos[e.id] = off + j
                self.edge_area[e.id] = k
            for j, n in enumerate(a.nodes):
                self.node_pos[n.id] = off + a.n_edges + j
            off += a.dim
        self.total_volume = np.array([a.total_volume for a in system.areas], dtype=float)
        self.Ainv_V = self.A / self.V[:, None]

        # heat sources
        self.source_edges = [e for a in system.areas for e in a.edges if e.role == "source"]
        self.source_ids = [e.id for e in self.source_edges]
        specs = [e.source for e in self.source_edges]
        self.src_area = np.array([self.edge_area[e.id] for e in self.source_edges], dtype=int)
        self.src_tau = np.array([s.tau for s in specs], dtype=float)
        self.src_sg = np.array([s.state_gain for s in specs], dtype=float)
        self.src_ff = np.array([s.feedthrough for s in specs], dtype=float)
        self.src_gain = np.array([s.gain for s in specs], dtype=float)
        self.src_specs = specs
        S = np.zeros((nT, len(specs)))
        for k, e in enumerate(self.source_edges):
            S[self.edge_pos[e.id], k] = 1.0
        self.src_to_T = S

        # pumps
        pumps = system.pumps
        self.pump_ids = [p.id for p in pumps]
        self.pump_bus = np.array([bidx[p.bus] for p in pumps], dtype=int)
        self.pump_mode = np.array([p.mode for p in pumps], dtype=int)
        self.pump_cop = np.array([p.cop for p in pumps], dtype=float)
        self.pump_a1 = np.array([p.a1 if p.mode == 1 else 0.0 for p in pumps], dtype=float)
        self.pump_m = np.array([p.m if p.mode == 2 else 0.0 for p in pumps], dtype=float)
        self.pump_area = np.array([system.area_index[p.area] for p in pumps], dtype=int)
        P = np.zeros((nT, len(pumps)))
        for k, p in enumerate(pumps):
            P[self.edge_pos[p.edge], k] = 1.0
        self.pump_to_T = P
        m1 = self.pump_mode == 1
        self.m1_idx = np.flatnonzero(m1)
        self.m2_idx = np.flatnonzero(self.pump_mode == 2)
        Pb = np.zeros((nb, len(pumps)))
        Pb[self.pump_bus[m1], self.m1_idx] = 1.0
        self.mode1_to_bus = Pb
        self.bus_a1 = Pb @ self.pump_a1

        # algebraic buses: (D + sum a1 + sum feedthrough) omega = inflow - pL + sum x_gen
        self.alg_den = self.D + self.bus_a1 + self.gen_to_bus @ self.gen_ff
        # converter bus -> (area, m)
        conv_area = np.zeros(nb, dtype=int)
        conv_m = np.zeros(nb)
        for k in self.m2_idx:
            conv_area[self.pump_bus[k]] = self.pump_area[k]
            conv_m[self.pump_bus[k]] = self.pump_m[k]
        self.conv_area = conv_area[self.converter_idx]
        self.conv_m = conv_m[self.converter_idx]

        base_hL = np.zeros(nT)
        for a in system.areas:
            for e in a.edges:
                if e.load_base:
                    base_hL[self.edge_pos[e.id]] = e.load_base
        self.base_hL = base_hL

        self.layout = StateLayout(
            n_lines=len(system.lines),
            n_inertial=len(self.inertial_idx),
            n_gen=len(self.gen_specs),
            area_dims=tuple(dims),
            n_sources=len(specs),
            labels=tuple(self._labels()),
        )

        L = self.layout
        self._slices = (L.eta, L.omega, L.gen, L.T, L.heat)
        self._Et = np.ascontiguousarray(self.E.T)
        self._Minv = 1.0 / self.M[self.inertial_idx]
        self._pump_heat_to_T = self.pump_to_T * self.pump_cop

    def _labels(self):
        out = [f"eta_{i}" for i in self.line_ids]
        out += [f"omega_{self.bus_ids[i]}" for i in self.inertial_idx]
        out += [f"xgen_{i}" for i in self.gen_bus_ids]
        for a in self.system.areas:
            out += [f"TE_{e.id}" for e in a.edges] + [f"TN_{n.id}" for n in a.nodes]
        out += [f"xsrc_{i}" for i in self.source_ids]
        return out

    # ------------------------------------------------------------------
    # inputs

    def zero_state(self) -> np.ndarray:
        x = np.zeros(self.layout.size)
        x[self.layout.eta] = self.eta0
        return x

    def loads(self, dP: dict | None = None, dH: dict | None = None) -> Loads:
        pL = np.zeros(len(self.bus_ids))
        hL = self.base_hL.copy()
        bidx = self.system.bus_index
        for k, v in (dP or {}).items():
            if k not in bidx:
                raise KeyError(f"unknown bus {k!r} in electric load disturbance")
            if self.converter[bidx[k]]:
                raise ValueError(f"bus {k!r} is a converter bus and carries no load")
            pL[bidx[k]] += v
        for k, v in (dH or {}).items():
            if k not in self.edge_pos:
                raise KeyError(f"unknown heat edge {k!r} in heat load disturbance")
            hL[self.edge_pos[k]] += v
        return Loads(pL, hL)

    def loads_at(self, t: float, schedule: DisturbanceSchedule | None) -> Loads:
        if schedule is None:
            return self.loads()
        return self.loads(*schedule.totals(t))

    # ------------------------------------------------------------------
    # algebraic relations

    def line_flows(self, x) -> tuple[np.ndarray, bool]:
        """p_ij = B_ij sin(eta_ij), plus a flag when any |eta| >= pi/2."""
        eta = x[self.layout.eta]
        flag = bool(np.any(np.abs(eta) >= math.pi / 2))
        return self.B * np.sin(eta), flag

    def average_temperatures(self, x) -> np.ndarray:
        return self.avg_weights @ x[self.layout.T]

    def bus_frequencies(self, x, loads: Loads, flows=None, Tbar=None) -> np.ndarray:
        """Frequency at every bus; zero-inertia buses are solved algebraically."""
        L = self.layout
        if flows is None:
            flows, _ = self.line_flows(x)
        if Tbar is None:
            Tbar = self.average_temperatures(x)
        omega = np.empty(len(self.bus_ids))
        omega[self.inertial_idx] = x[L.omega]
        if len(self.algebraic_idx):
            inflow = -(self.E.T @ flows)
            gx = self.gen_to_bus @ x[L.gen]
            i = self.algebraic_idx
            omega[i] = (inflow[i] - loads.pL[i] + gx[i]) / self.alg_den[i]
        if len(self.converter_idx):
            omega[self.converter_idx] = self.conv_m * Tbar[self.conv_area]
        return omega

    def algebraic_frequencies(self, x, loads: Loads) -> np.ndarray:
        """Frequencies at the zero-inertia buses (load and converter buses)."""
        omega = self.bus_frequencies(x, loads)
        return omega[~self.inertial]

    def pump_power(self, x, loads: Loads, omega=None, flows=None):
        """Electric (pP) and heat (hP) power of every pump."""
        if flows is None:
            flows, _ = self.line_flows(x)
        if omega is None:
            omega = self.bus_frequencies(x, loads, flows)
        pP = self.pump_a1 * omega[self.pump_bus]
        if len(self.m2_idx):
            inflow = -(self.E.T @ flows)
            pP[self.m2_idx] = inflow[self.pump_bus[self.m2_idx]]
        return pP, self.pump_cop * pP

    def outputs(self, x, loads: Loads) -> AlgebraicOutputs:
        L = self.layout
        flows, flag = self.line_flows(x)
        Tbar = self.average_temperatures(x)
        omega = self.bus_frequencies(x, loads, flows, Tbar)
        pG = x[L.gen] - self.gen_ff * omega[self.gen_bus]
        pP, hP = self.pump_power(x, loads, omega, flows)
        hG = x[L.heat] - self.src_ff * Tbar[self.src_area]
        return AlgebraicOutputs(omega, flows, pG, pP, hP, hG, Tbar, flag)

    def heat_injection(self, x, loads: Loads, out: AlgebraicOutputs | None = None) -> np.ndarray:
        """Stacked injection vector h (all areas): hG + hP - hL on edges, zero on nodes."""
        if out is None:
            out = self.outputs(x, loads)
        return self.src_to_T @ out.hG + self.pump_to_T @ out.hP - loads.hL

    def area_slice(self, k: int) -> slice:
        """Slice of area k inside the stacked temperature vector."""
        off = sum(self.layout.area_dims[:k])
        return slice(off, off + self.layout.area_dims[k])

    def area_injection(self, k: int, x, loads: Loads) -> np.ndarray:
        return self.heat_injection(x, loads)[self.area_slice(k)]

    # ------------------------------------------------------------------

    def derivative(self, x, loads: Loads) -> np.ndarray:
        # Same relations as outputs(), inlined: this is the integrator's hot path.
        s_eta, s_w, s_g, s_T, s_h = self._slices
        xg, T, xs = x[s_g], x[s_T], x[s_h]
        flows = self.B * np.sin(x[s_eta])
        inflow = -(self._Et @ flows)
        Tbar = self.avg_weights @ T
        omega = np.empty(len(self.bus_ids))
        omega[self.inertial_idx] = x[s_w]
        gx = self.gen_to_bus @ xg
        a = self.algebraic_idx
        if len(a):
            omega[a] = (inflow[a] - loads.pL[a] + gx[a]) / self.alg_den[a]
        if len(self.converter_idx):
            omega[self.converter_idx] = self.conv_m * Tbar[self.conv_area]
        og = omega[self.gen_bus]
        pG = xg - self.gen_ff * og
        pP = self.pump_a1 * omega[self.pump_bus]
        if len(self.m2_idx):
            pP[self.m2_idx] = inflow[self.pump_bus[self.m2_idx]]
        Ts = Tbar[self.src_area]
        hG = xs - self.src_ff * Ts

        dx = np.empty_like(x)
        dx[s_eta] = self.E @ omega
        if len(self.inertial_idx):
            net = -loads.pL - self.mode1_to_bus @ pP + self.gen_to_bus @ pG - self.D * omega + inflow
            dx[s_w] = net[self.inertial_idx] * self._Minv
        dx[s_g] = (-xg - self.gen_sg * og) / self.gen_tau
        h = self.src_to_T @ hG + self._pump_heat_to_T @ pP - loads.hL
        dx[s_T] = h / self.V - self.Ainv_V @ T
        dx[s_h] = (-xs - self.src_sg * Ts) / self.src_tau
        return dx

    def rhs(self, x, t: float = 0.0, disturbances: DisturbanceSchedule | None = None) -> np.ndarray:
        """State derivative at (x, t) with loads taken from ``disturbances``."""
        return self.derivative(np.asarray(x, dtype=float), self.loads_at(t, disturbances))

    # ------------------------------------------------------------------
    # helpers used by solver/equilibrium/lyapunov

    def block_states_for(self, pG, hG, omega, Tbar):
        """Block states reproducing outputs pG/hG at given inputs."""
        xg = np.asarray(pG) + self.gen_ff * np.asarray(omega)[self.gen_bus]
        xs = np.asarray(hG) + self.src_ff * np.asarray(Tbar)[self.src_area]
        return xg, xs
