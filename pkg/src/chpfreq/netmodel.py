"""Network description for coupled power / district-heating systems.

All quantities are per-unit deviations from nominal, with rho*C_p = 1 on the
heating side.  Objects here are frozen dataclasses; derived matrices are cached
on first access and never mutated afterwards.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

BUS_KINDS = ("generator", "load", "pump-mode1", "pump-converter")
EDGE_ROLES = ("pump", "source", "load", "pipe")
BLOCK_KINDS = ("first-order", "lead-lag")

# relative tolerance for node mass-flow balance
FLOW_BALANCE_RTOL = 1e-9


class TopologyError(ValueError):
    """An edge or line references a node/bus that does not exist."""


class FlowConservationError(ValueError):
    """Mass inflow and outflow differ at a heat node."""

    def __init__(self, node, inflow, outflow):
        self.node = node
        super().__init__(
            f"mass-flow conservation violated at node {node!r}: "
            f"inflow {inflow:.12g} != outflow {outflow:.12g}"
        )


class ValidationError(ValueError):
    def __init__(self, report):
        self.report = report
        super().__init__("system failed validation:\n" + str(report))


@dataclass(frozen=True)
class BlockSpec:
    """First-order or lead-lag control block.

    ``cost`` is the cost coefficient Q; the static gain is 1/Q.  The lead-lag
    block has transfer gain*(1 + alpha*tau*s)/(1 + tau*s) from the negated
    input to the output; ``first-order`` is the alpha = 0 case.
    """

    tau: float
    cost: float
    kind: str = "first-order"
    alpha: float = 0.0

    @property
    def gain(self) -> float:
        return 1.0 / self.cost

    @property
    def feedthrough(self) -> float:
        """Direct input-to-output gain (alpha * gain)."""
        return self.alpha * self.gain if self.kind == "lead-lag" else 0.0

    @property
    def state_gain(self) -> float:
        """Gain on the input in the state equation, (1 - alpha) * gain."""
        return self.gain - self.feedthrough

    def transfer(self, nu):
        """G(j*nu) from the negated input to the output."""
        s = 1j * np.asarray(nu, dtype=float)
        a = self.alpha if self.kind == "lead-lag" else 0.0
        return self.gain * (1.0 + a * self.tau * s) / (1.0 + self.tau * s)


# Generators and heat sources share one block realization.
GeneratorSpec = BlockSpec
HeatSourceSpec = BlockSpec


@dataclass(frozen=True)
class PowerBus:
    id: str
    M: float = 0.0
    D: float = 0.0
    kind: str = "load"
    generator: BlockSpec | None = None

    @property
    def inertial(self) -> bool:
        return self.M > 0.0


@dataclass(frozen=True)
class PowerLine:
    from_bus: str
    to_bus: str
    B: float
    eta0: float = 0.0

    @property
    def id(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class HeatNode:
    id: str
    volume: float


@dataclass(frozen=True)
class HeatEdge:
    id: str
    from_node: str
    to_node: str
    volume: float
    flow: float
    role: str = "pipe"
    source: BlockSpec | None = None
    load_base: float = 0.0


@dataclass(frozen=True)
class HeatArea:
    id: str
    nodes: tuple[HeatNode, ...]
    edges: tuple[HeatEdge, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @cached_property
    def node_index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def edge_index(self) -> dict[str, int]:
        return {e.id: i for i, e in enumerate(self.edges)}

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def dim(self) -> int:
        return len(self.edges) + len(self.nodes)

    @cached_property
    def volumes(self) -> np.ndarray:
        """Diagonal of V, edges first then nodes."""
        return np.array([e.volume for e in self.edges] + [n.volume for n in self.nodes], dtype=float)

    @cached_property
    def total_volume(self) -> float:
        return float(self.volumes.sum())

    @cached_property
    def flows(self) -> np.ndarray:
        return np.array([e.flow for e in self.edges], dtype=float)

    @cached_property
    def incidence(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return build_incidence(self)

    @cached_property
    def A_h(self) -> np.ndarray:
        return build_Ah(self)

    def edges_with_role(self, role: str) -> list[HeatEdge]:
        return [e for e in self.edges if e.role == role]


@dataclass(frozen=True)
class PumpCoupling:
    """Heat pump linking power bus ``bus`` to pump edge ``edge`` of ``area``.

    Mode 1 uses ``a1`` (frequency-dependent load), Mode 2 uses ``m``
    (converter frequency set to m * average temperature).
    """

    bus: str
    area: str
    edge: str
    cop: float
    mode: int
    a1: float | None = None
    m: float | None = None

    @property
    def id(self) -> str:
        return self.edge

    @property
    def alpha(self) -> float:
        """Heat-cost weight m / C_o used by the joint sharing problem."""
        if self.mode != 2:
            raise ValueError("alpha is only defined for Mode-2 pumps")
        return self.m / self.cop


@dataclass(frozen=True)
class CombinedSystem:
    buses: tuple[PowerBus, ...]
    lines: tuple[PowerLine, ...]
    areas: tuple[HeatArea, ...] = ()
    pumps: tuple[PumpCoupling, ...] = ()
    name: str = ""

    def __post_init__(self):
        for f in ("buses", "lines", "areas", "pumps"):
            object.__setattr__(self, f, tuple(getattr(self, f)))

    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def area_index(self) -> dict[str, int]:
        return {a.id: i for i, a in enumerate(self.areas)}

    def bus(self, bus_id: str) -> PowerBus:
        return self.buses[self.bus_index[bus_id]]

    def area(self, area_id: str) -> HeatArea:
        return self.areas[self.area_index[area_id]]

    @property
    def modes(self) -> set[int]:
        return {p.mode for p in self.pumps}

    def pumps_in_area(self, area_id: str) -> list[PumpCoupling]:
        return [p for p in self.pumps if p.area == area_id]


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------


def build_incidence(area: HeatArea) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (B_h, B_th, B_sh) for ``area``.

    B_h[i, j] is +1 when edge j injects into node i and -1 when it leaves
    node i.  B_th keeps the +1 entries, B_sh the magnitudes of the -1 entries.
    """
    nidx = area.node_index
    B = np.zeros((area.n_nodes, area.n_edges))
    for j, e in enumerate(area.edges):
        for end in (e.from_node, e.to_node):
            if end not in nidx:
                raise TopologyError(f"edge {e.id!r} references unknown node {end!r}")
        if e.from_node == e.to_node:
            raise TopologyError(f"edge {e.id!r} is a self-loop on node {e.from_node!r}")
        B[nidx[e.to_node], j] = 1.0
        B[nidx[e.from_node], j] = -1.0
    absB = np.abs(B)
    B_th = (absB + B) / 2.0
    B_sh = (absB - B) / 2.0
    return B, B_th, B_sh


def flow_imbalance(area: HeatArea) -> list[tuple[str, float, float]]:
    """Nodes whose inflow and outflow differ, as (node, inflow, outflow)."""
    inflow = defaultdict(float)
    outflow = defaultdict(float)
    for e in area.edges:
        inflow[e.to_node] += e.flow
        outflow[e.from_node] += e.flow
    bad = []
    for n in area.nodes:
        qi, qo = inflow[n.id], outflow[n.id]
        if abs(qi - qo) > FLOW_BALANCE_RTOL * max(1.0, qi, qo):
            bad.append((n.id, qi, qo))
    return bad


def build_Ah(area: HeatArea) -> np.ndarray:
    """Assemble the heat-transport matrix of one area.

    Block layout (edges first, then nodes)::

        [ diag(q)        -diag(q) B_sh^T ]
        [ -B_th diag(q)   diag(B_th q)   ]

    Raises FlowConservationError if any node is unbalanced, since the
    zero row/column-sum property depends on it.
    """
    if any(e.flow <= 0 for e in area.edges):
        bad = next(e for e in area.edges if e.flow <= 0)
        raise ValueError(f"edge {bad.id!r} has non-positive mass flow {bad.flow}")
    _, B_th, B_sh = area.incidence
    bad = flow_imbalance(area)
    if bad:
        raise FlowConservationError(*bad[0])
    q = area.flows
    Q = np.diag(q)
    top = np.hstack([Q, -Q @ B_sh.T])
    bottom = np.hstack([-B_th @ Q, np.diag(B_th @ q)])
    return np.vstack([top, bottom])


def average_temperature(area: HeatArea, T) -> float:
    """Volume-weighted mean of the stacked (edge, node) temperature vector."""
    T = np.asarray(T, dtype=float)
    if T.shape[-1] != area.dim:
        raise ValueError(f"temperature vector has length {T.shape[-1]}, area {area.id!r} needs {area.dim}")
    return T @ area.volumes / area.total_volume


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Issue:
    severity: str  # "error" | "warning"
    code: str
    message: str

    def __str__(self):
        return f"[{self.severity}] {self.code}: {self.message}"


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    def error(self, code, message):
        self.issues.append(Issue("error", code, message))

    def warning(self, code, message):
        self.issues.append(Issue("warning", code, message))

    @property
    def errors(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "error"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self) -> list[str]:
        return [i.code for i in self.issues]

    def __len__(self):
        return len(self.issues)

    def __str__(self):
        if not self.issues:
            return "no issues"
        return "\n".join(str(i) for i in self.issues)


def _connected(ids, pairs) -> bool:
    ids = list(ids)
    if not ids:
        return True
    adj = defaultdict(set)
    for a, b in pairs:
        adj[a].add(b)
        adj[b].add(a)
    seen = {ids[0]}
    stack = [ids[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen >= set(ids)


def _check_block(report, owner, spec):
    if not spec.tau > 0:
        report.error("block-tau", f"{owner}: time constant must be > 0 (got {spec.tau})")
    if not spec.cost > 0:
        report.error("block-cost", f"{owner}: cost coefficient must be > 0 (got {spec.cost})")
    if spec.kind not in BLOCK_KINDS:
        report.error("block-kind", f"{owner}: unknown block kind {spec.kind!r}")
    elif spec.kind == "lead-lag" and not spec.alpha > 0:
        report.error("block-alpha", f"{owner}: lead-lag ratio alpha must be > 0 (got {spec.alpha})")


def _duplicates(ids):
    seen, dup = set(), []
    for i in ids:
        if i in seen and i not in dup:
            dup.append(i)
        seen.add(i)
    return dup


def validate(system: CombinedSystem) -> ValidationReport:
    """Check a system for well-posedness.  Returns every violation found."""
    r = ValidationReport()

    for d in _duplicates(b.id for b in system.buses):
        r.error("duplicate-id", f"bus id {d!r} used more than once")
    for d in _duplicates(a.id for a in system.areas):
        r.error("duplicate-id", f"area id {d!r} used more than once")
    for d in _duplicates(n.id for a in system.areas for n in a.nodes):
        r.error("duplicate-id", f"heat node id {d!r} used more than once")
    for d in _duplicates(e.id for a in system.areas for e in a.edges):
        r.error("duplicate-id", f"heat edge id {d!r} used more than once")
    for d in _duplicates(ln.id for ln in system.lines):
        r.error("duplicate-id", f"line {d!r} appears more than once")

    mode1_gain = defaultdict(float)
    for p in system.pumps:
        if p.mode == 1 and p.a1 is not None and p.a1 > 0:
            mode1_gain[p.bus] += p.a1

    # buses
    for b in system.buses:
        if b.kind not in BUS_KINDS:
            r.error("bus-kind", f"bus {b.id!r}: unknown kind {b.kind!r}")
        if b.M < 0 or b.D < 0:
            r.error("negative-parameter", f"bus {b.id!r}: inertia and damping must be >= 0")
        if b.kind == "pump-converter":
            if b.generator is not None or b.M != 0 or b.D != 0:
                r.error(
                    "converter-bus",
                    f"bus {b.id!r}: converter buses carry no generator, inertia or damping",
                )
        else:
            if b.M == 0 and b.D == 0 and mode1_gain[b.id] == 0:
                r.error(
                    "underdetermined-bus",
                    f"bus {b.id!r}: algebraically underdetermined bus (M = 0 and D = 0, no Mode-1 pump)",
                )
        if b.kind == "generator" and b.generator is None:
            r.error("missing-generator", f"bus {b.id!r}: generator bus without generator spec")
        if b.generator is not None:
            _check_block(r, f"generator at bus {b.id!r}", b.generator)

    # lines
    bus_ids = {b.id for b in system.buses}
    for ln in system.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in bus_ids:
                r.error("dangling-line", f"line {ln.id!r} references unknown bus {end!r}")
        if ln.from_bus == ln.to_bus:
            r.error("self-loop", f"line {ln.id!r} connects a bus to itself")
        if not ln.B > 0:
            r.error("line-susceptance", f"line {ln.id!r}: susceptance must be > 0 (got {ln.B})")
        if not abs(ln.eta0) < math.pi / 2:
            r.error(
                "security-constraint",
                f"line {ln.id!r}: |eta0| = {abs(ln.eta0):.6g} must be < pi/2",
            )
    if not _connected(bus_ids, [(ln.from_bus, ln.to_bus) for ln in system.lines]):
        r.error("power-disconnected", "power network graph is not connected")

    # heating areas
    for a in system.areas:
        nids = {n.id for n in a.nodes}
        for n in a.nodes:
            if not n.volume > 0:
                r.error("node-volume", f"area {a.id!r}, node {n.id!r}: volume must be > 0")
        dangling = False
        for e in a.edges:
            for end in (e.from_node, e.to_node):
                if end not in nids:
                    r.error("dangling-edge", f"area {a.id!r}, edge {e.id!r} references unknown node {end!r}")
                    dangling = True
            if e.from_node == e.to_node:
                r.error("self-loop", f"area {a.id!r}, edge {e.id!r} is a self-loop")
            if not e.volume > 0:
                r.error("edge-volume", f"area {a.id!r}, edge {e.id!r}: volume must be > 0")
            if not e.flow > 0:
                r.error("edge-flow", f"area {a.id!r}, edge {e.id!r}: mass flow must be > 0")
            if e.role not in EDGE_ROLES:
                r.error("edge-role", f"area {a.id!r}, edge {e.id!r}: unknown role {e.role!r}")
            if (e.role == "source") != (e.source is not None):
                r.error(
                    "edge-source",
                    f"area {a.id!r}, edge {e.id!r}: a source spec is required iff role is 'source'",
                )
            if e.source is not None:
                _check_block(r, f"heat source on edge {e.id!r}", e.source)
            if e.load_base != 0 and e.role != "load":
                r.error("edge-load", f"area {a.id!r}, edge {e.id!r}: base heat load only allowed on load edges")
        if not dangling:
            for node, qi, qo in flow_imbalance(a):
                r.error(
                    "flow-conservation",
                    f"area {a.id!r}, node {node!r}: inflow {qi:.12g} != outflow {qo:.12g}",
                )
            if not _connected(nids, [(e.from_node, e.to_node) for e in a.edges]):
                r.error("area-disconnected", f"area {a.id!r}: heat network graph is not connected")
        if not a.nodes or not a.edges:
            r.error("area-empty", f"area {a.id!r} needs at least one node and one edge")

    # pumps
    areas = {a.id: a for a in system.areas}
    buses = {b.id: b for b in system.buses}
    used_edges = defaultdict(int)
    per_bus = defaultdict(int)
    for p in system.pumps:
        tag = f"pump on edge {p.edge!r}"
        if p.bus not in buses:
            r.error("pump-reference", f"{tag}: unknown bus {p.bus!r}")
        if p.area not in areas:
            r.error("pump-reference", f"{tag}: unknown area {p.area!r}")
        else:
            edge = next((e for e in areas[p.area].edges if e.id == p.edge), None)
            if edge is None:
                r.error("pump-reference", f"{tag}: edge not found in area {p.area!r}")
            elif edge.role != "pump":
                r.error("pump-reference", f"{tag}: edge role is {edge.role!r}, expected 'pump'")
        used_edges[p.edge] += 1
        per_bus[p.bus] += 1
        if not p.cop > 0:
            r.error("pump-cop", f"{tag}: coefficient of performance must be > 0")
        if p.mode == 1:
            if p.a1 is None or not p.a1 > 0:
                r.error("pump-gain", f"{tag}: Mode 1 needs a1 > 0")
            if p.bus in buses and buses[p.bus].kind != "pump-mode1":
                r.error("pump-mode", f"{tag}: Mode-1 pump must attach to a 'pump-mode1' bus")
        elif p.mode == 2:
            if p.m is None or not p.m > 0:
                r.error("pump-gain", f"{tag}: Mode 2 needs m > 0")
            if p.bus in buses and buses[p.bus].kind != "pump-converter":
                r.error("pump-mode", f"{tag}: Mode-2 pump must attach to a 'pump-converter' bus")
        else:
            r.error("pump-mode", f"{tag}: mode must be 1 or 2 (got {p.mode!r})")
    for edge_id, n in used_edges.items():
        if n > 1:
            r.error("pump-reference", f"edge {edge_id!r} is driven by {n} pumps")
    for b in system.buses:
        if b.kind == "pump-converter" and per_bus[b.id] != 1:
            r.error("converter-bus", f"bus {b.id!r}: converter bus must host exactly one pump")
    for a in system.areas:
        for e in a.edges_with_role("pump"):
            if used_edges[e.id] == 0:
                r.warning("idle-pump-edge", f"area {a.id!r}, edge {e.id!r}: pump edge without coupling")
        ms = [p.m for p in system.pumps if p.area == a.id and p.mode == 2 and p.m is not None]
        if len(set(ms)) > 1:
            r.error("mode2-m", f"area {a.id!r}: Mode-2 pumps in one area must share m (got {sorted(set(ms))})")
    return r


def require_valid(system: CombinedSystem) -> CombinedSystem:
    report = validate(system)
    if not report.ok:
        raise ValidationError(report)
    return system
