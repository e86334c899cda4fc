"""Bundled scenarios and seeded random system generators."""

from __future__ import annotations

from importlib import resources

import numpy as np

from .config import ScenarioConfig, parse_config, read_document
from .netmodel import (
    BlockSpec,
    CombinedSystem,
    HeatArea,
    HeatEdge,
    HeatNode,
    PowerBus,
    PowerLine,
    PumpCoupling,
)

FIXTURES = ("f1_mode1", "f1_mode2", "f1_heat_step", "f39_analog_mode1", "f39_analog_mode2")


def fixture_path(name: str):
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; known: {', '.join(FIXTURES)}")
    return resources.files("chpfreq") / "data" / f"{name}.json"


def load_fixture(name: str) -> ScenarioConfig:
    with resources.as_file(fixture_path(name)) as p:
        return parse_config(read_document(p))


def random_area(rng: np.random.Generator, area_id: str = "A", n_nodes=None, n_cycles=None, n_sources=None) -> HeatArea:
    """Connected heating area whose flows are a sum of positive cycle flows.

    A Hamiltonian cycle keeps the area connected; extra cycles over random
    node subsets add parallel paths.  Mass flow is conserved by construction.
    Roles: one pump, ``n_sources`` sources, one load, the rest pipes.
    """
    n = int(n_nodes or rng.integers(3, 8))
    n_cycles = int(rng.integers(0, 4) if n_cycles is None else n_cycles)
    node_ids = [f"{area_id}n{i}" for i in range(n)]
    cycles = [list(rng.permutation(n))]
    for _ in range(n_cycles):
        k = int(rng.integers(2, n + 1))
        cycles.append(list(rng.choice(n, size=k, replace=False)))
    arcs = []
    for cyc in cycles:
        q = float(rng.uniform(0.2, 2.0))
        for i, u in enumerate(cyc):
            arcs.append((int(u), int(cyc[(i + 1) % len(cyc)]), q))
    m = len(arcs)
    n_sources = int(n_sources or rng.integers(1, max(2, min(3, m - 2) + 1)))
    roles = ["pump"] + ["source"] * n_sources + ["load"] + ["pipe"] * (m - 2 - n_sources)
    edges = []
    for j, ((u, v, q), role) in enumerate(zip(arcs, roles)):
        src = BlockSpec(tau=float(rng.uniform(0.5, 3.0)), cost=float(rng.uniform(0.5, 3.0))) if role == "source" else None
        edges.append(
            HeatEdge(
                id=f"{area_id}e{j}",
                from_node=node_ids[u],
                to_node=node_ids[v],
                volume=float(rng.uniform(0.3, 2.0)),
                flow=q,
                role=role,
                source=src,
            )
        )
    nodes = [HeatNode(i, float(rng.uniform(0.2, 1.5))) for i in node_ids]
    return HeatArea(area_id, tuple(nodes), tuple(edges))


def _random_grid(rng, n_buses):
    """Random spanning tree plus a few chords over ``n_buses`` buses."""
    pairs = []
    for i in range(1, n_buses):
        pairs.append((int(rng.integers(0, i)), i))
    for _ in range(int(rng.integers(0, n_buses))):
        i, j = sorted(int(v) for v in rng.choice(n_buses, size=2, replace=False))
        if (i, j) not in pairs:
            pairs.append((i, j))
    return pairs


def random_system(rng: np.random.Generator, mode: int = 1, n_areas=None, n_generators=None, n_loads=None) -> CombinedSystem:
    """Connected system with one pump per heating area, all in ``mode``.

    Line susceptances are large relative to the injections used in tests so
    the equilibrium angles stay well inside (-pi/2, pi/2).
    """
    n_areas = int(n_areas or rng.integers(1, 4))
    n_gen = int(n_generators or rng.integers(1, 4))
    n_load = int(rng.integers(0, 3) if n_loads is None else n_loads)
    buses = []
    for i in range(n_gen):
        g = BlockSpec(tau=float(rng.uniform(0.5, 3.0)), cost=float(rng.uniform(0.5, 3.0)))
        buses.append(PowerBus(f"G{i}", M=float(rng.uniform(2, 10)), D=float(rng.uniform(0.2, 2)), kind="generator", generator=g))
    for i in range(n_load):
        inertial = bool(rng.integers(0, 2))
        buses.append(
            PowerBus(f"L{i}", M=float(rng.uniform(0.5, 3)) if inertial else 0.0, D=float(rng.uniform(0.2, 2)), kind="load")
        )
    areas, pumps = [], []
    for k in range(n_areas):
        area = random_area(rng, f"H{k}")
        areas.append(area)
        pump_edge = area.edges_with_role("pump")[0].id
        bus_id = f"P{k}"
        cop = float(rng.uniform(2.0, 4.0))
        if mode == 1:
            inertial = bool(rng.integers(0, 2))
            buses.append(
                PowerBus(bus_id, M=float(rng.uniform(0.5, 3)) if inertial else 0.0, D=float(rng.uniform(0, 1)), kind="pump-mode1")
            )
            pumps.append(PumpCoupling(bus_id, area.id, pump_edge, cop, 1, a1=float(rng.uniform(0.1, 2.0))))
        else:
            buses.append(PowerBus(bus_id, kind="pump-converter"))
            pumps.append(PumpCoupling(bus_id, area.id, pump_edge, cop, 2, m=float(rng.uniform(0.3, 2.0))))
    # converter buses hang off the rest of the grid as leaves
    core = [b for b in buses if b.kind != "pump-converter"]
    lines = [PowerLine(core[i].id, core[j].id, float(rng.uniform(20, 50))) for i, j in _random_grid(rng, len(core))]
    for b in buses:
        if b.kind == "pump-converter":
            host = core[int(rng.integers(0, len(core)))]
            lines.append(PowerLine(host.id, b.id, float(rng.uniform(20, 50))))
    return CombinedSystem(tuple(buses), tuple(lines), tuple(areas), tuple(pumps), name=f"random-mode{mode}")


def random_disturbance(rng: np.random.Generator, system: CombinedSystem, scale: float = 0.3):
    """(dP, dH) steps on a random subset of load-capable buses and heat-load edges."""
    buses = [b.id for b in system.buses if b.kind != "pump-converter"]
    dP = {b: float(rng.uniform(-scale, scale)) for b in buses if rng.random() < 0.6}
    dH = {}
    for a in system.areas:
        for e in a.edges_with_role("load"):
            if rng.random() < 0.7:
                dH[e.id] = float(rng.uniform(-scale, scale))
    return dP, dH
