import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from chpfreq.fixtures import FIXTURES, load_fixture, random_area
from chpfreq.netmodel import (
    BlockSpec,
    CombinedSystem,
    FlowConservationError,
    HeatArea,
    HeatEdge,
    HeatNode,
    PowerBus,
    PowerLine,
    PumpCoupling,
    TopologyError,
    ValidationError,
    average_temperature,
    build_Ah,
    build_incidence,
    require_valid,
    validate,
)

from conftest import f1_system, ring3


def test_ring3_incidence_column_for_pump_edge():
    B, B_th, B_sh = build_incidence(ring3())
    # nodes n1, n2, n3; e1 goes n3 -> n1
    assert_array_equal(B[:, 0], [1, 0, -1])
    assert_array_equal(B_th + B_sh, np.abs(B))
    assert_array_equal(B_th - B_sh, B)


def test_single_edge_incidence():
    a = HeatArea("a", (HeatNode("n1", 1), HeatNode("n2", 1)), (HeatEdge("e", "n1", "n2", 1, 1),))
    _, B_th, B_sh = build_incidence(a)
    assert_array_equal(B_th[:, 0], [0, 1])
    assert_array_equal(B_sh[:, 0], [1, 0])


def test_incidence_rejects_dangling_edge():
    a = HeatArea("a", (HeatNode("n1", 1),), (HeatEdge("e", "n1", "nx", 1, 1),))
    with pytest.raises(TopologyError, match="nx"):
        build_incidence(a)


def test_ring3_Ah_row_of_pump_edge():
    A = build_Ah(ring3())
    # columns: e1 e2 e3 n1 n2 n3
    assert_allclose(A[0], [1, 0, 0, 0, 0, -1])
    assert_allclose(A.sum(axis=0), 0, atol=1e-12)
    assert_allclose(A.sum(axis=1), 0, atol=1e-12)


def test_ring3_symmetric_part_spectrum():
    A = build_Ah(ring3())
    w, v = np.linalg.eigh(0.5 * (A + A.T))
    assert abs(w[0]) < 1e-12
    assert np.all(w[1:] > 1e-6)
    assert_allclose(np.abs(v[:, 0]), np.full(6, 1 / math.sqrt(6)), atol=1e-12)


def test_Ah_flow_imbalance_names_node():
    n = (HeatNode("a", 1), HeatNode("b", 1))
    e = (HeatEdge("x", "a", "b", 1, 1.0), HeatEdge("y", "b", "a", 1, 2.0))
    with pytest.raises(FlowConservationError) as info:
        build_Ah(HeatArea("h", n, e))
    assert info.value.node == "a"


@pytest.mark.parametrize("seed", range(25))
def test_random_area_Ah_properties(seed):
    a = random_area(np.random.default_rng(seed), "A")
    A = a.A_h
    assert np.max(np.abs(A @ np.ones(a.dim))) <= 1e-12
    assert np.max(np.abs(np.ones(a.dim) @ A)) <= 1e-12
    w = np.linalg.eigvalsh(A + A.T)
    assert w.min() > -1e-10
    assert np.sum(np.abs(w) <= 1e-10) == 1
    _, B_th, B_sh = a.incidence
    assert B_th.min() >= 0 and B_sh.min() >= 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_average_of_constant_field(seed, c):
    a = random_area(np.random.default_rng(seed), "A")
    assert average_temperature(a, np.full(a.dim, c)) == pytest.approx(c, abs=1e-12)


def test_average_temperature_examples():
    a = ring3()
    assert average_temperature(a, np.zeros(6)) == 0.0
    assert average_temperature(a, np.arange(1, 7)) == pytest.approx(3.5)
    with pytest.raises(ValueError):
        average_temperature(a, np.zeros(5))


def test_f1_fixture_validates_clean():
    assert len(validate(f1_system(1))) == 0
    assert len(validate(f1_system(2))) == 0


@pytest.mark.parametrize("name", FIXTURES)
def test_bundled_fixtures_validate(name):
    assert validate(load_fixture(name).system).ok


def test_flow_conservation_violation_names_node():
    a = ring3()
    edges = list(a.edges)
    edges[1] = HeatEdge("e2", "n1", "n2", 1.0, 2.0, "source", BlockSpec(1, 1))
    s = f1_system()
    bad = CombinedSystem(s.buses, s.lines, (HeatArea("area1", a.nodes, tuple(edges)),), s.pumps)
    r = validate(bad)
    assert "flow-conservation" in r.codes()
    assert any("'n1'" in i.message for i in r.errors)


def test_underdetermined_load_bus():
    s = f1_system()
    buses = s.buses + (PowerBus("bus3", M=0.0, D=0.0, kind="load"),)
    lines = s.lines + (PowerLine("bus1", "bus3", 2.0),)
    r = validate(CombinedSystem(buses, lines, s.areas, s.pumps))
    assert "underdetermined-bus" in r.codes()
    with pytest.raises(ValidationError):
        require_valid(CombinedSystem(buses, lines, s.areas, s.pumps))


def test_mode1_pump_bus_without_damping_is_determined_by_a1():
    s = f1_system()
    buses = (s.buses[0], PowerBus("bus2", M=0.0, D=0.0, kind="pump-mode1"))
    assert validate(CombinedSystem(buses, s.lines, s.areas, s.pumps)).ok


def test_pump_mode_bus_kind_mismatch():
    s = f1_system(1)
    pump = PumpCoupling("bus2", "area1", "e1", 3.0, 2, m=1.0)
    assert "pump-mode" in validate(CombinedSystem(s.buses, s.lines, s.areas, (pump,))).codes()


def test_unequal_mode2_m_in_one_area():
    area = ring3()
    extra_nodes = area.nodes + (HeatNode("n4", 1.0),)
    # second pump edge forming its own loop through n4
    edges = area.edges + (
        HeatEdge("e4", "n1", "n4", 1.0, 0.5, "pump"),
        HeatEdge("e5", "n4", "n1", 1.0, 0.5, "pipe"),
    )
    a = HeatArea("area1", extra_nodes, edges)
    gen = BlockSpec(1.0, 1.0)
    buses = (
        PowerBus("bus1", 10, 1, "generator", gen),
        PowerBus("c1", kind="pump-converter"),
        PowerBus("c2", kind="pump-converter"),
    )
    lines = (PowerLine("bus1", "c1", 5.0), PowerLine("bus1", "c2", 5.0))
    pumps = (PumpCoupling("c1", "area1", "e1", 3.0, 2, m=1.0), PumpCoupling("c2", "area1", "e4", 3.0, 2, m=2.0))
    assert "mode2-m" in validate(CombinedSystem(buses, lines, (a,), pumps)).codes()


def test_security_constraint_on_initial_angle():
    s = f1_system()
    r = validate(CombinedSystem(s.buses, (PowerLine("bus1", "bus2", 5.0, eta0=1.6),), s.areas, s.pumps))
    assert "security-constraint" in r.codes()


def test_disconnected_power_network():
    s = f1_system()
    buses = s.buses + (PowerBus("iso", M=1.0, D=1.0),)
    assert "power-disconnected" in validate(CombinedSystem(buses, s.lines, s.areas, s.pumps)).codes()


def test_source_spec_required_iff_role_source():
    a = ring3()
    edges = (a.edges[0], HeatEdge("e2", "n1", "n2", 1.0, 1.0, "source"), a.edges[2])
    s = f1_system()
    r = validate(CombinedSystem(s.buses, s.lines, (HeatArea("area1", a.nodes, edges),), s.pumps))
    assert "edge-source" in r.codes()


def test_converter_bus_rejects_inertia():
    s = f1_system(2)
    buses = (s.buses[0], PowerBus("bus2", M=1.0, kind="pump-converter"))
    assert "converter-bus" in validate(CombinedSystem(buses, s.lines, s.areas, s.pumps)).codes()


def test_lead_lag_needs_positive_alpha():
    s = f1_system()
    g = BlockSpec(1.0, 1.0, "lead-lag", 0.0)
    buses = (PowerBus("bus1", 10, 1, "generator", g), s.buses[1])
    assert "block-alpha" in validate(CombinedSystem(buses, s.lines, s.areas, s.pumps)).codes()


def test_idle_pump_edge_is_a_warning_only():
    s = f1_system()
    r = validate(CombinedSystem(s.buses, s.lines, s.areas, ()))
    assert r.ok and "idle-pump-edge" in r.codes()


def test_validation_is_deterministic():
    s = f1_system()
    bad = CombinedSystem(s.buses + (PowerBus("x"),), s.lines, s.areas, s.pumps)
    assert str(validate(bad)) == str(validate(bad))
