import functools

import numpy as np
import pytest

from chpfreq.dynamics import CoupledModel
from chpfreq.fixtures import load_fixture
from chpfreq.netmodel import BlockSpec, CombinedSystem, HeatArea, HeatEdge, HeatNode, PowerBus, PowerLine, PumpCoupling
from chpfreq.solver import integrate_to_steady


def ring3(q=1.0, V=1.0, source=None, load=0.0, prefix=""):
    """e1: n3->n1 (pump), e2: n1->n2 (source), e3: n2->n3 (load)."""
    n = [HeatNode(f"{prefix}n{i}", V) for i in (1, 2, 3)]
    e = [
        HeatEdge(f"{prefix}e1", f"{prefix}n3", f"{prefix}n1", V, q, "pump"),
        HeatEdge(f"{prefix}e2", f"{prefix}n1", f"{prefix}n2", V, q, "source", source or BlockSpec(1.0, 1.0)),
        HeatEdge(f"{prefix}e3", f"{prefix}n2", f"{prefix}n3", V, q, "load", load_base=load),
    ]
    return HeatArea(f"{prefix}area1", tuple(n), tuple(e))


def f1_system(mode=1, M2=1.0):
    gen = BlockSpec(tau=1.0, cost=1.0)
    b1 = PowerBus("bus1", M=10.0, D=1.0, kind="generator", generator=gen)
    if mode == 1:
        b2 = PowerBus("bus2", M=M2, D=1.0, kind="pump-mode1")
        pump = PumpCoupling("bus2", "area1", "e1", 3.0, 1, a1=1.0)
    else:
        b2 = PowerBus("bus2", kind="pump-converter")
        pump = PumpCoupling("bus2", "area1", "e1", 3.0, 2, m=1.0)
    return CombinedSystem((b1, b2), (PowerLine("bus1", "bus2", 5.0),), (ring3(),), (pump,))


@functools.lru_cache(maxsize=None)
def steady_run(name):
    """Integrate a bundled fixture to steady state once per session."""
    cfg = load_fixture(name)
    model = CoupledModel(cfg.system)
    traj, xf = integrate_to_steady(model, model.zero_state(), cfg.sim, cfg.disturbances)
    return cfg, model, traj, xf


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
