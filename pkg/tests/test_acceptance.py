"""Acceptance gate: one PASS/FAIL line per primary criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed
even when output capture is on.
"""

import dataclasses
import time

import numpy as np

from chpfreq.analysis import DEFAULT_BAND, DEFAULT_HOLD, settling_time, thermal_bookkeeping_gap
from chpfreq.dynamics import CoupledModel, passivity_margin
from chpfreq.equilibrium import (
    equilibrium,
    max_starred_gap,
    mode1_equilibrium,
    mode2_equilibrium,
    sharing_by_qp,
    starred_from_state,
)
from chpfreq.fixtures import FIXTURES, load_fixture, random_area, random_disturbance, random_system
from chpfreq.lyapunov import audit
from chpfreq.netmodel import BlockSpec
from chpfreq.solver import SimParams, integrate

from conftest import steady_run

MODE1_FIXTURES = ("f1_mode1", "f1_heat_step", "f39_analog_mode1")
MODE2_FIXTURES = ("f1_mode2", "f39_analog_mode2")


def report(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


def test_heat_matrix_structure(capsys):
    t0 = time.perf_counter()
    areas = [a for name in FIXTURES for a in load_fixture(name).system.areas]
    rng = np.random.default_rng(20240)
    areas += [random_area(rng, f"R{i}") for i in range(50)]
    row = col = 0.0
    min_eig = np.inf
    second = np.inf
    worst_null = 0.0
    for a in areas:
        A = a.A_h
        one = np.ones(a.dim)
        row = max(row, np.max(np.abs(A @ one)))
        col = max(col, np.max(np.abs(one @ A)))
        ev = np.linalg.eigvalsh(0.5 * (A + A.T))
        min_eig = min(min_eig, ev[0])
        worst_null = max(worst_null, abs(ev[0]))
        second = min(second, ev[1])
    dt = time.perf_counter() - t0
    # one near-zero eigenvalue, the rest clearly positive
    ok = row <= 1e-12 and col <= 1e-12 and min_eig >= -1e-12 and worst_null <= 1e-10 and second > 1e-8 and dt < 5
    report(
        capsys,
        "heat matrix structure",
        ok,
        f"{len(areas)} areas, |A1|={row:.1e}, |1'A|={col:.1e}, min eig={min_eig:.1e}, "
        f"second eig>={second:.2e}, {dt:.2f} s",
    )


def _route_gaps(system, dP, dH, oracle):
    ref = oracle(system, dP, dH)
    st = ref.starred()
    gaps = []
    for numeric in (False, True):
        q = sharing_by_qp(system, dP, dH, numeric=numeric)
        gaps.append(max(abs(q[k] - v) for k, v in st.items() if k in q))
    return ref, q, gaps


def test_mode1_optimality_equivalence(capsys):
    t0 = time.perf_counter()
    cases = [(load_fixture(n).system, *load_fixture(n).totals()) for n in MODE1_FIXTURES]
    rng = np.random.default_rng(31)
    for _ in range(100):
        s = random_system(rng, 1)
        cases.append((s, *random_disturbance(rng, s)))
    worst = [0.0, 0.0]
    for s, dP, dH in cases:
        _, _, gaps = _route_gaps(s, dP, dH, mode1_equilibrium)
        worst = [max(w, g) for w, g in zip(worst, gaps)]
    dt = time.perf_counter() - t0
    ok = max(worst) <= 1e-8 and dt < 10
    report(
        capsys,
        "Mode-1 closed form vs optimisation",
        ok,
        f"{len(cases)} systems, analytic gap {worst[0]:.1e}, numeric gap {worst[1]:.1e}, {dt:.2f} s",
    )


def test_mode2_optimality_equivalence(capsys):
    t0 = time.perf_counter()
    cases = [(load_fixture(n).system, *load_fixture(n).totals()) for n in MODE2_FIXTURES]
    rng = np.random.default_rng(47)
    for _ in range(100):
        s = random_system(rng, 2)
        cases.append((s, *random_disturbance(rng, s)))
    worst = [0.0, 0.0]
    mult = 0.0
    for s, dP, dH in cases:
        ref, _, gaps = _route_gaps(s, dP, dH, mode2_equilibrium)
        worst = [max(w, g) for w, g in zip(worst, gaps)]
        q = sharing_by_qp(s, dP, dH)
        mult = max(mult, abs(q["lam"] - ref.omega))
        for p in s.pumps:
            mult = max(mult, abs(q[f"mu_{p.area}"] - ref.omega / p.cop))
    dt = time.perf_counter() - t0
    ok = max(worst) <= 1e-8 and mult <= 1e-10
    report(
        capsys,
        "Mode-2 closed form vs optimisation",
        ok,
        f"{len(cases)} systems, analytic gap {worst[0]:.1e}, numeric gap {worst[1]:.1e}, "
        f"multiplier gap {mult:.1e}, {dt:.2f} s",
    )


def test_convergence_to_equilibrium(capsys):
    t0 = time.perf_counter()
    names = ("f1_mode1", "f1_mode2", "f39_analog_mode1", "f39_analog_mode2")
    gaps = {}
    for name in names:
        cfg, model, traj, xf = steady_run(name)
        dP, dH = cfg.totals()
        sim = starred_from_state(model, xf, model.loads(dP, dH))
        gaps[name] = max_starred_gap(sim, equilibrium(cfg.system, dP, dH).starred())
    dt = time.perf_counter() - t0
    ok = max(gaps.values()) <= 1e-5 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in gaps.items())
    report(capsys, "convergence to the equilibrium", ok, f"{detail}, {dt:.2f} s")


def test_storage_function_audit(capsys):
    results = []
    for name in MODE1_FIXTURES:
        traj = steady_run(name)[2]
        results.append((name, audit(traj, [("v1e", "monotone")]).functions[0]))
        if name == "f1_heat_step":
            results.append((name, audit(traj, [("v1h", "monotone")]).functions[0]))
        else:
            results.append((name, audit(traj, [("v1h", "converges")], converge_tol=1e-8).functions[0]))
    for name in MODE2_FIXTURES:
        traj = steady_run(name)[2]
        results.append((name, audit(traj, [("v2", "monotone")]).functions[0]))
    ok = all(f.passed for _, f in results)
    detail = "; ".join(
        f"{n} {f.name} {f.kind} {'ok' if f.passed else 'FAIL'}"
        + (f" final {f.final_value:.1e}" if f.kind == "converges" else "")
        for n, f in results
    )
    report(capsys, "storage function audit", ok, detail)


def test_power_sharing_ratios(capsys):
    cfg, model, traj, xf = steady_run("f39_analog_mode2")
    out = model.outputs(xf, model.loads(*cfg.totals()))
    hG = dict(zip(model.source_ids, out.hG))
    pG = dict(zip(model.gen_bus_ids, out.pG))
    ratios = {}
    for name, a, b in (("hG", "H1s1", "H1s2"), ("pG", "G1", "G2")):
        src = hG if name == "hG" else pG
        ratios[f"{name} {a}:{b}"] = src[a] / src[b]
    costs = (
        model.src_specs[model.source_ids.index("H1s1")].cost,
        model.src_specs[model.source_ids.index("H1s2")].cost,
    )
    assert costs == (2.0, 1.0)
    ok = all(abs(r - 0.5) <= 1e-3 for r in ratios.values())
    report(capsys, "power sharing 1:2", ok, ", ".join(f"{k} = {v:.6f}" for k, v in ratios.items()))


def _frequency_settling(name):
    cfg, model, traj, _ = steady_run(name)
    omega = traj.output_series("omega")
    after = cfg.last_disturbance
    times = [settling_time(traj.times, omega[:, i], DEFAULT_BAND, DEFAULT_HOLD, after).time for i in range(omega.shape[1])]
    return None if any(t is None for t in times) else max(times)


def test_mode_ordering(capsys):
    c1, c2 = load_fixture("f39_analog_mode1"), load_fixture("f39_analog_mode2")
    w1 = equilibrium(c1.system, *c1.totals()).omega
    w2 = equilibrium(c2.system, *c2.totals()).omega
    s1, s2 = _frequency_settling("f39_analog_mode1"), _frequency_settling("f39_analog_mode2")
    ok = abs(w1 - w2) <= 1e-12 and s1 is not None and s2 is not None and s1 <= s2
    report(
        capsys,
        "mode ordering",
        ok,
        f"matched omega* {w1:.8f} / {w2:.8f}, frequency settling Mode 1 {s1} s, Mode 2 {s2} s "
        f"(band {DEFAULT_BAND:g}, hold {DEFAULT_HOLD:g} s)",
    )


def test_thermal_bookkeeping(capsys):
    worst = {}
    for name in FIXTURES:
        cfg, model, traj, _ = steady_run(name)
        gap = 0.0
        for s, (_, _, loads) in enumerate(traj.segments):
            idx = traj.segment_samples(s)
            if len(idx) < 3:
                continue
            X = traj.states[idx]
            H = np.array([model.heat_injection(x, loads) for x in X])
            Tbar = X[:, model.layout.T] @ model.avg_weights.T
            for k in range(len(model.area_ids)):
                inj = H[:, model.area_slice(k)].sum(axis=1)
                gap = max(gap, thermal_bookkeeping_gap(traj.times[idx], Tbar[:, k], inj, model.total_volume[k]))
        worst[name] = gap
    ok = max(worst.values()) <= 1e-6
    report(capsys, "thermal energy bookkeeping", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_rk4_order(capsys):
    cfg = load_fixture("f1_mode1")
    model = CoupledModel(cfg.system)
    base = SimParams(t_end=11.0, dt=0.2)
    dts = (0.2, 0.1, 0.05, 0.025)
    finals = [integrate(model, model.zero_state(), dataclasses.replace(base, dt=h), cfg.disturbances).final for h in dts]
    errs = [np.max(np.abs(finals[i] - finals[i + 1])) for i in range(len(dts) - 1)]
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
    ok = min(orders) >= 3.5
    report(capsys, "RK4 self-convergence", ok, "observed orders " + ", ".join(f"{p:.3f}" for p in orders))


def test_passivity_margins(capsys):
    rng = np.random.default_rng(2024)
    grid = np.logspace(-3, 3, 601)
    worst = np.inf
    for _ in range(20):
        cost = 10 ** rng.uniform(-1, 1)
        tau = 10 ** rng.uniform(-1, 1)
        alpha = 10 ** rng.uniform(-2, 1)
        b = BlockSpec(tau=tau, cost=cost, kind="lead-lag", alpha=alpha)
        worst = min(worst, passivity_margin(b, grid) - b.gain * min(1.0, alpha))
    ok = worst >= -1e-9
    report(capsys, "lead-lag passivity margin", ok, f"20 triples, min(margin - gain*min(1, alpha)) = {worst:.2e}")
