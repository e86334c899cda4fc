"""Command-line interface.

Exit codes: 0 ok, 1 usage, 2 validation, 3 divergence, 4 audit failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import DEFAULT_BAND, DEFAULT_HOLD, CSVFormatError, analyze_table, read_trajectory_csv
from .config import ConfigError, ScenarioConfig, parse_config, read_document, resolved_document
from .dynamics import CoupledModel
from .equilibrium import (
    ModeError,
    SecurityConstraintError,
    UnbalancedError,
    as_mode1,
    equilibrium,
    joint_sharing_qp,
    electric_sharing_qp,
    heat_sharing_qp,
    kkt_residuals,
    matched_mode1_gains,
    sharing_by_qp,
    solve_qp,
    solve_qp_numeric,
)
from .fixtures import FIXTURES, fixture_path
from .lyapunov import audit, segment_equilibria
from .netmodel import ValidationError, validate
from .solver import DivergenceError, integrate, integrate_to_steady

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_AUDIT = 0, 1, 2, 3, 4

RUN_FLAGS = ("stop_at_steady", "matched_mode1", "decimation")

log = logging.getLogger("chpfreq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# loading


def _resolve_path(arg: str) -> Path:
    p = Path(arg)
    if not p.exists() and arg in FIXTURES:
        return Path(str(fixture_path(arg)))
    if not p.exists():
        raise UsageError(f"no such file: {arg}")
    return p


def read_run_flags(path: Path) -> dict:
    """``run.<flag> = <json>`` lines of a metadata file."""
    flags = {}
    if path.suffix != ".txt":
        return flags
    for line in path.read_text().splitlines():
        if line.startswith("run."):
            key, _, val = line[4:].partition(" = ")
            flags[key] = json.loads(val)
    return flags


def load_scenario(arg: str, matched_mode1: bool = False, check: bool = True) -> tuple[ScenarioConfig, dict]:
    path = _resolve_path(arg)
    doc = read_document(path)
    cfg = parse_config(doc, check=check)
    flags = read_run_flags(path)
    if matched_mode1 or flags.get("matched_mode1"):
        cfg = matched_variant(cfg)
    return cfg, flags


def matched_variant(cfg: ScenarioConfig) -> ScenarioConfig:
    """Mode-1 copy of a Mode-2 scenario with a1 chosen to reproduce its steady state."""
    if cfg.system.modes != {2}:
        raise UsageError("--matched-mode1 needs a scenario whose pumps are all in Mode 2")
    dP, dH = cfg.totals()
    system = as_mode1(cfg.system, matched_mode1_gains(cfg.system, dP, dH))
    return dataclasses.replace(cfg, system=system)


# ---------------------------------------------------------------------------
# trajectory output


def trajectory_columns(model: CoupledModel) -> list[str]:
    cols = ["t"]
    cols += [f"omega_{b}" for b in model.bus_ids]
    cols += [f"pG_{b}" for b in model.gen_bus_ids]
    cols += [f"pP_{p}" for p in model.pump_ids]
    cols += [f"hP_{p.edge}" for p in model.system.pumps]
    cols += [f"hG_{e}" for e in model.source_ids]
    cols += [f"Tbar_{a}" for a in model.area_ids]
    for a in model.system.areas:
        cols += [f"TE_{e.id}" for e in a.edges]
    for a in model.system.areas:
        cols += [f"TN_{n.id}" for n in a.nodes]
    cols.append("flag_security")
    return cols


def trajectory_rows(traj, decimation: int = 1) -> np.ndarray:
    model = traj.model
    n = len(traj.times)
    keep = list(range(0, n, max(1, int(decimation))))
    if keep[-1] != n - 1:
        keep.append(n - 1)
    edge_pos = [model.edge_pos[e.id] for a in model.system.areas for e in a.edges]
    node_pos = [model.node_pos[nd.id] for a in model.system.areas for nd in a.nodes]
    rows = []
    for k in keep:
        x = traj.states[k]
        out = model.outputs(x, traj.loads_at_sample(k))
        T = x[model.layout.T]
        rows.append(
            np.concatenate(
                [
                    [traj.times[k]],
                    out.omega,
                    out.pG,
                    out.pP,
                    out.hP,
                    out.hG,
                    out.Tbar,
                    T[edge_pos],
                    T[node_pos],
                    [1.0 if traj.security[k] else 0.0],
                ]
            )
        )
    return np.array(rows)


def write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join("%.17g" % v for v in r) + "\n")


def write_metadata(path: Path, cfg: ScenarioConfig, flags: dict, traj, source: str):
    doc = resolved_document(cfg)
    lines = [
        "tool = chpfreq",
        f"version = {__version__}",
        f"python = {platform.python_version()}",
        f"numpy = {np.__version__}",
        f"scipy = {scipy.__version__}",
        f"source = {source}",
        f"name = {cfg.name}",
    ]
    lines += [f"run.{k} = {json.dumps(flags[k])}" for k in RUN_FLAGS]
    lines += [f"sim.{k} = {json.dumps(v)}" for k, v in cfg.sim.as_dict().items()]
    lines += [
        f"last_disturbance = {json.dumps(cfg.last_disturbance)}",
        f"steps = {traj.n_steps}",
        f"samples = {len(traj.times)}",
        f"converged = {json.dumps(traj.converged)}",
        f"steady_time = {json.dumps(traj.steady_time)}",
        f"security_flag = {json.dumps(traj.security_flag)}",
        "config_json = " + json.dumps(doc, sort_keys=True, separators=(",", ":")),
    ]
    path.write_text("\n".join(lines) + "\n")


def read_metadata(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        key, sep, val = line.partition(" = ")
        if sep:
            out[key] = val
    return out


def run_simulation(cfg: ScenarioConfig, stop_at_steady: bool, model=None):
    model = model or CoupledModel(cfg.system)
    x0 = model.zero_state()
    if stop_at_steady:
        traj, _ = integrate_to_steady(model, x0, cfg.sim, cfg.disturbances)
    else:
        traj = integrate(model, x0, cfg.sim, cfg.disturbances)
    return traj


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    path = _resolve_path(args.config)
    cfg = parse_config(read_document(path), check=False)
    report = validate(cfg.system)
    print(report if len(report) else "ok: no issues")
    return EXIT_OK if report.ok else EXIT_VALIDATION


def cmd_simulate(args) -> int:
    cfg, meta_flags = load_scenario(args.config, args.matched_mode1)
    flags = {
        "stop_at_steady": bool(args.stop_at_steady or meta_flags.get("stop_at_steady", False)),
        "matched_mode1": bool(args.matched_mode1 or meta_flags.get("matched_mode1", False)),
        "decimation": int(args.decimation or meta_flags.get("decimation") or cfg.outputs.get("decimation", 1)),
    }
    out = Path(args.out or cfg.outputs.get("directory") or ".")
    out.mkdir(parents=True, exist_ok=True)
    traj = run_simulation(cfg, flags["stop_at_steady"])
    model = traj.model
    write_csv(out / "trajectory.csv", trajectory_columns(model), trajectory_rows(traj, flags["decimation"]))
    # metadata keeps the scenario as given; the matched variant is re-derived from the flag
    base = parse_config(read_document(_resolve_path(args.config)), check=False)
    write_metadata(out / "metadata.txt", base, flags, traj, str(args.config))
    print(f"wrote {out / 'trajectory.csv'} ({len(traj.times)} samples, {traj.n_steps} steps)")
    if traj.security_flag:
        print("warning: security constraint |eta| >= pi/2 exceeded", file=sys.stderr)
    return EXIT_OK


def _equilibrium_rows(cfg: ScenarioConfig):
    system = cfg.system
    dP, dH = cfg.totals()
    sol = equilibrium(system, dP, dH)
    rows = list(sol.starred().items())
    rows.append(("lam", sol.lam))
    rows += [(f"mu_{a}", v) for a, v in sol.mu.items()]
    # optimisation route, analytic and numeric
    qp = sharing_by_qp(system, dP, dH)
    qpn = sharing_by_qp(system, dP, dH, numeric=True)
    common = [k for k in qp if k in dict(rows)]
    ref = dict(rows)
    gap = max((abs(qp[k] - ref[k]) for k in common), default=0.0)
    gapn = max((abs(qpn[k] - ref[k]) for k in common), default=0.0)
    if system.modes == {2}:
        specs = [joint_sharing_qp(system, dP, dH)]
    else:
        specs = [electric_sharing_qp(system, dP)]
        specs += [heat_sharing_qp(system, a.id, dH, sol.hP) for a in system.areas]
    kkt = max(max(kkt_residuals(s, solve_qp(s))) for s in specs)
    kktn = max(max(kkt_residuals(s, solve_qp_numeric(s))) for s in specs)
    checks = [
        ("check_qp_gap", gap),
        ("check_qp_numeric_gap", gapn),
        ("check_kkt_residual", kkt),
        ("check_kkt_residual_numeric", kktn),
    ]
    return sol, rows, checks


def cmd_equilibrium(args) -> int:
    cfg, _ = load_scenario(args.config, args.matched_mode1)
    sol, rows, checks = _equilibrium_rows(cfg)
    print(f"mode {sol.mode} equilibrium")
    for k, v in rows + checks:
        print(f"  {k:28s} {v: .12g}")
    if args.csv:
        write_csv_pairs(Path(args.csv), rows + checks)
    return EXIT_OK


def write_csv_pairs(path: Path, rows):
    with open(path, "w", newline="") as fh:
        fh.write("quantity,value\n")
        for k, v in rows:
            fh.write(f"{k},{'%.17g' % v}\n")


def cmd_audit(args) -> int:
    cfg, _ = load_scenario(args.config, args.matched_mode1)
    eq_system = cfg.system
    sim_system = cfg.system
    if args.negate_damping:
        # invalid on purpose: only the simulated plant changes, the reference equilibria stay nominal
        buses = tuple(dataclasses.replace(b, D=-b.D) for b in cfg.system.buses)
        sim_system = dataclasses.replace(cfg.system, buses=buses)
        print("override: damping negated on every bus (system is invalid)")
    model = CoupledModel(sim_system, validate=not args.negate_damping)
    traj = run_simulation(cfg, stop_at_steady=not args.negate_damping, model=model)
    eqs = segment_equilibria(traj, system=eq_system)
    report = audit(traj, tol=args.tol, equilibria=eqs)
    for line in report.lines():
        print(line)
    for f in report.functions:
        for s, seg in enumerate(f.segments):
            if not seg.passed:
                print(f"  {f.name} segment {s}: {len(seg.flagged)} flagged steps, first index {seg.first_violation}")
    return EXIT_OK if report.passed else EXIT_AUDIT


def cmd_analyze(args) -> int:
    path = Path(args.csv)
    if not path.exists():
        raise UsageError(f"no such file: {path}")
    table = read_trajectory_csv(path)
    after = args.after
    system = None
    meta_path = path.with_name("metadata.txt")
    if meta_path.exists():
        meta = read_metadata(meta_path)
        if after is None and "last_disturbance" in meta:
            after = float(json.loads(meta["last_disturbance"]))
        if "config_json" in meta:
            flags = read_run_flags(meta_path)
            cfg = parse_config(json.loads(meta["config_json"]), check=False)
            if flags.get("matched_mode1"):
                cfg = matched_variant(cfg)
            system = cfg.system
    report = analyze_table(table, args.band, args.hold, after, system)
    for line in report.lines():
        print(line)
    return EXIT_OK


def _batch_one(job):
    cfg_path, out_dir, stop = job
    argv = ["simulate", str(cfg_path), "--out", str(out_dir)]
    if stop:
        argv.append("--stop-at-steady")
    return str(cfg_path), main(argv)


def cmd_batch(args) -> int:
    root = Path(args.directory)
    if not root.is_dir():
        raise UsageError(f"not a directory: {root}")
    configs = sorted(root.glob("*.json"))
    if not configs:
        raise UsageError(f"no *.json scenarios in {root}")
    out_root = Path(args.out or root / "runs")
    jobs = [(c, out_root / c.stem, args.stop_at_steady) for c in configs]
    worst = EXIT_OK
    with ProcessPoolExecutor(max_workers=args.jobs or min(len(jobs), os.cpu_count() or 1)) as pool:
        for name, code in pool.map(_batch_one, jobs):
            print(f"{name}: exit {code}")
            worst = max(worst, code)
    return worst


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chpfreq", description="Coupled power / district-heating frequency simulator.")
    p.add_argument("--version", action="version", version=f"chpfreq {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("validate", help="check a scenario and print the validation report")
    s.add_argument("config", help="scenario JSON, metadata.txt, or bundled fixture name")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", help="integrate a scenario and write trajectory.csv + metadata.txt")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (default: outputs.directory of the scenario)")
    s.add_argument("--stop-at-steady", action="store_true", help="stop once the steady state has held")
    s.add_argument("--matched-mode1", action="store_true", help="run the matched Mode-1 variant of a Mode-2 scenario")
    s.add_argument("--decimation", type=int, help="keep every N-th sample in the CSV")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("equilibrium", help="closed-form steady state with optimisation cross-checks")
    s.add_argument("config")
    s.add_argument("--csv", help="also write the table to this CSV file")
    s.add_argument("--matched-mode1", action="store_true")
    s.set_defaults(func=cmd_equilibrium)

    s = sub.add_parser("audit", help="simulate and check the storage functions for monotone decrease")
    s.add_argument("config")
    s.add_argument("--tol", type=float, default=1e-9, help="relative tolerance of the monotonicity check")
    s.add_argument("--matched-mode1", action="store_true")
    s.add_argument("--negate-damping", action="store_true", help="force D -> -D (invalid system; sanity inversion)")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("analyze", help="settling times, peaks and sharing ratios of a trajectory.csv")
    s.add_argument("csv")
    s.add_argument("--band", type=float, default=DEFAULT_BAND)
    s.add_argument("--hold", type=float, default=DEFAULT_HOLD)
    s.add_argument("--after", type=float, help="reference instant (default: last disturbance from metadata.txt)")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("batch", help="simulate every *.json scenario of a directory in parallel")
    s.add_argument("directory")
    s.add_argument("--out", help="root output directory (default: <directory>/runs)")
    s.add_argument("--jobs", type=int)
    s.add_argument("--stop-at-steady", action="store_true")
    s.set_defaults(func=cmd_batch)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValidationError, CSVFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ModeError, UnbalancedError, SecurityConstraintError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"error: simulation diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
