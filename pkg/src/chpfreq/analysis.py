"""Trajectory metrics: settling times, peak deviations, sharing ratios."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import simpson

DEFAULT_BAND = 5e-4
DEFAULT_HOLD = 2.0


class CSVFormatError(ValueError):
    pass


@dataclass
class TrajectoryTable:
    columns: list[str]
    data: np.ndarray  # (rows, columns)

    @property
    def t(self) -> np.ndarray:
        return self.data[:, 0]

    def __getitem__(self, name) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def with_prefix(self, prefix: str) -> list[str]:
        return [c for c in self.columns if c.startswith(prefix)]


def read_trajectory_csv(path) -> TrajectoryTable:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError as exc:
        raise CSVFormatError(f"{path}: not a text file") from exc
    if not rows:
        raise CSVFormatError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0] != "t":
        raise CSVFormatError(f"{path}: first column must be 't'")
    if len(set(header)) != len(header):
        raise CSVFormatError(f"{path}: duplicate column names")
    body = []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise CSVFormatError(f"{path}:{i}: expected {len(header)} fields, got {len(r)}")
        try:
            body.append([float(v) for v in r])
        except ValueError as exc:
            raise CSVFormatError(f"{path}:{i}: {exc}") from exc
    if not body:
        raise CSVFormatError(f"{path}: no data rows")
    data = np.array(body)
    if np.any(np.diff(data[:, 0]) <= 0):
        raise CSVFormatError(f"{path}: time column is not strictly increasing")
    return TrajectoryTable(header, data)


@dataclass
class Settling:
    time: float | None  # measured from the reference instant; None when unsettled
    final: float

    @property
    def settled(self) -> bool:
        return self.time is not None


def settling_time(t, y, band: float = DEFAULT_BAND, hold: float = DEFAULT_HOLD, after: float | None = None) -> Settling:
    """First time after ``after`` from which y stays within final +- band.

    The band is around the last sample.  The signal must stay inside for at
    least ``hold`` seconds before the record ends, otherwise it counts as
    unsettled.  The returned time is relative to ``after`` (default: t[0]).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    t_ref = t[0] if after is None else float(after)
    sel = t >= t_ref
    ts, ys = t[sel], y[sel]
    if ts.size == 0:
        return Settling(None, float(y[-1]))
    final = float(ys[-1])
    outside = np.flatnonzero(np.abs(ys - final) > band)
    t_in = ts[0] if outside.size == 0 else ts[outside[-1] + 1] if outside[-1] + 1 < ts.size else math.inf
    if t[-1] - t_in < hold:
        return Settling(None, final)
    return Settling(float(t_in - t_ref), final)


@dataclass
class AnalysisReport:
    settling: dict[str, Settling]
    max_abs_omega: dict[str, float]
    max_abs_Tbar: dict[str, float]
    sharing: list[dict] = field(default_factory=list)
    pump_power_total: float = 0.0
    security_samples: int = 0
    band: float = DEFAULT_BAND
    hold: float = DEFAULT_HOLD
    after: float = 0.0

    def frequency_settling(self) -> float | None:
        """Latest settling time over all bus frequencies (None if any is unsettled)."""
        vals = [s.time for k, s in self.settling.items() if k.startswith("omega_")]
        if not vals or any(v is None for v in vals):
            return None
        return max(vals)

    def lines(self) -> list[str]:
        out = [f"settling (band {self.band:g}, hold {self.hold:g} s, after t = {self.after:g})"]
        for k, s in self.settling.items():
            out.append(f"  {k:24s} {'unsettled' if s.time is None else f'{s.time:.4f} s':>14s}  final {s.final:.10g}")
        out.append("max |omega|")
        out += [f"  {k:24s} {v:.10g}" for k, v in self.max_abs_omega.items()]
        out.append("max |Tbar|")
        out += [f"  {k:24s} {v:.10g}" for k, v in self.max_abs_Tbar.items()]
        if self.sharing:
            out.append("sharing (share of group total at the final sample)")
            for r in self.sharing:
                implied = "n/a" if r["implied"] is None else f"{r['implied']:.6f}"
                out.append(f"  {r['group']:10s} {r['signal']:24s} observed {r['observed']:.6f}  cost-implied {implied}")
        out.append(f"aggregate pump power (final) {self.pump_power_total:.10g}")
        out.append(f"security flag samples {self.security_samples}")
        return out


def _sharing_rows(group, signals, finals, costs):
    total = sum(finals)
    inv = [1.0 / c if c else None for c in costs] if costs is not None else None
    rows = []
    for i, (sig, v) in enumerate(zip(signals, finals)):
        observed = v / total if total != 0 else float("nan")
        implied = None
        if inv is not None and all(x is not None for x in inv):
            implied = inv[i] / sum(inv)
        rows.append({"group": group, "signal": sig, "observed": observed, "implied": implied, "final": v})
    return rows


def analyze_table(
    table: TrajectoryTable,
    band: float = DEFAULT_BAND,
    hold: float = DEFAULT_HOLD,
    after: float | None = None,
    system=None,
) -> AnalysisReport:
    """Metrics over every signal column of ``table``.

    ``system`` (optional) supplies cost coefficients for the cost-implied
    column of the sharing table and the area membership of heat sources.
    """
    t = table.t
    after = float(t[0] if after is None else after)
    settling = {}
    for c in table.columns[1:]:
        if c == "flag_security":
            continue
        settling[c] = settling_time(t, table[c], band, hold, after)
    max_w = {c[len("omega_") :]: float(np.max(np.abs(table[c]))) for c in table.with_prefix("omega_")}
    max_T = {c[len("Tbar_") :]: float(np.max(np.abs(table[c]))) for c in table.with_prefix("Tbar_")}

    sharing = []
    gen_cols = table.with_prefix("pG_")
    if gen_cols:
        costs = None
        if system is not None:
            costs = [system.bus(c[3:]).generator.cost for c in gen_cols]
        sharing += _sharing_rows("generators", gen_cols, [float(table[c][-1]) for c in gen_cols], costs)
    src_cols = table.with_prefix("hG_")
    if src_cols:
        if system is not None:
            for a in system.areas:
                ids = [e.id for e in a.edges_with_role("source")]
                cols = [f"hG_{i}" for i in ids if f"hG_{i}" in src_cols]
                costs = [a.edges[a.edge_index[c[3:]]].source.cost for c in cols]
                sharing += _sharing_rows(f"area {a.id}", cols, [float(table[c][-1]) for c in cols], costs)
        else:
            sharing += _sharing_rows("sources", src_cols, [float(table[c][-1]) for c in src_cols], None)
    pump_total = float(sum(table[c][-1] for c in table.with_prefix("pP_")))
    sec = int(np.sum(table["flag_security"] != 0)) if "flag_security" in table.columns else 0
    return AnalysisReport(settling, max_w, max_T, sharing, pump_total, sec, band, hold, after)


def thermal_bookkeeping_gap(times, Tbar, injection_sum, total_volume) -> float:
    """|V (Tbar(t_end) - Tbar(t_0)) - integral of 1'h dt| with Simpson's rule.

    ``injection_sum`` is 1'h at every sample of one load segment.
    """
    energy = float(simpson(np.asarray(injection_sum), x=np.asarray(times)))
    return abs(total_volume * (Tbar[-1] - Tbar[0]) - energy)
