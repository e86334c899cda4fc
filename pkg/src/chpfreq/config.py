"""Scenario files: JSON documents with a versioned schema.

A scenario bundles one system description, a list of step disturbances,
simulation parameters and output options.  Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .dynamics import DisturbanceSchedule, Step
from .netmodel import (
    BlockSpec,
    CombinedSystem,
    HeatArea,
    HeatEdge,
    HeatNode,
    PowerBus,
    PowerLine,
    PumpCoupling,
    ValidationError,
    validate,
)
from .solver import SimParams

SCHEMA_VERSION = 1

_num = {"type": "number"}
_id = {"type": ["string", "integer"]}

_block = {
    "type": "object",
    "additionalProperties": False,
    "required": ["tau", "Q"],
    "properties": {
        "tau": _num,
        "Q": _num,
        "block": {"enum": ["first-order", "lead-lag"]},
        "alpha": _num,
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "system"],
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "system": {
            "type": "object",
            "additionalProperties": False,
            "required": ["buses", "lines"],
            "properties": {
                "base_power_MVA": _num,
                "heat_base_power_MW": _num,
                "buses": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["id", "kind"],
                        "properties": {
                            "id": _id,
                            "kind": {"enum": ["generator", "load", "pump-mode1", "pump-converter"]},
                            "M": _num,
                            "D": _num,
                            "generator": _block,
                        },
                    },
                },
                "lines": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["from", "to", "B"],
                        "properties": {"from": _id, "to": _id, "B": _num, "eta0": _num},
                    },
                },
                "areas": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["id", "nodes", "edges"],
                        "properties": {
                            "id": _id,
                            "nodes": {
                                "type": "array",
                                "items": {
                                    "type": "object",
                                    "additionalProperties": False,
                                    "required": ["id", "volume"],
                                    "properties": {"id": _id, "volume": _num},
                                },
                            },
                            "edges": {
                                "type": "array",
                                "items": {
                                    "type": "object",
                                    "additionalProperties": False,
                                    "required": ["id", "from", "to", "volume", "flow", "role"],
                                    "properties": {
                                        "id": _id,
                                        "from": _id,
                                        "to": _id,
                                        "volume": _num,
                                        "flow": _num,
                                        "role": {"enum": ["pump", "source", "load", "pipe"]},
                                        "source": _block,
                                        "load": _num,
                                    },
                                },
                            },
                        },
                    },
                },
                "pumps": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["bus", "area", "edge", "cop", "mode"],
                        "properties": {
                            "bus": _id,
                            "area": _id,
                            "edge": _id,
                            "cop": _num,
                            "mode": {"enum": [1, 2]},
                            "a1": _num,
                            "m": _num,
                        },
                    },
                },
            },
        },
        "disturbances": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["time", "target", "id", "delta"],
                "properties": {
                    "time": _num,
                    "target": {"enum": ["bus", "edge"]},
                    "id": _id,
                    "delta": _num,
                },
            },
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_end": _num,
                "dt": _num,
                "method": {"enum": ["rk4", "rk45"]},
                "rtol": _num,
                "atol": _num,
                "sample_every": {"type": "integer", "minimum": 1},
                "steady_eps": _num,
                "steady_hold": _num,
                "t0": _num,
                "max_step": _num,
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"directory": {"type": "string"}, "decimation": {"type": "integer", "minimum": 1}},
        },
    },
}


class ConfigError(ValueError):
    """Parse or schema failure; ``path`` is the offending key path."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class ScenarioConfig:
    system: CombinedSystem
    disturbances: DisturbanceSchedule
    sim: SimParams
    outputs: dict = field(default_factory=dict)
    name: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    def totals(self):
        return self.disturbances.totals()

    @property
    def last_disturbance(self) -> float:
        times = self.disturbances.times
        return times[-1] if times else self.sim.t0


def _key_path(error) -> str:
    parts = []
    for p in error.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else (("." if parts else "") + str(p)))
    path = "".join(parts)
    if error.validator == "required":
        # name the missing key itself
        missing = error.message.split("'")[1] if "'" in error.message else ""
        path = f"{path}.{missing}" if path else missing
    elif error.validator == "additionalProperties":
        extra = error.message.split("'")[1] if "'" in error.message else ""
        path = f"{path}.{extra}" if path else extra
    return path or "<root>"


def _block(d):
    if d is None:
        return None
    return BlockSpec(tau=d["tau"], cost=d["Q"], kind=d.get("block", "first-order"), alpha=d.get("alpha", 0.0))


def system_from_dict(d: dict, name: str = "") -> CombinedSystem:
    s = lambda v: str(v)  # noqa: E731  ids are strings internally
    buses = [
        PowerBus(id=s(b["id"]), M=b.get("M", 0.0), D=b.get("D", 0.0), kind=b["kind"], generator=_block(b.get("generator")))
        for b in d["buses"]
    ]
    lines = [PowerLine(s(ln["from"]), s(ln["to"]), ln["B"], ln.get("eta0", 0.0)) for ln in d["lines"]]
    areas = []
    for a in d.get("areas", []):
        nodes = [HeatNode(s(n["id"]), n["volume"]) for n in a["nodes"]]
        edges = [
            HeatEdge(
                id=s(e["id"]),
                from_node=s(e["from"]),
                to_node=s(e["to"]),
                volume=e["volume"],
                flow=e["flow"],
                role=e["role"],
                source=_block(e.get("source")),
                load_base=e.get("load", 0.0),
            )
            for e in a["edges"]
        ]
        areas.append(HeatArea(s(a["id"]), tuple(nodes), tuple(edges)))
    pumps = [
        PumpCoupling(
            bus=s(p["bus"]),
            area=s(p["area"]),
            edge=s(p["edge"]),
            cop=p["cop"],
            mode=p["mode"],
            a1=p.get("a1"),
            m=p.get("m"),
        )
        for p in d.get("pumps", [])
    ]
    return CombinedSystem(tuple(buses), tuple(lines), tuple(areas), tuple(pumps), name=name)


def system_to_dict(system: CombinedSystem) -> dict:
    def blk(b):
        if b is None:
            return None
        out = {"tau": b.tau, "Q": b.cost, "block": b.kind}
        if b.kind == "lead-lag":
            out["alpha"] = b.alpha
        return out

    buses = []
    for b in system.buses:
        d = {"id": b.id, "kind": b.kind, "M": b.M, "D": b.D}
        if b.generator is not None:
            d["generator"] = blk(b.generator)
        buses.append(d)
    areas = []
    for a in system.areas:
        edges = []
        for e in a.edges:
            d = {"id": e.id, "from": e.from_node, "to": e.to_node, "volume": e.volume, "flow": e.flow, "role": e.role}
            if e.source is not None:
                d["source"] = blk(e.source)
            if e.load_base:
                d["load"] = e.load_base
            edges.append(d)
        areas.append({"id": a.id, "nodes": [{"id": n.id, "volume": n.volume} for n in a.nodes], "edges": edges})
    pumps = []
    for p in system.pumps:
        d = {"bus": p.bus, "area": p.area, "edge": p.edge, "cop": p.cop, "mode": p.mode}
        if p.mode == 1:
            d["a1"] = p.a1
        else:
            d["m"] = p.m
        pumps.append(d)
    return {
        "buses": buses,
        "lines": [{"from": ln.from_bus, "to": ln.to_bus, "B": ln.B, "eta0": ln.eta0} for ln in system.lines],
        "areas": areas,
        "pumps": pumps,
    }


def parse_config(doc: dict, check: bool = True) -> ScenarioConfig:
    """Schema-check ``doc`` and build a scenario; ``check`` runs system validation."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _key_path(err))
    name = doc.get("name", "")
    system = system_from_dict(doc["system"], name=name)
    if check:
        report = validate(system)
        if not report.ok:
            raise ValidationError(report)
    steps = [Step(float(d["time"]), d["target"], str(d["id"]), float(d["delta"])) for d in doc.get("disturbances", [])]
    sim = SimParams(**doc.get("sim", {}))
    return ScenarioConfig(system, DisturbanceSchedule(tuple(steps)), sim, dict(doc.get("outputs", {})), name, doc)


def read_document(path) -> dict:
    """Read a scenario JSON file, or the config embedded in a run's metadata.txt."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".txt":
        for line in text.splitlines():
            if line.startswith("config_json = "):
                text = line[len("config_json = ") :]
                break
        else:
            raise ConfigError("metadata file has no config_json entry", str(path))
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno}, column {exc.colno})", str(path)) from exc


def load_config(path, check: bool = True) -> ScenarioConfig:
    return parse_config(read_document(path), check=check)


def resolved_document(cfg: ScenarioConfig) -> dict:
    """Full document with every simulation default written out."""
    doc = dict(cfg.raw)
    doc["sim"] = asdict(cfg.sim)
    return doc
