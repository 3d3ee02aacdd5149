"""Scenario configuration: parsing, validation, serialization and model assembly.

A scenario file is YAML with the top-level sections ``network``,
``controller``, ``loads``, ``events``, ``solver`` and ``outputs``; the schema
is documented in the README.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .closed_loop import ClosedLoopSystem
from .controller import CommunicationGraph, ControllerGains, CostModel
from .errors import ParseError, SchemaError, ValidationError
from .integrator import METHODS, Event, SolverSettings
from .network import NetworkModel, NodeKind, build_network
from .plant import (
    GeneratorParams,
    InverterParams,
    InverterPhysical,
    LoadParams,
    PlantParams,
    inverter_matching,
)

SHIPPED = "paper18.cfg"

_SECTIONS = ("network", "controller", "loads", "events", "solver", "outputs")
_NODE_KEYS = {
    NodeKind.GENERATOR: ({"A", "M", "Xd", "Xdp", "tauU"}, set()),
    NodeKind.INVERTER: ({"A"}, {"M", "C_DC", "G_DC", "eta", "omega_n"}),
    NodeKind.LOAD: ({"A"}, set()),
}


@dataclass(frozen=True)
class NodeSpec:
    """One node row; kind-specific parameters live in ``params``."""

    id: int
    kind: NodeKind
    B_ii: float
    params: dict

    def plant_params(self):
        p = self.params
        if self.kind is NodeKind.GENERATOR:
            return GeneratorParams(p["M"], p["A"], p["Xd"], p["Xdp"], p["tauU"])
        if self.kind is NodeKind.INVERTER:
            if "M" in p:
                return InverterParams(p["M"], p["A"])
            phys = InverterPhysical(p["C_DC"], p["G_DC"], p["eta"],
                                    p.get("omega_n", 2 * math.pi * 50.0))
            return InverterParams(inverter_matching(phys).M, p["A"])
        return LoadParams(p["A"])


@dataclass(frozen=True)
class OutputSpec:
    record_interval: float = 0.1
    csv: str = "trajectory.csv"
    summary: str = "summary.txt"
    verification: str = "verification.txt"
    equilibrium: str = "equilibrium.txt"
    figures: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario with every default filled in."""

    nodes: tuple
    lines: tuple
    gamma: float
    weights: dict
    tau_c: float
    tau_g: dict
    tau_lambda: dict
    communication: tuple | None
    pl: dict
    ql: dict
    events: tuple
    horizon: float
    solver: SolverSettings
    outputs: OutputSpec = field(default_factory=OutputSpec)

    def node(self, node_id: int) -> NodeSpec:
        for nd in self.nodes:
            if nd.id == node_id:
                return nd
        raise ValidationError(f"unknown node {node_id}")

    def with_dt(self, dt: float) -> "ScenarioConfig":
        cfg = replace(self, solver=replace(self.solver, dt=float(dt)))
        _validate(cfg)
        return cfg

    def with_gamma(self, gamma: float) -> "ScenarioConfig":
        cfg = replace(self, gamma=float(gamma))
        _validate(cfg)
        return cfg


# --------------------------------------------------------------------------- parsing

def _number(value, where: str, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(where, f"expected a number, got {value!r}")
    if integer:
        if float(value) != int(value):
            raise SchemaError(where, f"expected an integer, got {value!r}")
        return int(value)
    value = float(value)
    if not math.isfinite(value):
        raise SchemaError(where, "must be finite")
    return value


def _mapping(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(where, "expected a mapping")
    return value


def _sequence(value, where: str) -> list:
    if not isinstance(value, list):
        raise SchemaError(where, "expected a list")
    return value


def _only(d: dict, allowed, where: str) -> None:
    extra = sorted(str(k) for k in set(d) - set(allowed))
    if extra:
        raise SchemaError(f"{where}.{extra[0]}", "unknown key")


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise SchemaError(f"{where}.{key}", "missing")
    return d[key]


def _parse_nodes(raw, where="network.nodes") -> tuple:
    nodes = []
    for i, item in enumerate(_sequence(raw, where)):
        w = f"{where}[{i}]"
        item = _mapping(item, w)
        kind_raw = _require(item, "kind", w)
        try:
            kind = NodeKind.parse(kind_raw)
        except ValidationError:
            raise SchemaError(f"{w}.kind", f"unknown node kind {kind_raw!r}") from None
        required, optional = _NODE_KEYS[kind]
        _only(item, {"id", "kind", "B_ii"} | required | optional, w)
        params = {}
        for key in sorted(required | optional):
            if key in item:
                params[key] = _number(item[key], f"{w}.{key}")
            elif key in required:
                raise SchemaError(f"{w}.{key}", "missing")
        if kind is NodeKind.INVERTER and "M" not in params:
            missing = [k for k in ("C_DC", "G_DC", "eta") if k not in params]
            if missing:
                raise SchemaError(f"{w}.M", "inverters need M or C_DC, G_DC and eta")
        nodes.append(NodeSpec(_number(_require(item, "id", w), f"{w}.id", integer=True), kind,
                              _number(_require(item, "B_ii", w), f"{w}.B_ii"), params))
    return tuple(nodes)


def _parse_lines(raw, where="network.lines") -> tuple:
    lines = []
    for i, item in enumerate(_sequence(raw, where)):
        w = f"{where}[{i}]"
        if isinstance(item, dict):
            _only(item, {"from", "to", "b"}, w)
            item = [_require(item, "from", w), _require(item, "to", w), _require(item, "b", w)]
        if not isinstance(item, list) or len(item) != 3:
            raise SchemaError(w, "expected [from, to, b]")
        lines.append((_number(item[0], f"{w}[0]", True), _number(item[1], f"{w}[1]", True),
                      _number(item[2], f"{w}[2]")))
    return tuple(lines)


def _id_map(raw, where: str) -> dict:
    out = {}
    for key, val in _mapping(raw, where).items():
        out[_number(key, f"{where}.{key}", integer=True)] = _number(val, f"{where}.{key}")
    return out


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate scenario text; defaults are applied."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        msg = getattr(exc, "problem", None) or str(exc)
        raise ParseError(msg, line) from None
    if data is None:
        data = {}
    data = _mapping(data, "<root>")
    _only(data, _SECTIONS, "<root>")

    net = _mapping(_require(data, "network", "<root>"), "network")
    _only(net, {"gamma", "nodes", "lines"}, "network")
    nodes = _parse_nodes(_require(net, "nodes", "network"))
    lines = _parse_lines(net.get("lines", []))
    gamma = _number(net.get("gamma", 0.0), "network.gamma")

    ctrl = _mapping(data.get("controller", {}) or {}, "controller")
    _only(ctrl, {"weights", "tau_c", "tau_g", "tau_lambda", "communication"}, "controller")
    tau_c = _number(ctrl.get("tau_c", 0.01), "controller.tau_c")
    tau_g = _id_map(ctrl.get("tau_g", {}) or {}, "controller.tau_g")
    tau_lambda = _id_map(ctrl.get("tau_lambda", {}) or {}, "controller.tau_lambda")
    comm = None
    if ctrl.get("communication") is not None:
        pairs = []
        for i, pair in enumerate(_sequence(ctrl["communication"], "controller.communication")):
            w = f"controller.communication[{i}]"
            if not isinstance(pair, list) or len(pair) != 2:
                raise SchemaError(w, "expected [from, to]")
            pairs.append((_number(pair[0], w, True), _number(pair[1], w, True)))
        comm = tuple(pairs)
    ctrl_ids = [nd.id for nd in _network_order(nodes) if nd.kind is not NodeKind.LOAD]
    weights = {i: 1.0 + 0.1 * r for r, i in enumerate(ctrl_ids)}
    weights.update(_id_map(ctrl.get("weights", {}) or {}, "controller.weights"))

    pl, ql = {}, {}
    for i, item in enumerate(_sequence(data.get("loads", []) or [], "loads")):
        w = f"loads[{i}]"
        item = _mapping(item, w)
        _only(item, {"node", "pl", "ql"}, w)
        nid = _number(_require(item, "node", w), f"{w}.node", True)
        if nid in pl or nid in ql:
            raise ValidationError(f"{w}: node {nid} listed twice")
        if "pl" in item:
            pl[nid] = _number(item["pl"], f"{w}.pl")
        if "ql" in item:
            ql[nid] = _number(item["ql"], f"{w}.ql")

    events = []
    for i, item in enumerate(_sequence(data.get("events", []) or [], "events")):
        w = f"events[{i}]"
        item = _mapping(item, w)
        _only(item, {"time", "node", "delta_pl", "delta_ql"}, w)
        events.append(Event(_number(_require(item, "time", w), f"{w}.time"),
                            _number(_require(item, "node", w), f"{w}.node", True),
                            _number(item.get("delta_pl", 0.0), f"{w}.delta_pl"),
                            _number(item.get("delta_ql", 0.0), f"{w}.delta_ql")))

    sol = _mapping(data.get("solver", {}) or {}, "solver")
    _only(sol, {"horizon", "dt", "method", "algebraic_tol", "newton_max_iter"}, "solver")
    out = _mapping(data.get("outputs", {}) or {}, "outputs")
    _only(out, {"record_interval", "csv", "summary", "verification", "equilibrium", "figures"},
          "outputs")
    method = sol.get("method", "rk4_with_inner_solve")
    if method not in METHODS:
        raise SchemaError("solver.method", f"must be one of {METHODS}")
    for key in ("csv", "summary", "verification", "equilibrium"):
        if key in out and not isinstance(out[key], str):
            raise SchemaError(f"outputs.{key}", "expected a file name")
    if "figures" in out and not isinstance(out["figures"], bool):
        raise SchemaError("outputs.figures", "expected true or false")
    outputs = OutputSpec(
        record_interval=_number(out.get("record_interval", 0.1), "outputs.record_interval"),
        **{k: out[k] for k in ("csv", "summary", "verification", "equilibrium", "figures")
           if k in out})
    last = max((ev.time for ev in events), default=0.0)
    horizon = _number(sol.get("horizon", last + 100.0), "solver.horizon")
    settings = SolverSettings(
        dt=_number(sol.get("dt", 0.002), "solver.dt"),
        algebraic_tol=_number(sol.get("algebraic_tol", 1e-10), "solver.algebraic_tol"),
        newton_max_iter=_number(sol.get("newton_max_iter", 50), "solver.newton_max_iter", True),
        method=method,
        record_interval=outputs.record_interval,
    )
    cfg = ScenarioConfig(nodes, lines, gamma, weights, tau_c, tau_g, tau_lambda, comm, pl, ql,
                         tuple(events), horizon, settings, outputs)
    _validate(cfg)
    return cfg


def _network_order(nodes) -> list:
    order = (NodeKind.GENERATOR, NodeKind.INVERTER, NodeKind.LOAD)
    return sorted(nodes, key=lambda nd: (order.index(nd.kind), nd.id))


def _on_grid(value: float, dt: float) -> bool:
    steps = round(value / dt)
    return abs(steps * dt - value) <= 1e-9 * max(1.0, abs(value))


def _validate(cfg: ScenarioConfig) -> None:
    ids = {nd.id for nd in cfg.nodes}
    kinds = {nd.id: nd.kind for nd in cfg.nodes}
    if len(ids) != len(cfg.nodes):
        raise ValidationError("duplicate node ids")
    if not cfg.gamma >= 0:
        raise ValidationError("gamma must be >= 0")
    if not cfg.tau_c > 0:
        raise ValidationError("tau_c must be positive")
    for name, table in (("tau_g", cfg.tau_g), ("tau_lambda", cfg.tau_lambda)):
        for nid, val in table.items():
            if nid not in ids:
                raise ValidationError(f"{name} references unknown node {nid}")
            if not val > 0:
                raise ValidationError(f"{name} entry for node {nid} must be positive")
    for nid in cfg.tau_g:
        if kinds[nid] is NodeKind.LOAD:
            raise ValidationError(f"tau_g given for load node {nid}")
    for nid, w in cfg.weights.items():
        if nid not in ids or kinds[nid] is NodeKind.LOAD:
            raise ValidationError(f"weight for non-controllable node {nid}")
        if not w > 0:
            raise ValidationError(f"weight of node {nid} must be positive")
    for nid in cfg.pl:
        if nid not in ids:
            raise ValidationError(f"load entry references unknown node {nid}")
    for nid in cfg.ql:
        if kinds.get(nid) is not NodeKind.LOAD:
            raise ValidationError(f"q_l given for node {nid}, which is not a load node")
    if cfg.communication is not None:
        for a, b in cfg.communication:
            if a not in ids or b not in ids:
                raise ValidationError(f"communication link ({a},{b}) references unknown node")
    dt = cfg.solver.dt
    for ev in cfg.events:
        if ev.target not in ids:
            raise ValidationError(f"event at t={ev.time} targets unknown node {ev.target}")
        if ev.delta_ql and kinds[ev.target] is not NodeKind.LOAD:
            raise ValidationError(f"event at t={ev.time} changes q_l of a non-load node")
        if not _on_grid(ev.time, dt):
            raise ValidationError(f"event time {ev.time} is not a multiple of dt={dt}")
    times = [ev.time for ev in cfg.events]
    if times != sorted(times):
        raise ValidationError("events must be sorted by time")
    if not cfg.horizon > 0 or (times and cfg.horizon < times[-1]):
        raise ValidationError("horizon must be positive and not before the last event")
    if not _on_grid(cfg.horizon, dt):
        raise ValidationError(f"horizon {cfg.horizon} is not a multiple of dt={dt}")
    for nd in cfg.nodes:
        nd.plant_params()
    build_network([(nd.id, nd.kind, nd.B_ii) for nd in cfg.nodes], cfg.lines, cfg.gamma)


# --------------------------------------------------------------------------- serialization

class _Flow(dict):
    """Mapping dumped inline, one table row per line."""


class _FlowList(list):
    pass


class _Dumper(yaml.SafeDumper):
    pass


_Dumper.add_representer(_Flow, lambda d, v: d.represent_mapping(
    "tag:yaml.org,2002:map", dict(v), flow_style=True))
_Dumper.add_representer(_FlowList, lambda d, v: d.represent_sequence(
    "tag:yaml.org,2002:seq", list(v), flow_style=True))


def to_dict(cfg: ScenarioConfig) -> dict:
    nodes = [_Flow({"id": nd.id, "kind": nd.kind.value, "B_ii": nd.B_ii, **nd.params})
             for nd in cfg.nodes]
    ctrl = {"tau_c": cfg.tau_c, "weights": _Flow(dict(cfg.weights))}
    if cfg.tau_g:
        ctrl["tau_g"] = _Flow(dict(cfg.tau_g))
    if cfg.tau_lambda:
        ctrl["tau_lambda"] = _Flow(dict(cfg.tau_lambda))
    if cfg.communication is not None:
        ctrl["communication"] = [_FlowList(p) for p in cfg.communication]
    loads = []
    for nid in sorted(set(cfg.pl) | set(cfg.ql)):
        row = {"node": nid}
        if nid in cfg.pl:
            row["pl"] = cfg.pl[nid]
        if nid in cfg.ql:
            row["ql"] = cfg.ql[nid]
        loads.append(_Flow(row))
    s, o = cfg.solver, cfg.outputs
    return {
        "network": {"gamma": cfg.gamma, "nodes": nodes,
                    "lines": [_FlowList(ln) for ln in cfg.lines]},
        "controller": ctrl,
        "loads": loads,
        "events": [_Flow({"time": ev.time, "node": ev.target, "delta_pl": ev.delta_pl,
                          "delta_ql": ev.delta_ql}) for ev in cfg.events],
        "solver": {"horizon": cfg.horizon, "dt": s.dt, "method": s.method,
                   "algebraic_tol": s.algebraic_tol, "newton_max_iter": s.newton_max_iter},
        "outputs": {"record_interval": o.record_interval, "csv": o.csv, "summary": o.summary,
                    "verification": o.verification, "equilibrium": o.equilibrium,
                    "figures": o.figures},
    }


def serialize(cfg: ScenarioConfig) -> str:
    return yaml.dump(to_dict(cfg), Dumper=_Dumper, sort_keys=False, width=100)


def load_config(path) -> ScenarioConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def shipped_config_text(name: str = SHIPPED) -> str:
    return resources.files("microgrid").joinpath("data", name).read_text(encoding="utf-8")


def shipped_config(name: str = SHIPPED) -> ScenarioConfig:
    return parse_config(shipped_config_text(name))


# --------------------------------------------------------------------------- assembly

@dataclass(eq=False)
class Scenario:
    """Numerical objects assembled from a config."""

    config: ScenarioConfig
    system: ClosedLoopSystem
    pl: np.ndarray
    ql: np.ndarray

    @property
    def model(self) -> NetworkModel:
        return self.system.model


def build(cfg: ScenarioConfig) -> Scenario:
    md = build_network([(nd.id, nd.kind, nd.B_ii) for nd in cfg.nodes], cfg.lines, cfg.gamma)
    tables = {kind: {} for kind in NodeKind}
    for nd in cfg.nodes:
        tables[nd.kind][nd.id] = nd.plant_params()
    params = PlantParams.from_tables(md, tables[NodeKind.GENERATOR], tables[NodeKind.INVERTER],
                                     tables[NodeKind.LOAD])
    if cfg.communication is None:
        comm = CommunicationGraph.from_network(md)
    else:
        comm = CommunicationGraph.from_edges(md, cfg.communication)
    k = md.n_ctrl
    ctrl_ids = md.node_ids[:k]
    tau_g = np.array([cfg.tau_g.get(i, cfg.tau_c) for i in ctrl_ids])
    tau_l = np.array([cfg.tau_lambda.get(i, cfg.tau_c) for i in md.node_ids])
    gains = ControllerGains(tau_g, tau_l, np.full(comm.m, cfg.tau_c))
    cost = CostModel(np.array([cfg.weights[i] for i in ctrl_ids]))
    system = ClosedLoopSystem(md, params, gains, cost, comm)
    pl = np.array([cfg.pl.get(i, 0.0) for i in md.node_ids])
    ql = np.array([cfg.ql.get(i, 0.0) for i in md.node_ids[k:]])
    return Scenario(cfg, system, pl, ql)
