"""Physical network: node partition, lines, incidence and admittance data."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import (
    DisconnectedGraph,
    DuplicateNode,
    NonpositiveSusceptance,
    UnknownEndpoint,
    UnknownNode,
    ValidationError,
)


class NodeKind(str, enum.Enum):
    GENERATOR = "generator"
    INVERTER = "inverter"
    LOAD = "load"

    @classmethod
    def parse(cls, value) -> "NodeKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"gen": "generator", "g": "generator", "inv": "inverter",
                   "i": "inverter", "l": "load"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValidationError(f"unknown node kind {value!r}") from None


_KIND_ORDER = (NodeKind.GENERATOR, NodeKind.INVERTER, NodeKind.LOAD)


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind
    b_self: float


@dataclass(frozen=True)
class Line:
    """Resistive-inductive line; ``b`` is the positive off-diagonal susceptance entry."""

    src: int
    dst: int
    b: float


@dataclass(frozen=True)
class Incidence:
    matrix: np.ndarray
    gen: np.ndarray
    inv: np.ndarray
    load: np.ndarray


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Validated microgrid graph.

    Nodes are stored in partition order (generators, inverters, loads, each
    ascending by id); every per-node array in the package uses this order.
    Lines are oriented from the lower to the higher node id.
    """

    nodes: tuple
    lines: tuple
    gamma: float
    index: dict = field(repr=False)
    edge_src: np.ndarray = field(repr=False)
    edge_dst: np.ndarray = field(repr=False)
    edge_b: np.ndarray = field(repr=False)
    edge_g: np.ndarray = field(repr=False)
    b_self: np.ndarray = field(repr=False)
    g_self: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def m(self) -> int:
        return len(self.lines)

    @property
    def node_ids(self) -> list:
        return [nd.id for nd in self.nodes]

    def ids_of(self, kind) -> list:
        kind = NodeKind.parse(kind)
        return [nd.id for nd in self.nodes if nd.kind is kind]

    @property
    def n_gen(self) -> int:
        return sum(nd.kind is NodeKind.GENERATOR for nd in self.nodes)

    @property
    def n_inv(self) -> int:
        return sum(nd.kind is NodeKind.INVERTER for nd in self.nodes)

    @property
    def n_load(self) -> int:
        return sum(nd.kind is NodeKind.LOAD for nd in self.nodes)

    @property
    def n_ctrl(self) -> int:
        return self.n_gen + self.n_inv

    def slices(self):
        """Index slices of the generator, inverter and load blocks."""
        g, i = self.n_gen, self.n_inv
        return slice(0, g), slice(g, g + i), slice(g + i, self.n)

    def position(self, node_id) -> int:
        try:
            return self.index[node_id]
        except KeyError:
            raise UnknownNode(f"node {node_id} not in network") from None

    def susceptance_matrix(self) -> np.ndarray:
        """Dense B with the configured self terms on the diagonal."""
        B = np.diag(self.b_self.astype(float))
        B[self.edge_src, self.edge_dst] = self.edge_b
        B[self.edge_dst, self.edge_src] = self.edge_b
        return B

    def conductance_matrix(self) -> np.ndarray:
        G = np.diag(self.g_self.astype(float))
        G[self.edge_src, self.edge_dst] = self.edge_g
        G[self.edge_dst, self.edge_src] = self.edge_g
        return G

    def with_gamma(self, gamma: float) -> "NetworkModel":
        return build_network(
            [(nd.id, nd.kind, nd.b_self) for nd in self.nodes],
            [(ln.src, ln.dst, ln.b) for ln in self.lines],
            gamma,
        )


def _as_node(spec) -> Node:
    if isinstance(spec, Node):
        return spec
    if isinstance(spec, dict):
        return Node(int(spec["id"]), NodeKind.parse(spec["kind"]), float(spec.get("b_self", 0.0)))
    node_id, kind, *rest = spec
    return Node(int(node_id), NodeKind.parse(kind), float(rest[0]) if rest else 0.0)


def _as_line(spec) -> Line:
    if isinstance(spec, Line):
        return spec
    if isinstance(spec, dict):
        return Line(int(spec["src"]), int(spec["dst"]), float(spec["b"]))
    a, b, sus = spec
    return Line(int(a), int(b), float(sus))


def _check_connected(n: int, src: np.ndarray, dst: np.ndarray, ids) -> None:
    adj = [[] for _ in range(n)]
    for a, b in zip(src, dst):
        adj[a].append(b)
        adj[b].append(a)
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        k = queue.popleft()
        for nb in adj[k]:
            if not seen[nb]:
                seen[nb] = True
                queue.append(nb)
    if not seen.all():
        isolated = [ids[k] for k in np.flatnonzero(~seen)]
        raise DisconnectedGraph(f"nodes {isolated} not reachable from node {ids[0]}")


def build_network(nodes: Iterable, lines: Iterable, gamma: float = 0.0) -> NetworkModel:
    """Validate node and line specs and derive the conductance data.

    Line conductances follow the constant R/X ratio, ``G_ij = -gamma * B_ij``;
    self conductances carry no shunt part, ``G_ii = -sum_j G_ij``.
    """
    if not gamma >= 0.0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    node_list = [_as_node(s) for s in nodes]
    if not node_list:
        raise ValidationError("network has no nodes")
    seen = set()
    for nd in node_list:
        if nd.id in seen:
            raise DuplicateNode(f"node {nd.id} declared twice")
        seen.add(nd.id)
    node_list.sort(key=lambda nd: (_KIND_ORDER.index(nd.kind), nd.id))
    index = {nd.id: k for k, nd in enumerate(node_list)}

    line_list = []
    pairs = set()
    for raw in lines:
        ln = _as_line(raw)
        for end in (ln.src, ln.dst):
            if end not in index:
                raise UnknownEndpoint(f"line ({ln.src},{ln.dst}) references unknown node {end}")
        if ln.src == ln.dst:
            raise ValidationError(f"self-loop at node {ln.src}")
        if not ln.b > 0.0:
            raise NonpositiveSusceptance(f"line ({ln.src},{ln.dst}) has b={ln.b}")
        a, b = sorted((ln.src, ln.dst))
        if (a, b) in pairs:
            raise ValidationError(f"parallel line ({a},{b})")
        pairs.add((a, b))
        line_list.append(Line(a, b, ln.b))
    line_list.sort(key=lambda ln: (ln.src, ln.dst))

    n = len(node_list)
    src = np.array([index[ln.src] for ln in line_list], dtype=np.int64)
    dst = np.array([index[ln.dst] for ln in line_list], dtype=np.int64)
    eb = np.array([ln.b for ln in line_list], dtype=float)
    eg = -gamma * eb
    gself = np.zeros(n)
    np.add.at(gself, src, -eg)
    np.add.at(gself, dst, -eg)
    if n > 1:
        _check_connected(n, src, dst, [nd.id for nd in node_list])
    return NetworkModel(
        nodes=tuple(node_list),
        lines=tuple(line_list),
        gamma=float(gamma),
        index=index,
        edge_src=src,
        edge_dst=dst,
        edge_b=eb,
        edge_g=eg,
        b_self=np.array([nd.b_self for nd in node_list], dtype=float),
        g_self=gself,
    )


def incidence_from_pairs(n: int, src, dst) -> np.ndarray:
    D = np.zeros((n, len(src)))
    cols = np.arange(len(src))
    D[np.asarray(src, dtype=int), cols] = 1.0
    D[np.asarray(dst, dtype=int), cols] = -1.0
    return D


def incidence(model: NetworkModel) -> Incidence:
    """Signed node-line incidence (+1 at the sending end) split by node kind."""
    D = incidence_from_pairs(model.n, model.edge_src, model.edge_dst)
    sg, si, sl = model.slices()
    return Incidence(D, D[sg], D[si], D[sl])


def neighbors(model: NetworkModel, node_id) -> set:
    k = model.position(node_id)
    ids = model.node_ids
    out = set()
    for a, b in zip(model.edge_src, model.edge_dst):
        if a == k:
            out.add(ids[b])
        elif b == k:
            out.add(ids[a])
    return out


def line_table_neighbors(lines, node_id) -> set:
    """Neighbors from a raw line list, usable before connectivity validation."""
    out = set()
    for raw in lines:
        ln = _as_line(raw)
        if ln.src == node_id:
            out.add(ln.dst)
        elif ln.dst == node_id:
            out.add(ln.src)
    return out
