"""Road network and OD demand data model.

Physical links live in ``Network.links``; charging stations are kept in a
separate ``Network.chargers`` list (self-loops), so physical link indices stay
stable no matter which chargers are selected.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from evplace.delay import DelayParams, PowerDelay, delay_from_dict

LANE_CAPACITY_VPH = 1900.0
VEHICLE_SPACING_M = 7.0

F1, F2, F3 = 1, 2, 3
VEHICLE_TYPES = (F1, F2, F3)


class NetworkError(ValueError):
    """Raised for malformed network or demand input."""


@dataclass(frozen=True)
class Node:
    id: str
    x: float | None = None
    y: float | None = None


@dataclass(frozen=True)
class Link:
    id: str
    tail: str
    head: str
    length: float
    lanes: int
    free_flow_time: float
    flow_capacity: float | None = None
    roundabout: bool = False
    delay: DelayParams | PowerDelay | None = None  # congestion-game law override

    def __post_init__(self):
        if self.flow_capacity is None:
            object.__setattr__(self, "flow_capacity", LANE_CAPACITY_VPH * self.lanes)
        if self.tail == self.head:
            raise NetworkError(f"link {self.id!r} is a self-loop; chargers are not links")
        if not self.length > 0:
            raise NetworkError(f"link {self.id!r}: length must be positive")
        if int(self.lanes) != self.lanes or self.lanes < 1:
            raise NetworkError(f"link {self.id!r}: lanes must be a positive integer")
        if not self.free_flow_time > 0:
            raise NetworkError(f"link {self.id!r}: free-flow time must be positive")
        if not self.flow_capacity > 0:
            raise NetworkError(f"link {self.id!r}: flow capacity must be positive")

    @property
    def storage_capacity(self) -> int:
        """Vehicles the link can physically hold (jam spacing of 7 m)."""
        return max(1, math.floor(self.length * self.lanes / VEHICLE_SPACING_M))


@dataclass(frozen=True)
class ChargerLink:
    node: str
    delay: DelayParams | PowerDelay = field(default_factory=lambda: PowerDelay(0.0))


@dataclass(frozen=True)
class ODPair:
    i: int
    origin: str
    destination: str
    q_f1: float = 0.0
    q_f2: float = 0.0
    q_f3: float = 0.0
    benefit: float = 0.0

    def __post_init__(self):
        if self.origin == self.destination:
            raise NetworkError(f"OD {self.i}: origin equals destination")
        if min(self.q_f1, self.q_f2, self.q_f3) < 0:
            raise NetworkError(f"OD {self.i}: negative demand")
        if self.benefit < 0:
            raise NetworkError(f"OD {self.i}: negative charging benefit")

    def demand(self, vtype: int) -> float:
        return (self.q_f1, self.q_f2, self.q_f3)[vtype - 1]


@dataclass(frozen=True)
class DemandTable:
    entries: tuple[ODPair, ...]

    def __post_init__(self):
        seen = set()
        for od in self.entries:
            if od.i in seen:
                raise NetworkError(f"duplicate OD index {od.i}")
            seen.add(od.i)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def od(self, i: int) -> ODPair:
        for od in self.entries:
            if od.i == i:
                return od
        raise KeyError(i)

    def scaled(self, factor: float) -> DemandTable:
        return DemandTable(tuple(
            replace(od, q_f1=od.q_f1 * factor, q_f2=od.q_f2 * factor, q_f3=od.q_f3 * factor)
            for od in self.entries
        ))


class Network:
    """Directed road graph with optional charger self-loops.

    Immutable after construction; ``augment_with_chargers`` returns a new
    instance.
    """

    def __init__(self, nodes: Sequence[Node], links: Sequence[Link],
                 candidates: Iterable[str] = (), chargers: Iterable[ChargerLink] = ()):
        self.nodes = tuple(nodes)
        self.links = tuple(links)
        self.candidates = frozenset(candidates)
        if not self.links:
            raise NetworkError("network has no links")

        self.node_index: dict[str, int] = {}
        for k, node in enumerate(self.nodes):
            if node.id in self.node_index:
                raise NetworkError(f"duplicate node id {node.id!r}")
            self.node_index[node.id] = k
        self.link_index: dict[str, int] = {}
        for k, link in enumerate(self.links):
            if link.id in self.link_index:
                raise NetworkError(f"duplicate link id {link.id!r}")
            for end in (link.tail, link.head):
                if end not in self.node_index:
                    raise NetworkError(f"link {link.id!r} references unknown node {end!r}")
            self.link_index[link.id] = k
        for c in self.candidates:
            if c not in self.node_index:
                raise NetworkError(f"candidate references unknown node {c!r}")

        by_node: dict[str, ChargerLink] = {}
        for ch in chargers:
            if ch.node not in self.node_index:
                raise NetworkError(f"charger references unknown node {ch.node!r}")
            by_node[ch.node] = ch
        # canonical order keeps augmentation commutative
        self.chargers = tuple(by_node[n] for n in sorted(by_node, key=self.node_index.get))
        self.charger_index = {ch.node: k for k, ch in enumerate(self.chargers)}

        self.tails = np.array([self.node_index[l.tail] for l in self.links], dtype=np.int64)
        self.heads = np.array([self.node_index[l.head] for l in self.links], dtype=np.int64)
        self.out_links: list[list[int]] = [[] for _ in self.nodes]
        self.in_links: list[list[int]] = [[] for _ in self.nodes]
        for k in range(len(self.links)):
            self.out_links[self.tails[k]].append(k)
            self.in_links[self.heads[k]].append(k)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    def link(self, link_id: str) -> Link:
        return self.links[self.link_index[link_id]]

    def same_structure(self, other: Network) -> bool:
        return self.nodes == other.nodes and self.links == other.links

    def __repr__(self):
        return (f"Network(|V|={self.n_nodes}, |E|={self.n_links}, "
                f"candidates={len(self.candidates)}, chargers={[c.node for c in self.chargers]})")


def augment_with_chargers(net: Network, selection: Iterable[str],
                          delay_params: Mapping[str, DelayParams | PowerDelay]
                          | DelayParams | PowerDelay | None = None) -> Network:
    """Return a copy of ``net`` with a charger self-loop at every selected node.

    ``delay_params`` is either one law shared by all new stations or a
    per-node mapping. Chargers already present are kept as they are.
    """
    selection = list(selection)
    for node in selection:
        if node not in net.candidates:
            raise NetworkError(f"node {node!r} is not a charger candidate")
    if not selection:
        return net
    existing = {ch.node for ch in net.chargers}
    new = []
    for node in selection:
        if node in existing:
            continue
        if isinstance(delay_params, Mapping):
            law = delay_params.get(node, PowerDelay(0.0))
        else:
            law = delay_params if delay_params is not None else PowerDelay(0.0)
        new.append(ChargerLink(node, law))
    return Network(net.nodes, net.links, net.candidates, list(net.chargers) + new)


def incidence(net: Network) -> np.ndarray:
    """Node-link incidence matrix: +1 where a link starts, -1 where it ends."""
    A = np.zeros((net.n_nodes, net.n_links))
    cols = np.arange(net.n_links)
    A[net.tails, cols] = 1.0
    A[net.heads, cols] = -1.0
    return A


def node_demand_vectors(net: Network, demand: DemandTable,
                        partition: Mapping[tuple[int, int, str], float],
                        tol: float = 1e-9) -> dict[tuple, np.ndarray]:
    """Supply/sink vectors for every flow segment.

    ``partition`` maps ``(i, t, charger_node)`` to the demand of OD ``i``,
    type ``t`` that charges at that node. Returned keys are
    ``(i, t, "c+", node)``, ``(i, t, "c-", node)`` and ``(i, t, "nc")``.
    """
    n = net.n_nodes
    charged: dict[tuple[int, int], float] = {}
    for (i, t, node), q in partition.items():
        if q < -tol:
            raise NetworkError(f"negative partition value for {(i, t, node)}")
        charged[(i, t)] = charged.get((i, t), 0.0) + q
    out: dict[tuple, np.ndarray] = {}
    for od in demand:
        o, d = net.node_index[od.origin], net.node_index[od.destination]
        for t in VEHICLE_TYPES:
            total = od.demand(t)
            used = charged.get((od.i, t), 0.0)
            if used > total + tol:
                raise NetworkError(
                    f"charging partition {used:g} exceeds demand {total:g} for OD {od.i}, type F{t}")
            y = np.zeros(n)
            y[o] += total - used
            y[d] -= total - used
            out[(od.i, t, "nc")] = y
    for (i, t, node), q in partition.items():
        od = demand.od(i)
        o, d, s = net.node_index[od.origin], net.node_index[od.destination], net.node_index[node]
        plus = np.zeros(n)
        plus[o] += q
        plus[s] -= q
        minus = np.zeros(n)
        minus[s] += q
        minus[d] -= q
        out[(i, t, "c+", node)] = plus
        out[(i, t, "c-", node)] = minus
    return out


def dijkstra(net: Network, source: int, costs: Sequence[float] | np.ndarray,
             ) -> tuple[list[float], list[tuple[int, ...] | None]]:
    """Single-source shortest paths over physical links.

    Returns per-node distance and link-index path. Among equal-cost paths the
    lexicographically smallest link-index sequence wins, so results do not
    depend on heap internals.
    """
    n = net.n_nodes
    dist = [math.inf] * n
    paths: list[tuple[int, ...] | None] = [None] * n
    heap = [(0.0, (), source)]
    done = [False] * n
    costs = [float(c) for c in costs]
    while heap:
        dv, path, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        dist[v] = dv
        paths[v] = path
        for k in net.out_links[v]:
            w = net.heads[k]
            if not done[w]:
                nd = dv + costs[k]
                if nd <= dist[w]:
                    dist[w] = nd
                    heapq.heappush(heap, (nd, path + (k,), int(w)))
    return dist, paths


# ---------------------------------------------------------------- file I/O


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise NetworkError(f"{where}: missing field {key!r}")
    return obj[key]


def _number(obj: dict, key: str, where: str, default=None) -> float:
    value = obj.get(key, default) if default is not None else _require(obj, key, where)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise NetworkError(f"{where}: field {key!r} is not a number ({value!r})") from None


def network_from_dict(doc: Mapping) -> Network:
    if not isinstance(doc, Mapping):
        raise NetworkError("network document must be a JSON object")
    nodes = []
    for k, raw in enumerate(doc.get("nodes", [])):
        where = f"nodes[{k}]"
        x, y = raw.get("x"), raw.get("y")
        nodes.append(Node(str(_require(raw, "id", where)),
                          None if x is None else float(x), None if y is None else float(y)))
    links = []
    for k, raw in enumerate(doc.get("links", [])):
        where = f"links[{k}]"
        lanes = _require(raw, "lanes", where)
        if not isinstance(lanes, int) or isinstance(lanes, bool):
            raise NetworkError(f"{where}: field 'lanes' must be an integer ({lanes!r})")
        links.append(Link(
            id=str(_require(raw, "id", where)),
            tail=str(_require(raw, "tail", where)),
            head=str(_require(raw, "head", where)),
            length=_number(raw, "length_m", where),
            lanes=lanes,
            free_flow_time=_number(raw, "fft_s", where),
            flow_capacity=_number(raw, "cap_vph", where) if "cap_vph" in raw else None,
            roundabout=bool(raw.get("roundabout", False)),
            delay=delay_from_dict(raw["delay"]) if "delay" in raw else None,
        ))
    if not links:
        raise NetworkError("network has no links")
    chargers = []
    for k, raw in enumerate(doc.get("existing_chargers", [])):
        if isinstance(raw, str):
            chargers.append(ChargerLink(raw))
        else:
            law = delay_from_dict(raw["delay"]) if "delay" in raw else PowerDelay(0.0)
            chargers.append(ChargerLink(str(_require(raw, "node", f"existing_chargers[{k}]")), law))
    return Network(nodes, links, [str(c) for c in doc.get("candidates", [])], chargers)


def load_network(path: str | Path) -> Network:
    """Read and validate a network JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return network_from_dict(doc)
    except NetworkError as exc:
        raise NetworkError(f"{path}: {exc}") from None


def demand_from_dict(doc: Mapping) -> DemandTable:
    entries = []
    for k, raw in enumerate(doc.get("od", [])):
        where = f"od[{k}]"
        entries.append(ODPair(
            i=int(_require(raw, "i", where)),
            origin=str(_require(raw, "origin", where)),
            destination=str(_require(raw, "destination", where)),
            q_f1=_number(raw, "q_f1", where, 0.0),
            q_f2=_number(raw, "q_f2", where, 0.0),
            q_f3=_number(raw, "q_f3", where, 0.0),
            benefit=_number(raw, "benefit_s", where, 0.0),
        ))
    return DemandTable(tuple(entries))


def load_demand(path: str | Path, net: Network | None = None) -> DemandTable:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        demand = demand_from_dict(doc)
        if net is not None:
            check_demand(net, demand)
    except NetworkError as exc:
        raise NetworkError(f"{path}: {exc}") from None
    return demand


def check_demand(net: Network, demand: DemandTable) -> None:
    for od in demand:
        for end in (od.origin, od.destination):
            if end not in net.node_index:
                raise NetworkError(f"OD {od.i} references unknown node {end!r}")


def network_to_dict(net: Network) -> dict:
    def law(d):
        return d.to_dict()

    doc = {
        "nodes": [{"id": n.id, **({"x": n.x, "y": n.y} if n.x is not None else {})}
                  for n in net.nodes],
        "links": [],
        "candidates": sorted(net.candidates, key=net.node_index.get),
    }
    for l in net.links:
        raw = {"id": l.id, "tail": l.tail, "head": l.head, "length_m": l.length,
               "lanes": l.lanes, "fft_s": l.free_flow_time, "cap_vph": l.flow_capacity}
        if l.roundabout:
            raw["roundabout"] = True
        if l.delay is not None:
            raw["delay"] = law(l.delay)
        doc["links"].append(raw)
    if net.chargers:
        doc["existing_chargers"] = [{"node": c.node, "delay": law(c.delay)} for c in net.chargers]
    return doc


def demand_to_dict(demand: DemandTable) -> dict:
    return {"od": [{"i": od.i, "origin": od.origin, "destination": od.destination,
                    "q_f1": od.q_f1, "q_f2": od.q_f2, "q_f3": od.q_f3, "benefit_s": od.benefit}
                   for od in demand]}
