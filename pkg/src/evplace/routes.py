"""Route libraries and route-flow recovery from equilibrium link flows."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from evplace.network import F1, F2, F3, DemandTable, Network, NetworkError, dijkstra


@dataclass(frozen=True)
class Route:
    route_id: str
    od: int
    vtype: int
    links: tuple[str, ...]
    charger: str | None = None
    charge_at: int | None = None  # number of links driven before charging
    free_flow_cost: float = 0.0
    repeats_node: bool = False

    @property
    def charges(self) -> bool:
        return self.charger is not None

    def group(self) -> tuple[int, int, str | None]:
        return (self.od, self.vtype, self.charger)


@dataclass
class RouteLibrary:
    routes: list[Route]
    link_ids: tuple[str, ...]
    R: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.routes)

    def index(self, route_id: str) -> int:
        for k, r in enumerate(self.routes):
            if r.route_id == route_id:
                return k
        raise KeyError(route_id)


@dataclass
class RouteFlows:
    f: np.ndarray
    residual: float
    library: RouteLibrary = field(repr=False)
    constraint_residual: float = 0.0

    def by_route(self) -> dict[str, float]:
        return {r.route_id: float(v) for r, v in zip(self.library.routes, self.f)}


@dataclass(frozen=True)
class CoverageReport:
    k: int
    coverage: float
    mae: float
    rmse: float
    correlation: float


def free_flow_costs(net: Network) -> list[float]:
    """Link delay at zero flow (the delay law if set, else the free-flow time)."""
    return [l.delay(0.0) if l.delay is not None else l.free_flow_time for l in net.links]


def _path_cost(path, costs) -> float:
    return float(sum(costs[k] for k in path))


def k_shortest_paths(net: Network, o: str, d: str, k: int,
                     costs: Sequence[float] | None = None) -> list[tuple[tuple[int, ...], float]]:
    """Yen's loopless k-shortest paths as ``(link indices, cost)`` pairs.

    Costs default to zero-flow link delays. Ties are broken by link-index
    sequence so the output is deterministic.
    """
    if o == d:
        raise ValueError("origin and destination must differ")
    if k < 1:
        raise ValueError("k must be at least 1")
    if costs is None:
        costs = free_flow_costs(net)
    costs = [float(c) for c in costs]
    src, dst = net.node_index[o], net.node_index[d]

    dist, paths = dijkstra(net, src, costs)
    if paths[dst] is None:
        return []
    found = [(paths[dst], dist[dst])]
    candidates: list[tuple[float, tuple[int, ...]]] = []
    seen = {paths[dst]}

    def nodes_of(path):
        seq = [src]
        for e in path:
            seq.append(int(net.heads[e]))
        return seq

    while len(found) < k:
        last = found[-1][0]
        last_nodes = nodes_of(last)
        for j in range(len(last)):
            spur = last_nodes[j]
            root = last[:j]
            banned_links = set()
            for p, _ in found:
                if p[:j] == root and len(p) > j:
                    banned_links.add(p[j])
            banned_nodes = set(last_nodes[:j])
            masked = list(costs)
            for e in banned_links:
                masked[e] = math.inf
            for e in range(net.n_links):
                if int(net.tails[e]) in banned_nodes or int(net.heads[e]) in banned_nodes:
                    masked[e] = math.inf
            sd, sp = dijkstra(net, spur, masked)
            if sp[dst] is None or not math.isfinite(sd[dst]):
                continue
            total = root + sp[dst]
            if total not in seen:
                seen.add(total)
                candidates.append((_path_cost(total, costs), total))
        if not candidates:
            break
        candidates.sort()
        cost, path = candidates.pop(0)
        found.append((path, cost))
    return found


def _node_sequence(net: Network, origin: str, links: Sequence[int]) -> list[int]:
    seq = [net.node_index[origin]]
    for e in links:
        seq.append(int(net.heads[e]))
    return seq


def build_route_library(net: Network, demand: DemandTable, charger_selection=None,
                        k_od: int = 8, k_oc: int = 4, k_cd: int = 4,
                        costs: Sequence[float] | None = None) -> RouteLibrary:
    """Candidate routes for every OD pair and vehicle type with demand.

    Non-charging routes are the ``k_od`` shortest O->D paths. Charging routes
    join each of the ``k_oc`` shortest O->charger paths with each of the
    ``k_cd`` shortest charger->D paths for every charger in ``net`` (and in
    ``charger_selection``). Joined routes that revisit a node are kept and
    flagged with ``repeats_node``.
    """
    if min(k_od, k_oc, k_cd) < 1:
        raise ValueError("k parameters must be at least 1")
    chargers = [c.node for c in net.chargers]
    for node in charger_selection or ():
        if node not in chargers:
            chargers.append(node)
    chargers.sort(key=net.node_index.get)
    if costs is None:
        costs = free_flow_costs(net)

    routes: list[Route] = []
    seen: set = set()

    def add(od, t, links, charger, charge_at, cost):
        key = (od.i, t, links, charger, charge_at)
        if key in seen:
            return
        seen.add(key)
        nodes = _node_sequence(net, od.origin, links)
        repeats = len(set(nodes)) < len(nodes)
        rid = f"r{len(routes)}"
        routes.append(Route(rid, od.i, t, tuple(net.links[e].id for e in links), charger,
                            charge_at, cost, repeats))

    sp_cache: dict[tuple[str, str, int], list] = {}

    def ksp(a, b, k):
        if a == b:
            return [((), 0.0)]
        if (a, b, k) not in sp_cache:
            sp_cache[(a, b, k)] = k_shortest_paths(net, a, b, k, costs)
        return sp_cache[(a, b, k)]

    for od in demand:
        for t in (F1, F2, F3):
            if od.demand(t) <= 0:
                continue
            if t in (F1, F3):
                for path, cost in ksp(od.origin, od.destination, k_od):
                    add(od, t, path, None, None, cost)
            if t in (F2, F3):
                for node in chargers:
                    for p1, c1 in ksp(od.origin, node, k_oc):
                        for p2, c2 in ksp(node, od.destination, k_cd):
                            add(od, t, p1 + p2, node, len(p1), c1 + c2)

    R = np.zeros((net.n_links, len(routes)))
    for j, r in enumerate(routes):
        for lid in r.links:
            R[net.link_index[lid], j] += 1.0
    return RouteLibrary(routes, tuple(l.id for l in net.links), R)


# ---------------------------------------------------------------- recovery


def _project_simplex(v: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto ``{f >= 0, sum f = total}``."""
    if total <= 0:
        return np.zeros_like(v)
    if v.size == 1:
        return np.array([total])
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    ind = np.arange(1, v.size + 1)
    hits = np.nonzero(u - css / ind > 0)[0]
    rho = hits[-1] if hits.size else 0
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


def recovery_groups(lib: RouteLibrary, demand: DemandTable,
                    partition: Mapping[tuple[int, int, str], float],
                    tol: float = 1e-12) -> list[tuple[tuple, np.ndarray, float]]:
    """Disjoint route groups with their required total flow.

    Each route belongs to exactly one group ``(i, t, charger-or-None)``;
    the group totals encode both the OD demand and the charger constraints.
    Raises ``NetworkError`` naming every group with demand but no route.
    """
    members: dict[tuple, list[int]] = {}
    for j, r in enumerate(lib.routes):
        members.setdefault(r.group(), []).append(j)
    targets: dict[tuple, float] = {}
    for od in demand:
        for t in (F1, F2, F3):
            q = od.demand(t)
            if t == F1:
                targets[(od.i, t, None)] = q
                continue
            charged = 0.0
            for (i, tt, node), v in sorted(partition.items()):
                if i == od.i and tt == t and v > 0:
                    targets[(i, t, node)] = v
                    charged += v
            if t == F3:
                targets[(od.i, t, None)] = max(q - charged, 0.0)
    uncovered = [g for g, v in targets.items() if v > tol and g not in members]
    if uncovered:
        names = ", ".join(f"(OD {i}, F{t}, {c or 'no charger'})" for i, t, c in uncovered)
        raise NetworkError(f"route library does not cover: {names}")
    groups = []
    for g, idx in sorted(members.items(), key=lambda kv: kv[1][0]):
        groups.append((g, np.array(idx), targets.get(g, 0.0)))
    return groups


def _project(f: np.ndarray, groups) -> np.ndarray:
    out = np.zeros_like(f)
    for _, idx, total in groups:
        out[idx] = _project_simplex(f[idx], total)
    return out


def _polish(R: np.ndarray, x: np.ndarray, f: np.ndarray, groups, tol=1e-12):
    """Solve the equality-constrained least squares on the current support."""
    support = f > tol
    cols = np.nonzero(support)[0]
    if cols.size == 0:
        return f
    rows = []
    rhs = []
    for _, idx, total in groups:
        mask = support[idx]
        if mask.any():
            row = np.zeros(cols.size)
            row[np.searchsorted(cols, idx[mask])] = 1.0
            rows.append(row)
            rhs.append(total)
    Rs = R[:, cols]
    Cm = np.array(rows)
    n, m = cols.size, len(rows)
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = Rs.T @ Rs
    kkt[:n, n:] = Cm.T
    kkt[n:, :n] = Cm
    b = np.concatenate([Rs.T @ x, rhs])
    sol = np.linalg.lstsq(kkt, b, rcond=None)[0]
    out = np.zeros_like(f)
    out[cols] = sol[:n]
    return out


def recover_flows(lib: RouteLibrary, x_star: np.ndarray, demand: DemandTable,
                  partition: Mapping[tuple[int, int, str], float],
                  max_iter: int = 20000, rtol: float = 1e-10) -> RouteFlows:
    """Nonnegative route flows that best reproduce ``x_star``.

    Minimises ``||R f - x*||^2`` subject to per-(OD, type) demand, per-charger
    partition and ``f >= 0``. Accelerated projected gradient (each group is a
    scaled simplex) followed by an exact equality-constrained solve on the
    identified support.
    """
    x_star = np.asarray(x_star, dtype=float)
    groups = recovery_groups(lib, demand, partition)
    R = lib.R
    M = R.shape[1]
    if M == 0:
        return RouteFlows(np.zeros(0), float(np.linalg.norm(x_star)), lib)

    def obj(f):
        r = R @ f - x_star
        return float(r @ r)

    L = max(float(np.linalg.norm(R, 2)) ** 2, 1e-12)
    f = _project(np.zeros(M), groups)
    y = f.copy()
    tk = 1.0
    prev = obj(f)
    for _ in range(max_iter):
        grad = R.T @ (R @ y - x_star)
        f_new = _project(y - grad / L, groups)
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        y = f_new + ((tk - 1) / t_new) * (f_new - f)
        cur = obj(f_new)
        if cur > prev:  # restart momentum
            y = f_new.copy()
            t_new = 1.0
        f, tk = f_new, t_new
        if abs(prev - cur) <= rtol * max(prev, 1e-300) or cur <= 1e-24 * max(1.0, x_star @ x_star):
            prev = cur
            break
        prev = cur

    for _ in range(5):
        cand = _polish(R, x_star, f, groups)
        if cand.min() >= -1e-12 and obj(cand) <= obj(f) + 1e-15:
            cand = np.maximum(cand, 0.0)
            f = cand
        else:
            break
    f = np.maximum(f, 0.0)
    cres = max((abs(f[idx].sum() - total) for _, idx, total in groups), default=0.0)
    return RouteFlows(f, float(np.linalg.norm(R @ f - x_star)), lib, cres)


def topk_coverage(flows: RouteFlows, lib: RouteLibrary, x_star: np.ndarray,
                  ks: Sequence[int]) -> list[CoverageReport]:
    """Reconstruction quality using only the ``k`` largest route flows.

    Coverage counts reconstructed flow only up to the equilibrium flow on each
    link, so it lies in [0, 1] and never decreases in ``k``.
    """
    x_star = np.asarray(x_star, dtype=float)
    order = sorted(range(len(flows.f)), key=lambda j: (-flows.f[j], j))
    total = float(x_star.sum())
    reports = []
    for k in ks:
        keep = np.zeros_like(flows.f)
        sel = order[: max(0, min(k, len(order)))]
        keep[sel] = flows.f[sel]
        xt = lib.R @ keep
        err = xt - x_star
        cov = float(np.minimum(xt, x_star).sum() / total) if total > 0 else 0.0
        if np.std(xt) > 0 and np.std(x_star) > 0:
            corr = float(np.corrcoef(xt, x_star)[0, 1])
        else:
            corr = math.nan
        reports.append(CoverageReport(int(k), cov, float(np.abs(err).mean()),
                                      float(np.sqrt((err ** 2).mean())), corr))
    return reports


def top_routes(flows: RouteFlows, k: int) -> list[int]:
    order = sorted(range(len(flows.f)), key=lambda j: (-flows.f[j], j))
    return [j for j in order[:k] if flows.f[j] > 0]


# ------------------------------------------------------------------ export


def route_to_dict(r: Route) -> dict:
    return {"route_id": r.route_id, "od": r.od, "type": r.vtype, "charger": r.charger,
            "charge_at": r.charge_at, "links": list(r.links),
            "free_flow_cost": r.free_flow_cost, "repeats_node": r.repeats_node}


def route_from_dict(raw: Mapping) -> Route:
    return Route(raw["route_id"], int(raw["od"]), int(raw["type"]), tuple(raw["links"]),
                 raw.get("charger"), raw.get("charge_at"), float(raw.get("free_flow_cost", 0.0)),
                 bool(raw.get("repeats_node", False)))


def write_library(path: str | Path, lib: RouteLibrary) -> None:
    Path(path).write_text(json.dumps([route_to_dict(r) for r in lib.routes], indent=2) + "\n")


def read_library(path: str | Path, net: Network) -> RouteLibrary:
    routes = [route_from_dict(raw) for raw in json.loads(Path(path).read_text())]
    return library_from_routes(net, routes)


def library_from_routes(net: Network, routes: Sequence[Route]) -> RouteLibrary:
    R = np.zeros((net.n_links, len(routes)))
    for j, r in enumerate(routes):
        for lid in r.links:
            R[net.link_index[lid], j] += 1.0
    return RouteLibrary(list(routes), tuple(l.id for l in net.links), R)


def write_route_flows(path: str | Path, flows: RouteFlows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["route_id", "flow"])
        for r, v in zip(flows.library.routes, flows.f):
            w.writerow([r.route_id, repr(float(v))])


def read_route_flows(path: str | Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["route_id"]: float(row["flow"]) for row in csv.DictReader(fh)}


def write_coverage(path: str | Path, reports: Sequence[CoverageReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "coverage", "mae", "rmse", "corr"])
        for rep in reports:
            w.writerow([rep.k, repr(rep.coverage), repr(rep.mae), repr(rep.rmse), repr(rep.correlation)])
