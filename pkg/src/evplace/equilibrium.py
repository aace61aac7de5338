"""Link-space congestion-game equilibrium with charging demand.

The decision variables are per-commodity link flows ``x^(i,t,c+)``,
``x^(i,t,c-)``, ``x^(i,t,nc)`` and the charger partition ``q^(i,t,c)``. The
objective is the Beckmann potential over physical and charger links minus the
charging benefit collected by may-charge (F3) drivers; its minimizers are the
Nash (Wardrop) equilibria of the game.

The solver is a conditional-gradient method. Its linear subproblem is
``charger_best_response`` (shortest path, or shortest detour through a
charger), the generated extreme directions are kept per commodity, and flow is
moved pairwise from costlier directions to the current best response with an
exact line search. Plain Frank-Wolfe steps converge too slowly for a 1e-6
relative gap; the pairwise variant reaches it in a handful of sweeps.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from evplace.delay import DelayParams, PowerDelay, PowerLaws
from evplace.network import (
    F1, F2, F3, VEHICLE_TYPES, DemandTable, Network, augment_with_chargers, dijkstra,
    incidence, node_demand_vectors,
)

DEFAULT_TOLERANCE = 1e-6
DEFAULT_MAX_ITER = 50_000


class InfeasibleDemandError(ValueError):
    """Some OD pair (or its charging requirement) cannot be served."""

    def __init__(self, message: str, od: int | None = None, vtype: int | None = None):
        super().__init__(message)
        self.od = od
        self.vtype = vtype


class InfeasibleFlowError(ValueError):
    def __init__(self, message: str, violation: float):
        super().__init__(message)
        self.violation = violation


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, solution=None):
        super().__init__(message)
        self.solution = solution


def resolve_link_laws(net: Network, delays=None) -> list[DelayParams | PowerDelay]:
    """Congestion-game delay law of every physical link.

    Priority: ``delays`` (mapping by link id, or a sequence aligned with
    ``net.links``), then the link's own ``delay`` attribute, then BPR with
    the link's free-flow time and capacity and the standard a=0.15, b=4.
    """
    if delays is not None and not isinstance(delays, Mapping):
        delays = list(delays)
        if len(delays) != net.n_links:
            raise ValueError("delay list must align with network links")
        return delays
    delays = delays or {}
    laws = []
    for link in net.links:
        if link.id in delays:
            laws.append(delays[link.id])
        elif link.delay is not None:
            laws.append(link.delay)
        else:
            laws.append(DelayParams(link.free_flow_time, link.flow_capacity))
    return laws


@dataclass(frozen=True)
class Commodity:
    i: int
    t: int
    origin: int
    destination: int
    demand: float
    benefit: float  # charging benefit, non-zero only for F3


# A solver route: physical links before the charger, charger index (or None),
# physical links after the charger. Non-charging routes keep everything in pre.
RouteKey = tuple[tuple[int, ...], int | None, tuple[int, ...]]


@dataclass
class CommodityFlows:
    """Per-commodity link flows and charger partition."""

    plus: dict[tuple[int, int, str], np.ndarray] = field(default_factory=dict)
    minus: dict[tuple[int, int, str], np.ndarray] = field(default_factory=dict)
    nc: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    q: dict[tuple[int, int, str], float] = field(default_factory=dict)

    def total_link_flow(self, n_links: int) -> np.ndarray:
        x = np.zeros(n_links)
        for group in (self.nc, self.plus, self.minus):
            for v in group.values():
                x += v
        return x

    def charger_flow(self, net: Network) -> np.ndarray:
        xh = np.zeros(len(net.chargers))
        for (_, _, node), q in self.q.items():
            xh[net.charger_index[node]] += q
        return xh


@dataclass
class EquilibriumSolution:
    network: Network
    x: np.ndarray
    x_hat: np.ndarray
    commodities: CommodityFlows
    potential: float
    total_delay: float
    wardrop_gap: float
    iterations: int = 0
    potential_history: list[float] = field(default_factory=list)
    route_flows: dict[tuple[int, int], list[tuple[RouteKey, float]]] = field(default_factory=dict)
    link_delays: np.ndarray | None = None
    charger_delays: np.ndarray | None = None

    def partition(self) -> dict[tuple[int, int, str], float]:
        return dict(self.commodities.q)


class _Problem:
    def __init__(self, net: Network, demand: DemandTable, delays=None):
        self.net = net
        self.demand = demand
        self.E = net.n_links
        self.C = len(net.chargers)
        self.laws = PowerLaws(list(resolve_link_laws(net, delays)) + [c.delay for c in net.chargers])
        self.commodities: list[Commodity] = []
        for od in demand:
            o, d = net.node_index[od.origin], net.node_index[od.destination]
            for t in VEHICLE_TYPES:
                q = od.demand(t)
                if q > 0:
                    self.commodities.append(
                        Commodity(od.i, t, o, d, q, od.benefit if t == F3 else 0.0))

    def costs(self, xe: np.ndarray) -> np.ndarray:
        return self.laws.delay(xe)

    def ext(self, route: RouteKey) -> list[int]:
        pre, c, post = route
        return list(pre) + ([self.E + c] if c is not None else []) + list(post)


class _PathCache:
    """Shortest-path trees at a fixed cost vector, computed on demand."""

    def __init__(self, net: Network, costs: np.ndarray):
        self.net = net
        self.costs = costs[: net.n_links]
        self.trees: dict[int, tuple[list[float], list]] = {}

    def tree(self, source: int):
        if source not in self.trees:
            self.trees[source] = dijkstra(self.net, source, self.costs)
        return self.trees[source]


def _best_response(net: Network, costs: np.ndarray, com: Commodity,
                   cache: _PathCache | None = None) -> tuple[RouteKey | None, float]:
    if cache is None:
        cache = _PathCache(net, costs)
    E = net.n_links
    best: RouteKey | None = None
    best_cost = math.inf
    if com.t in (F1, F3):
        dist, paths = cache.tree(com.origin)
        if paths[com.destination] is not None:
            best = (paths[com.destination], None, ())
            best_cost = dist[com.destination]
    if com.t in (F2, F3):
        dist_o, paths_o = cache.tree(com.origin)
        charge_best: RouteKey | None = None
        charge_cost = math.inf
        for c, ch in enumerate(net.chargers):
            v = net.node_index[ch.node]
            if paths_o[v] is None:
                continue
            dist_c, paths_c = cache.tree(v)
            if paths_c[com.destination] is None:
                continue
            cost = dist_o[v] + float(costs[E + c]) + dist_c[com.destination] - com.benefit
            cand = (paths_o[v], c, paths_c[com.destination])
            if cost < charge_cost or (cost == charge_cost and cand < charge_best):
                charge_best, charge_cost = cand, cost
        # ties between charging and not charging favour not charging
        if charge_cost < best_cost:
            best, best_cost = charge_best, charge_cost
    return best, best_cost


def charger_best_response(net: Network, costs: np.ndarray, od, vtype: int,
                          benefit: float | None = None) -> tuple[RouteKey, float]:
    """Cheapest feasible route for one driver class at fixed link costs.

    ``costs`` covers the physical links followed by the chargers of ``net``.
    F1 takes the shortest path, F2 the cheapest detour through one charger,
    F3 the better of the two after subtracting its charging benefit.
    """
    if benefit is None:
        benefit = od.benefit if vtype == F3 else 0.0
    com = Commodity(od.i, vtype, net.node_index[od.origin], net.node_index[od.destination],
                    od.demand(vtype), benefit if vtype == F3 else 0.0)
    route, cost = _best_response(net, np.asarray(costs, dtype=float), com)
    if route is None:
        raise InfeasibleDemandError(
            f"OD {od.i} ({od.origin}->{od.destination}) type F{vtype}: destination unreachable"
            + (" through any charger" if vtype == F2 else ""), od.i, vtype)
    return route, cost


def _route_cost(prob: _Problem, route: RouteKey, costs: np.ndarray, com: Commodity) -> float:
    pre, c, post = route
    total = float(costs[list(pre)].sum()) + float(costs[list(post)].sum()) if (pre or post) else 0.0
    if c is not None:
        total += float(costs[prob.E + c]) - com.benefit
    return total


def _line_search(laws: PowerLaws, xe: np.ndarray, idx: np.ndarray, dirn: np.ndarray,
                 const: float, hi: float) -> float:
    """Minimise the potential along ``xe + s * dirn`` for ``s`` in [0, hi].

    ``const`` is the constant part of the directional derivative (benefit
    difference). Safeguarded Newton on the derivative, bisection fallback.
    """
    sub = laws.subset(idx)
    x0 = xe[idx]

    def grad(s):
        return float(np.dot(dirn, sub.delay(x0 + s * dirn))) + const

    def hess(s):
        return float(np.dot(dirn * dirn, sub.derivative(x0 + s * dirn)))

    if grad(hi) <= 0.0:
        return hi
    lo = 0.0
    g_lo = grad(0.0)
    if g_lo >= 0.0:
        return 0.0
    s = lo
    for _ in range(200):
        h = hess(s)
        g = grad(s)
        if g < 0:
            lo = s
        elif g > 0:
            hi = s
        else:
            return s
        step = s - g / h if h > 0 else math.nan
        if not (lo < step < hi):
            step = 0.5 * (lo + hi)
        if hi - lo <= 1e-13 * max(1.0, abs(hi)) or step == s:
            return step
        s = step
    return 0.5 * (lo + hi)


def _link_loads(prob: _Problem, routes: list[dict[RouteKey, float]]) -> np.ndarray:
    xe = np.zeros(prob.E + prob.C)
    for fl in routes:
        for r, f in fl.items():
            np.add.at(xe, prob.ext(r), f)
    return xe


def _extrapolate(prob: _Problem, routes: list[dict[RouteKey, float]],
                 before: list[dict[RouteKey, float]]) -> np.ndarray:
    """Continue along the displacement of the last sweep with an exact line search.

    Sweeping commodity by commodity zigzags when classes share most of their
    links; stepping further along the net sweep move removes most of that.
    Updates ``routes`` in place and returns rebuilt link loads.
    """
    xe = _link_loads(prob, routes)
    moves = []
    hi = math.inf
    const = 0.0
    dirn = np.zeros(prob.E + prob.C)
    for com, fl, old in zip(prob.commodities, routes, before):
        for r in set(fl) | set(old):
            d = fl.get(r, 0.0) - old.get(r, 0.0)
            if abs(d) <= 1e-12 * max(1.0, com.demand):
                continue
            moves.append((fl, r, d))
            np.add.at(dirn, prob.ext(r), d)
            if r[1] is not None:
                const -= d * com.benefit
            if d < 0:
                hi = min(hi, fl.get(r, 0.0) / -d)
    if not moves or not (hi > 0) or math.isinf(hi):
        return xe
    idx = np.nonzero(dirn)[0]
    if idx.size == 0:
        return xe
    step = _line_search(prob.laws, xe, idx, dirn[idx], const, hi)
    if step <= 0:
        return xe
    for fl, r, d in moves:
        f = fl.get(r, 0.0) + step * d
        if d < 0 and f <= 1e-12 * max(1.0, -d):
            f = 0.0
        if f > 0:
            fl[r] = f
        else:
            fl.pop(r, None)
    # keep each class total exact despite round-off
    for com, fl in zip(prob.commodities, routes):
        if fl:
            top = max(fl, key=fl.get)
            fl[top] += com.demand - sum(fl.values())
    return _link_loads(prob, routes)


def _check_feasible(prob: _Problem):
    zero = prob.costs(np.zeros(prob.E + prob.C))
    cache = _PathCache(prob.net, zero)
    for com in prob.commodities:
        route, _ = _best_response(prob.net, zero, com, cache)
        if route is None:
            od = prob.demand.od(com.i)
            what = "no charger reachable on the way" if com.t == F2 else "destination unreachable"
            raise InfeasibleDemandError(
                f"OD {com.i} ({od.origin}->{od.destination}) type F{com.t}: {what}", com.i, com.t)


def _commodity_flows(prob: _Problem, routes: list[dict[RouteKey, float]]) -> CommodityFlows:
    net = prob.net
    out = CommodityFlows()
    for od in prob.demand:
        for t in VEHICLE_TYPES:
            out.nc[(od.i, t)] = np.zeros(prob.E)
    for com, flows in zip(prob.commodities, routes):
        for (pre, c, post), f in flows.items():
            if f <= 0:
                continue
            if c is None:
                np.add.at(out.nc[(com.i, com.t)], list(pre), f)
                continue
            node = net.chargers[c].node
            key = (com.i, com.t, node)
            if key not in out.q:
                out.q[key] = 0.0
                out.plus[key] = np.zeros(prob.E)
                out.minus[key] = np.zeros(prob.E)
            out.q[key] += f
            np.add.at(out.plus[key], list(pre), f)
            np.add.at(out.minus[key], list(post), f)
    return out


def _gap_terms(prob: _Problem, flows: CommodityFlows, x: np.ndarray, xh: np.ndarray):
    """Total experienced cost and total best-response cost at current flows."""
    net = prob.net
    costs = prob.costs(np.concatenate([x, xh]))
    link_c, ch_c = costs[: prob.E], costs[prob.E:]
    cache = _PathCache(net, costs)
    experienced = 0.0
    shortest = 0.0
    for com in prob.commodities:
        vec = flows.nc[(com.i, com.t)].copy()
        charge_cost = 0.0
        for (i, t, node), q in flows.q.items():
            if i == com.i and t == com.t:
                vec += flows.plus[(i, t, node)] + flows.minus[(i, t, node)]
                charge_cost += q * (ch_c[net.charger_index[node]] - com.benefit)
        experienced += float(vec @ link_c) + charge_cost
        _, best = _best_response(net, costs, com, cache)
        shortest += com.demand * best
    return experienced, shortest


def _relative_gap(experienced: float, shortest: float) -> float:
    diff = max(experienced - shortest, 0.0)
    if diff == 0.0:
        return 0.0
    denom = abs(shortest)
    if denom <= 1e-12:
        denom = abs(experienced) if abs(experienced) > 1e-12 else 1.0
    return diff / denom


def _evaluate(prob: _Problem, flows: CommodityFlows) -> tuple[np.ndarray, np.ndarray, float, float, float]:
    x = flows.total_link_flow(prob.E)
    xh = flows.charger_flow(prob.net)
    xe = np.concatenate([x, xh])
    integ = prob.laws.integral(xe)
    benefit = sum(q * prob.demand.od(i).benefit for (i, t, _), q in flows.q.items() if t == F3)
    pot = float(integ.sum()) - benefit
    costs = prob.costs(xe)
    tot = float(xe @ costs)
    gap = _relative_gap(*_gap_terms(prob, flows, x, xh))
    return x, xh, pot, tot, gap


def check_flows(net: Network, demand: DemandTable, flows: CommodityFlows, tol: float = 1e-7) -> float:
    """Largest constraint violation of a candidate commodity flow."""
    A = incidence(net)
    worst = 0.0
    for group in (flows.nc, flows.plus, flows.minus):
        for v in group.values():
            worst = max(worst, float(-v.min(initial=0.0)))
    ys = node_demand_vectors(net, demand, {k: max(v, 0.0) for k, v in flows.q.items()}, tol=math.inf)
    for key, v in flows.nc.items():
        worst = max(worst, float(np.abs(A @ v - ys[key + ("nc",)]).max()))
    for key in flows.q:
        worst = max(worst, -flows.q[key])
        worst = max(worst, float(np.abs(A @ flows.plus[key] - ys[key[:2] + ("c+", key[2])]).max()))
        worst = max(worst, float(np.abs(A @ flows.minus[key] - ys[key[:2] + ("c-", key[2])]).max()))
        if key[2] not in net.charger_index:
            worst = max(worst, math.inf)
    for od in demand:
        for t in VEHICLE_TYPES:
            charged = sum(q for (i, tt, _), q in flows.q.items() if i == od.i and tt == t)
            if t == F1:
                worst = max(worst, abs(charged))
            elif t == F2:
                worst = max(worst, abs(charged - od.q_f2))
            else:
                worst = max(worst, charged - od.q_f3)
    return worst


def potential(net: Network, demand: DemandTable, delays, flows: CommodityFlows,
              tol: float = 1e-7) -> float:
    """Extended Beckmann potential of a feasible commodity flow."""
    viol = check_flows(net, demand, flows, tol)
    if viol > tol:
        raise InfeasibleFlowError(f"flows violate constraints (max violation {viol:.3g})", viol)
    prob = _Problem(net, demand, delays)
    x = flows.total_link_flow(prob.E)
    xh = flows.charger_flow(net)
    benefit = sum(q * demand.od(i).benefit for (i, t, _), q in flows.q.items() if t == F3)
    return float(prob.laws.integral(np.concatenate([x, xh])).sum()) - benefit


def evaluate_flows(net: Network, demand: DemandTable, delays, flows: CommodityFlows,
                   tol: float = 1e-7) -> EquilibriumSolution:
    """Wrap a hand-built feasible flow into a solution with all metrics."""
    viol = check_flows(net, demand, flows, tol)
    if viol > tol:
        raise InfeasibleFlowError(f"flows violate constraints (max violation {viol:.3g})", viol)
    prob = _Problem(net, demand, delays)
    x, xh, pot, tot, gap = _evaluate(prob, flows)
    costs = prob.costs(np.concatenate([x, xh]))
    return EquilibriumSolution(net, x, xh, flows, pot, tot, gap,
                               link_delays=costs[: prob.E], charger_delays=costs[prob.E:])


def wardrop_gap(solution: EquilibriumSolution, net: Network | None = None,
                demand: DemandTable | None = None, delays=None) -> float:
    """Relative gap between experienced and best-response cost.

    Zero exactly when every used route of every class is a cheapest one.
    """
    net = net or solution.network
    if demand is None:
        raise ValueError("demand table required")
    prob = _Problem(net, demand, delays)
    return _relative_gap(*_gap_terms(prob, solution.commodities, solution.x, solution.x_hat))


def total_delay(solution: EquilibriumSolution, delays=None) -> float:
    """Sum of flow times delay over physical and charger links."""
    net = solution.network
    laws = PowerLaws(list(resolve_link_laws(net, delays)) + [c.delay for c in net.chargers])
    xe = np.concatenate([solution.x, solution.x_hat])
    return float(xe @ laws.delay(xe))


def _route_order(item):
    (pre, c, post), _ = item
    return (pre, -1 if c is None else c, post)


def solve_cp(net: Network, demand: DemandTable, delays=None, selection: Iterable[str] = (),
             charger_delay=None, tolerance: float = DEFAULT_TOLERANCE,
             max_iter: int = DEFAULT_MAX_ITER, raise_on_cap: bool = True) -> EquilibriumSolution:
    """Equilibrium of the congestion game for the chargers in ``net`` plus ``selection``.

    Raises ``InfeasibleDemandError`` when an OD pair (or its must-charge
    demand) cannot be routed and ``ConvergenceError`` if the gap is still
    above ``tolerance`` after ``max_iter`` sweeps.
    """
    selection = list(selection)
    if selection:
        net = augment_with_chargers(net, selection, charger_delay)
    prob = _Problem(net, demand, delays)
    _check_feasible(prob)
    E, C = prob.E, prob.C
    xe = np.zeros(E + C)

    routes: list[dict[RouteKey, float]] = []
    zero_costs = prob.costs(xe)
    cache = _PathCache(net, zero_costs)
    for com in prob.commodities:
        r, _ = _best_response(net, zero_costs, com, cache)
        routes.append({r: com.demand})
        np.add.at(xe, prob.ext(r), com.demand)

    def pot_of(xe):
        benefit = sum(f * com.benefit for com, fl in zip(prob.commodities, routes)
                      for (pre, c, post), f in fl.items() if c is not None)
        return float(prob.laws.integral(xe).sum()) - benefit

    history = [pot_of(xe)]
    gap = math.inf
    it = 0
    while it < max_iter:
        flows = _commodity_flows(prob, routes)
        exp_cost, sp_cost = _gap_terms(prob, flows, xe[:E], xe[E:])
        gap = _relative_gap(exp_cost, sp_cost)
        if gap <= tolerance or not prob.commodities:
            break
        it += 1
        before = [dict(fl) for fl in routes]
        for k, com in enumerate(prob.commodities):
            for _inner in range(10):
                costs = prob.costs(xe)
                best, best_cost = _best_response(net, costs, com)
                fl = routes[k]
                fl.setdefault(best, 0.0)
                moved = False
                b_ext = prob.ext(best)
                b_ben = com.benefit if best[1] is not None else 0.0
                for r in sorted(fl, key=lambda r: -_route_cost(prob, r, costs, com)):
                    if r == best or fl[r] <= 0:
                        continue
                    rc = _route_cost(prob, r, costs, com)
                    if rc - best_cost <= 1e-15 * max(1.0, abs(rc)):
                        continue
                    dirn = np.zeros(E + C)
                    np.add.at(dirn, b_ext, 1.0)
                    np.add.at(dirn, prob.ext(r), -1.0)
                    idx = np.nonzero(dirn)[0]
                    r_ben = com.benefit if r[1] is not None else 0.0
                    step = _line_search(prob.laws, xe, idx, dirn[idx], r_ben - b_ben, fl[r])
                    if step <= 0:
                        continue
                    if step >= fl[r] * (1 - 1e-15):
                        step = fl[r]
                    xe[idx] += step * dirn[idx]
                    np.maximum(xe, 0.0, out=xe)
                    fl[r] -= step
                    fl[best] += step
                    moved = True
                    costs = prob.costs(xe)
                    best_cost = _route_cost(prob, best, costs, com)
                for r in [r for r, f in fl.items() if f <= 0]:
                    del fl[r]
                if not moved:
                    break
        xe = _extrapolate(prob, routes, before)
        history.append(pot_of(xe))

    flows = _commodity_flows(prob, routes)
    x, xh, pot, tot, gap = _evaluate(prob, flows)
    costs = prob.costs(np.concatenate([x, xh]))
    sol = EquilibriumSolution(
        net, x, xh, flows, pot, tot, gap, iterations=it, potential_history=history,
        route_flows={(com.i, com.t): sorted(fl.items(), key=_route_order)
                     for com, fl in zip(prob.commodities, routes)},
        link_delays=costs[:E], charger_delays=costs[E:])
    if gap > tolerance and raise_on_cap:
        raise ConvergenceError(f"gap {gap:.3g} above tolerance {tolerance:g} after {it} sweeps", sol)
    return sol


# ------------------------------------------------------------------ export


def write_solution(out_dir: str | Path, sol: EquilibriumSolution) -> None:
    """Link CSV, charger CSV, heatmap CSV and JSON summary (with partition)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = sol.network
    with open(out / "link_flows.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["link_id", "flow", "delay"])
        for k, link in enumerate(net.links):
            w.writerow([link.id, repr(float(sol.x[k])), repr(float(sol.link_delays[k]))])
    with open(out / "charger_flows.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "throughput", "delay"])
        for c, ch in enumerate(net.chargers):
            w.writerow([ch.node, repr(float(sol.x_hat[c])), repr(float(sol.charger_delays[c]))])
    with open(out / "heatmap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["link_id", "flow"])
        for k, link in enumerate(net.links):
            w.writerow([link.id, repr(float(sol.x[k]))])
    summary = {
        "potential": sol.potential,
        "total_delay": sol.total_delay,
        "wardrop_gap": sol.wardrop_gap,
        "iterations": sol.iterations,
        "chargers": [ch.node for ch in net.chargers],
        "link_flows": {link.id: float(sol.x[k]) for k, link in enumerate(net.links)},
        "partition": [{"i": i, "t": t, "charger": node, "q": q}
                      for (i, t, node), q in sorted(sol.commodities.q.items())],
    }
    (out / "equilibrium.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
