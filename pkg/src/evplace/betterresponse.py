"""Approximate Nash equilibria of the atomic queue model by better response.

Each step moves one vehicle from the slowest used route of its (OD, type)
class to the fastest route of that class, with route times estimated by
Monte Carlo simulation. The process stops once every class satisfies the
1% criterion: used routes differ by at most ``alpha`` times the fastest
route time. There is no convergence guarantee; the report says so honestly.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from evplace.network import F1, F2, F3, DemandTable
from evplace.queuesim import MonteCarloResult, Scenario, Trip, monte_carlo
from evplace.routes import Route


class AssignmentError(ValueError):
    pass


def _natural(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]


@dataclass
class Assignment:
    """Vehicle -> route mapping over a fixed candidate route set S."""

    routes: dict[str, Route]
    vehicles: dict[str, str]
    departures: dict[str, float] = field(default_factory=dict)
    classes: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        for rid, r in self.routes.items():
            if r.vtype == F2 and r.charger is None:
                raise AssignmentError(f"route {rid}: must-charge route without a charger")
            if r.vtype == F1 and r.charger is not None:
                raise AssignmentError(f"route {rid}: never-charge route with a charger")
        for vid, rid in self.vehicles.items():
            if rid not in self.routes:
                raise AssignmentError(f"vehicle {vid} assigned to unknown route {rid}")
            cls = self.routes[rid].od, self.routes[rid].vtype
            if self.classes.setdefault(vid, cls) != cls:
                raise AssignmentError(f"vehicle {vid} moved outside its (OD, type) class")

    def counts(self) -> dict[str, int]:
        out = dict.fromkeys(self.routes, 0)
        for rid in self.vehicles.values():
            out[rid] += 1
        return out

    def used(self) -> list[str]:
        return [rid for rid, n in self.counts().items() if n > 0]

    def class_routes(self) -> dict[tuple[int, int], list[str]]:
        out: dict[tuple[int, int], list[str]] = {}
        for rid in sorted(self.routes, key=_natural):
            r = self.routes[rid]
            out.setdefault((r.od, r.vtype), []).append(rid)
        return out

    def key(self) -> tuple:
        return tuple(sorted(self.vehicles.items()))

    def moved(self, vid: str, rid: str) -> Assignment:
        vehicles = dict(self.vehicles)
        vehicles[vid] = rid
        return Assignment(self.routes, vehicles, self.departures, dict(self.classes))

    def trips(self) -> list[Trip]:
        return [Trip(vid, self.routes[rid], self.departures.get(vid, 0.0))
                for vid, rid in self.vehicles.items()]


@dataclass
class NeReport:
    iterations: int
    converged: bool
    alpha: float
    max_discrepancy: float
    route_times: dict[str, float]
    n_mc: int = 0
    message: str = ""

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "converged": self.converged, "alpha": self.alpha,
                "max_discrepancy": self.max_discrepancy, "route_times": self.route_times,
                "n_mc": self.n_mc, "message": self.message}


# ---------------------------------------------------------------- rounding


def largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    """Integers proportional to ``weights`` summing exactly to ``total``.

    Remainder ties go to the earliest entry.
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    w = np.maximum(np.asarray(weights, dtype=float), 0.0)
    if total == 0 or w.size == 0:
        return [0] * w.size
    s = w.sum()
    if s <= 0:
        w = np.zeros_like(w)
        w[0] = 1.0
        s = 1.0
    exact = w / s * total
    base = np.floor(exact + 1e-12).astype(int)
    short = total - int(base.sum())
    order = sorted(range(w.size), key=lambda k: (-(exact[k] - base[k]), k))
    for k in order[:max(short, 0)]:
        base[k] += 1
    return [int(v) for v in base]


def vehicle_counts(demand: DemandTable, n_vehicles: int) -> dict[tuple[int, int], int]:
    """Split ``n_vehicles`` across (OD, type) classes in proportion to demand."""
    keys, w = [], []
    for od in demand:
        for t in (F1, F2, F3):
            keys.append((od.i, t))
            w.append(od.demand(t))
    return {k: n for k, n in zip(keys, largest_remainder(w, n_vehicles)) if n > 0}


def initial_assignment(routes: Sequence[Route], flows: Mapping[str, float],
                       counts: Mapping[tuple[int, int], int],
                       departure_spread: float = 0.0) -> Assignment:
    """Round continuous route flows to vehicles, class by class.

    Vehicle ``k`` of ``N`` departs at ``k * departure_spread / N``.
    """
    by_class: dict[tuple[int, int], list[Route]] = {}
    for r in routes:
        by_class.setdefault((r.od, r.vtype), []).append(r)
    vehicles: dict[str, str] = {}
    for cls in sorted(counts):
        members = by_class.get(cls)
        if not members:
            raise AssignmentError(f"no candidate route for OD {cls[0]} type F{cls[1]}")
        ns = largest_remainder([flows.get(r.route_id, 0.0) for r in members], counts[cls])
        for r, n in zip(members, ns):
            for _ in range(n):
                vehicles[f"v{len(vehicles)}"] = r.route_id
    total = len(vehicles)
    deps = {vid: k * departure_spread / total for k, vid in enumerate(vehicles)} if total else {}
    return Assignment({r.route_id: r for r in routes}, vehicles, deps)


# ----------------------------------------------------------------- delays


def effective_times(routes: Mapping[str, Route], times: Mapping[str, float],
                    benefits: Mapping[int, float] | None = None) -> dict[str, float]:
    """Route times minus the charging benefit for may-charge routes."""
    out = {}
    for rid, r in routes.items():
        d = times[rid]
        if benefits and r.vtype == F3 and r.charger is not None:
            d -= benefits.get(r.od, 0.0)
        out[rid] = d
    return out


def route_delays(scenario: Scenario, assignment: Assignment, n_mc: int = 20,
                 seed: int = 0, jobs: int = 1) -> tuple[dict[str, float], MonteCarloResult]:
    """Monte Carlo mean time of every route; unused routes get free-flow time.

    Seeds ``seed .. seed + n_mc - 1`` are used for every call, so different
    assignments are compared under common random numbers.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    mc = monte_carlo(scenario, assignment.trips(), [seed + j for j in range(n_mc)],
                     routes=assignment.routes.values(), jobs=jobs)
    return {rid: mc.route_means[rid] for rid in assignment.routes}, mc


def is_approx_ne(delays: Mapping[str, float], used: Iterable[str], alpha: float = 0.01,
                 routes: Iterable[str] | None = None, require_minimal: bool = True) -> bool:
    """Approximate-equilibrium check for one route class.

    True iff the spread of used-route times is at most ``alpha`` times the
    smallest time over ``routes`` (default: every key of ``delays``). With
    ``require_minimal`` the slowest used route must also be within that bound
    of the fastest route, so an assignment that ignores a much faster unused
    route is rejected.
    """
    used = list(used)
    if not used:
        return True
    pool = list(routes) if routes is not None else list(delays)
    floor = min(delays[r] for r in pool)
    tol = alpha * abs(floor)
    u = [delays[r] for r in used]
    if max(u) - min(u) > tol:
        return False
    return not require_minimal or max(u) - floor <= tol


def discrepancy(assignment: Assignment, delays: Mapping[str, float], alpha: float,
                require_minimal: bool = True) -> tuple[bool, float]:
    """Per-class check; returns (all classes pass, worst relative discrepancy)."""
    counts = assignment.counts()
    ok, worst = True, 0.0
    for cls, rids in assignment.class_routes().items():
        used = [r for r in rids if counts[r] > 0]
        if not used:
            continue
        floor = min(delays[r] for r in rids)
        u = [delays[r] for r in used]
        spread = max(u) - (floor if require_minimal else min(u))
        worst = max(worst, spread / abs(floor) if floor else math.inf if spread > 0 else 0.0)
        ok &= is_approx_ne(delays, used, alpha, rids, require_minimal)
    return ok, worst


def _moves(assignment: Assignment, delays: Mapping[str, float]):
    """Improving single-vehicle moves, best first."""
    counts = assignment.counts()
    rank = {rid: k for k, rid in enumerate(sorted(assignment.routes, key=_natural))}
    moves = []
    for cls, rids in assignment.class_routes().items():
        for src in rids:
            if counts[src] == 0:
                continue
            for dst in rids:
                gain = delays[src] - delays[dst]
                if gain > 0:
                    moves.append((-gain, rank[src], rank[dst], src, dst))
    moves.sort()
    return [(src, dst, -g) for g, _, _, src, dst in moves]


def _pick_vehicle(assignment: Assignment, rid: str) -> str:
    # the latest-listed vehicle on the route moves
    return [v for v, r in assignment.vehicles.items() if r == rid][-1]


def better_response_step(assignment: Assignment, delays: Mapping[str, float],
                         visited: set | None = None) -> Assignment:
    """Move one vehicle from the slowest used route to the fastest route.

    Only moves within an (OD, type) class are considered, so feasibility is
    kept. If the best move leads back to an assignment in ``visited``, the
    next-best improving move is used instead (the best one when all revisit).
    Returns ``assignment`` itself at a fixed point.
    """
    moves = _moves(assignment, delays)
    if not moves:
        return assignment
    fallback = None
    for src, dst, _ in moves:
        nxt = assignment.moved(_pick_vehicle(assignment, src), dst)
        if fallback is None:
            fallback = nxt
        if visited is None or nxt.key() not in visited:
            return nxt
    return fallback


def find_approx_ne(scenario: Scenario, initial: Assignment, alpha: float = 0.01,
                   n_mc: int = 20, max_iters: int = 200, seed: int = 0,
                   benefits: Mapping[int, float] | None = None, jobs: int = 1,
                   require_minimal: bool = True,
                   visited_cap: int = 10_000) -> tuple[Assignment, NeReport]:
    """Better-response search; returns the best assignment seen and a report."""
    if not initial.vehicles:
        raise AssignmentError("assignment has no vehicles")
    if not 0 <= alpha:
        raise ValueError("alpha must be non-negative")
    current = initial
    visited = {current.key()}
    best = None
    for it in range(max_iters + 1):
        raw, _ = route_delays(scenario, current, n_mc, seed, jobs)
        eff = effective_times(current.routes, raw, benefits)
        ok, worst = discrepancy(current, eff, alpha, require_minimal)
        if best is None or worst < best[0]:
            best = (worst, current, raw)
        if ok:
            return current, NeReport(it, True, alpha, worst, raw, n_mc)
        if it == max_iters:
            break
        nxt = better_response_step(current, eff, visited)
        if nxt is current:
            break
        current = nxt
        if len(visited) < visited_cap:
            visited.add(current.key())
    worst, assign, raw = best
    return assign, NeReport(it, False, alpha, worst, raw, n_mc,
                            "no approximate equilibrium found; best assignment returned")


# ----------------------------------------------------------------- export


def write_report(path: str | Path, report: NeReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_assignment(path: str | Path, assignment: Assignment) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "route_id", "departure_s"])
        for vid, rid in assignment.vehicles.items():
            w.writerow([vid, rid, repr(assignment.departures.get(vid, 0.0))])


def read_assignment(path: str | Path, routes: Sequence[Route]) -> Assignment:
    vehicles, deps = {}, {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vehicles[row["vehicle_id"]] = row["route_id"]
            deps[row["vehicle_id"]] = float(row.get("departure_s") or 0.0)
    return Assignment({r.route_id: r for r in routes}, vehicles, deps)
