"""Charger placement: greedy (with single-swap refinement) and exhaustive search.

Both searches work against a backend that maps a charger selection to the
total delay of the resulting equilibrium. ``GameBackend`` uses the convex
congestion game; ``QueueBackend`` runs the full pipeline (equilibrium,
route recovery, better response, Monte Carlo simulation).
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from evplace import betterresponse as br
from evplace.equilibrium import ConvergenceError, InfeasibleDemandError, solve_cp
from evplace.network import DemandTable, Network, NetworkError, augment_with_chargers
from evplace.queuesim import Scenario, monte_carlo
from evplace.routes import build_route_library, recover_flows

TIE_TOL = 1e-9


class PlacementError(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    pass


def node_key(node: str):
    """Natural sort key, so ``n2 < n10``."""
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", node)]


def _canon(selection) -> tuple[str, ...]:
    return tuple(sorted(set(selection), key=node_key))


@dataclass(frozen=True)
class Evaluation:
    selection: tuple[str, ...]
    value: float
    stderr: float = 0.0

    def to_dict(self) -> dict:
        v = self.value if math.isfinite(self.value) else None
        return {"selection": list(self.selection), "value": v, "stderr": self.stderr}


@dataclass
class PlacementResult:
    method: str
    selection: tuple[str, ...]
    objective: float
    evaluations: list[Evaluation] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"method": self.method, "selection": list(self.selection),
                "objective": self.objective if math.isfinite(self.objective) else None,
                "evaluations": [e.to_dict() for e in self.evaluations]}


class GameBackend:
    """Total delay of the congestion-game equilibrium."""

    name = "game"
    default_budget = 10_000

    def __init__(self, net: Network, demand: DemandTable, delays=None, charger_delay=None,
                 tolerance: float = 1e-6, max_iter: int = 50_000):
        self.net, self.demand, self.delays = net, demand, delays
        self.charger_delay = charger_delay
        self.tolerance, self.max_iter = tolerance, max_iter
        self.cache: dict[tuple[str, ...], Evaluation] = {}

    def _compute(self, sel: tuple[str, ...]) -> Evaluation:
        try:
            sol = solve_cp(self.net, self.demand, self.delays, selection=sel,
                           charger_delay=self.charger_delay, tolerance=self.tolerance,
                           max_iter=self.max_iter)
        except InfeasibleDemandError:
            return Evaluation(sel, math.inf)
        return Evaluation(sel, sol.total_delay)

    def evaluate(self, selection) -> Evaluation:
        sel = _canon(selection)
        if sel not in self.cache:
            self.cache[sel] = self._compute(sel)
        return self.cache[sel]


class QueueBackend:
    """Monte Carlo total travel time at an approximate equilibrium.

    The initial assignment is the rounded route-flow decomposition of the
    congestion-game equilibrium for the same selection. All selections use
    the same seeds (common random numbers).
    """

    name = "queue"
    default_budget = 200

    def __init__(self, scenario: Scenario, demand: DemandTable, n_vehicles: int, delays=None,
                 charger_delay=None, alpha: float = 0.01, n_mc_search: int = 20,
                 n_mc_final: int = 100, max_iters: int = 200, seed: int = 0,
                 departure_spread: float = 0.0, k_od: int = 8, k_oc: int = 4, k_cd: int = 4,
                 tolerance: float = 1e-6, jobs: int = 1):
        self.scenario, self.demand, self.n_vehicles = scenario, demand, n_vehicles
        self.delays, self.charger_delay = delays, charger_delay
        self.alpha, self.n_mc_search, self.n_mc_final = alpha, n_mc_search, n_mc_final
        self.max_iters, self.seed, self.departure_spread = max_iters, seed, departure_spread
        self.k = (k_od, k_oc, k_cd)
        self.tolerance, self.jobs = tolerance, jobs
        self.cache: dict[tuple[str, ...], Evaluation] = {}
        self.reports: dict[tuple[str, ...], br.NeReport] = {}

    def _compute(self, sel: tuple[str, ...]) -> Evaluation:
        base = self.scenario.network
        try:
            sol = solve_cp(base, self.demand, self.delays, selection=sel,
                           charger_delay=self.charger_delay, tolerance=self.tolerance)
        except InfeasibleDemandError:
            return Evaluation(sel, math.inf)
        net = augment_with_chargers(base, sel, self.charger_delay)
        lib = build_route_library(net, self.demand, sel, *self.k)
        try:
            flows = recover_flows(lib, sol.x, self.demand, sol.partition())
        except NetworkError:
            return Evaluation(sel, math.inf)
        counts = br.vehicle_counts(self.demand, self.n_vehicles)
        start = br.initial_assignment(lib.routes, flows.by_route(), counts, self.departure_spread)
        scenario = replace(self.scenario, network=net)
        benefits = {od.i: od.benefit for od in self.demand}
        assign, report = br.find_approx_ne(scenario, start, self.alpha, self.n_mc_search,
                                           self.max_iters, self.seed, benefits, self.jobs)
        self.reports[sel] = report
        mc = monte_carlo(scenario, assign.trips(),
                         [self.seed + j for j in range(self.n_mc_final)], jobs=self.jobs)
        return Evaluation(sel, mc.mean_total, mc.stderr_total)

    def evaluate(self, selection) -> Evaluation:
        sel = _canon(selection)
        if sel not in self.cache:
            self.cache[sel] = self._compute(sel)
        return self.cache[sel]


def _evaluate_many(backend, selections: Sequence[tuple[str, ...]], jobs: int) -> list[Evaluation]:
    todo = [s for s in dict.fromkeys(_canon(s) for s in selections) if s not in backend.cache]
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for ev in pool.map(backend._compute, todo):
                backend.cache[ev.selection] = ev
    return [backend.evaluate(s) for s in selections]


def _check_candidates(candidates, n_s) -> list[str]:
    cands = sorted(dict.fromkeys(candidates), key=node_key)
    if n_s < 0 or n_s > len(cands):
        raise PlacementError(f"n_s={n_s} must lie between 0 and the {len(cands)} candidates")
    return cands


def greedy_place(backend, candidates: Sequence[str], n_s: int, tie_break: str = "lowest",
                 seed: int | None = None, jobs: int = 1) -> PlacementResult:
    """Add, one at a time, the candidate giving the smallest total delay.

    Ties (within a relative 1e-9) go to the lowest node id, or to a seeded
    random choice with ``tie_break="random"``. Infeasible selections score
    infinity.
    """
    cands = _check_candidates(candidates, n_s)
    rng = np.random.default_rng(seed) if tie_break == "random" else None
    chosen: list[str] = []
    log: list[Evaluation] = []
    current = backend.evaluate(()) if n_s == 0 else None
    if current is not None:
        log.append(current)
    while len(chosen) < n_s:
        rest = [c for c in cands if c not in chosen]
        evs = _evaluate_many(backend, [tuple(chosen) + (c,) for c in rest], jobs)
        log.extend(evs)
        vals = np.array([e.value for e in evs])
        best = vals.min()
        if not math.isfinite(best):
            if len(chosen) + 1 == n_s:
                raise PlacementError(f"no feasible selection of size {n_s}")
            pick = 0  # nothing distinguishes the options yet
        else:
            ties = [k for k, v in enumerate(vals) if v - best <= TIE_TOL * max(1.0, abs(best))]
            pick = ties[0] if rng is None else ties[int(rng.integers(len(ties)))]
        chosen.append(rest[pick])
        current = evs[pick]
    if not math.isfinite(current.value):
        raise PlacementError(f"no feasible selection of size {n_s}")
    return PlacementResult("greedy", _canon(chosen), current.value, log)


def single_swap_refine(backend, result: PlacementResult, candidates: Sequence[str],
                       max_passes: int = 50, jobs: int = 1) -> PlacementResult:
    """Best-improvement single swaps until none improves or the cap is hit."""
    cands = sorted(dict.fromkeys(candidates), key=node_key)
    sel = list(result.selection)
    value = result.objective
    log = list(result.evaluations)
    for _ in range(max_passes):
        outside = [c for c in cands if c not in sel]
        swaps = [(a, b) for a in sel for b in outside]
        evs = _evaluate_many(backend, [[s for s in sel if s != a] + [b] for a, b in swaps], jobs)
        log.extend(evs)
        best = None
        for (a, b), ev in zip(swaps, evs):
            if ev.value < value - TIE_TOL * max(1.0, abs(value)) and (best is None or ev.value < best[1].value):
                best = ((a, b), ev)
        if best is None:
            break
        sel = list(best[1].selection)
        value = best[1].value
    return PlacementResult("greedy+swap", _canon(sel), value, log)


def exhaustive_place(backend, candidates: Sequence[str], n_s: int,
                     budget: int | None = None, jobs: int = 1) -> PlacementResult:
    """Evaluate every size-``n_s`` subset; evaluations come back ranked."""
    cands = _check_candidates(candidates, n_s)
    budget = backend.default_budget if budget is None else budget
    count = math.comb(len(cands), n_s)
    if count > budget:
        raise BudgetExceeded(f"exhaustive search needs {count} evaluations, budget is {budget}")
    evs = _evaluate_many(backend, list(itertools.combinations(cands, n_s)), jobs)
    ranked = sorted(evs, key=lambda e: (e.value, [node_key(s) for s in e.selection]))
    best = ranked[0]
    if not math.isfinite(best.value):
        raise PlacementError(f"no feasible selection of size {n_s}")
    return PlacementResult("exhaustive", best.selection, best.value, ranked)


# --------------------------------------------------------------- comparison


@dataclass
class ComparisonRow:
    selection: tuple[str, ...]
    game: float
    game_normalized: float
    queue_mean: float
    queue_stderr: float
    queue_normalized: float


@dataclass
class Comparison:
    rows: list[ComparisonRow]
    rank_correlation: float | None  # Spearman; None when undefined

    def to_dict(self) -> dict:
        return {"rank_correlation": self.rank_correlation,
                "rows": [{"selection": list(r.selection), "game": r.game,
                          "game_normalized": r.game_normalized, "queue_mean": r.queue_mean,
                          "queue_stderr": r.queue_stderr, "queue_normalized": r.queue_normalized}
                         for r in self.rows]}


def _normalize(values: np.ndarray) -> np.ndarray:
    finite = values[np.isfinite(values)]
    if finite.size == 0 or finite.min() == 0:
        return values.copy()
    return values / finite.min()


def compare(game, queue, candidates: Sequence[str], n_s: int, jobs: int = 1) -> Comparison:
    """Both backends over every size-``n_s`` selection, normalised by the best."""
    cands = _check_candidates(candidates, n_s)
    sels = list(itertools.combinations(cands, n_s))
    g = _evaluate_many(game, sels, jobs)
    q = _evaluate_many(queue, sels, jobs)
    gv = np.array([e.value for e in g])
    qv = np.array([e.value for e in q])
    gn, qn = _normalize(gv), _normalize(qv)
    rows = [ComparisonRow(_canon(s), float(a), float(an), float(b), e.stderr, float(bn))
            for s, a, an, b, bn, e in zip(sels, gv, gn, qv, qn, q)]
    rho = None
    ok = np.isfinite(gv) & np.isfinite(qv)
    # undefined when either side is constant
    if ok.sum() >= 2 and np.ptp(gv[ok]) > 0 and np.ptp(qv[ok]) > 0:
        r = spearmanr(gv[ok], qv[ok]).statistic
        rho = None if np.isnan(r) else float(r)
    return Comparison(rows, rho)


# ------------------------------------------------------------------- export


def write_result(path: str | Path, result: PlacementResult) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2) + "\n")


def write_ranking(path: str | Path, result: PlacementResult) -> None:
    ranked = sorted({e.selection: e for e in result.evaluations}.values(),
                    key=lambda e: (e.value, [node_key(s) for s in e.selection]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "selection", "value", "stderr"])
        for k, e in enumerate(ranked, 1):
            w.writerow([k, " ".join(e.selection), repr(e.value), repr(e.stderr)])


def write_comparison(path: str | Path, cmp: Comparison) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["selection", "game", "game_normalized", "queue_mean", "queue_stderr",
                    "queue_normalized"])
        for r in cmp.rows:
            w.writerow([" ".join(r.selection), repr(r.game), repr(r.game_normalized),
                        repr(r.queue_mean), repr(r.queue_stderr), repr(r.queue_normalized)])
