"""Command-line entry point: calibrate, equilibrium, recover, simulate, place, compare.

Every command reads one JSON config (paths inside it are relative to the
config file) and writes CSV/JSON files into ``--out``. Flags override config
fields. Exit codes: 0 success, 1 invalid input, 2 infeasible, 3 budget or
iteration limit reached.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from evplace import betterresponse as br
from evplace import delay, placement, queuesim, routes
from evplace.equilibrium import ConvergenceError, InfeasibleDemandError, solve_cp, write_solution
from evplace.network import NetworkError, augment_with_chargers, load_demand, load_network

log = logging.getLogger("evplace")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_LIMIT = 0, 1, 2, 3

DEFAULTS = {
    "tolerance": 1e-6,
    "max_iter": 50_000,
    "selection": [],
    "k_od": 8, "k_oc": 4, "k_cd": 4,
    "coverage_k": [1, 2, 4, 8, 16, 32],
    "alpha": 0.01,
    "n_mc_search": 20,
    "n_mc_final": 100,
    "max_iters": 200,
    "seed": 0,
    "n_s": 1,
    "jobs": 1,
    "method": "greedy",
    "backend": "game",
    "budget": None,
    "simulation": {},
    "calibration": {},
}


class ConfigError(ValueError):
    pass


class Context:
    """Resolved config plus the objects built from it."""

    def __init__(self, cfg: dict, base: Path):
        self.cfg = cfg
        self.base = base
        for key in ("network", "demand"):
            if key not in cfg:
                raise ConfigError(f"config is missing {key!r}")
        self.net = load_network(self.path(cfg["network"]))
        self.demand = load_demand(self.path(cfg["demand"]), self.net)
        self.delays = delay.read_fits_csv(self.path(cfg["fits"])) if cfg.get("fits") else None
        raw = cfg.get("charger_delay")
        self.charger_delay = delay.delay_from_dict(raw) if raw else None
        self.selection = [str(s) for s in cfg["selection"]]
        for s in self.selection:
            if s not in self.net.candidates:
                raise ConfigError(f"selection node {s!r} is not a candidate")

    def path(self, rel: str) -> Path:
        p = Path(rel)
        p = p if p.is_absolute() else self.base / p
        if not p.exists():
            raise ConfigError(f"file not found: {p}")
        return p

    def scenario(self, net=None) -> queuesim.Scenario:
        return queuesim.scenario_from_dict(net or self.net, self.cfg["simulation"])

    def solve(self, selection=None):
        sel = self.selection if selection is None else selection
        return solve_cp(self.net, self.demand, self.delays, selection=sel,
                        charger_delay=self.charger_delay, tolerance=self.cfg["tolerance"],
                        max_iter=self.cfg["max_iter"])


def load_config(path: str, args: argparse.Namespace) -> Context:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    cfg = {**DEFAULTS, **raw}
    overrides = {"seed": args.seed, "jobs": args.jobs, "n_s": args.ns, "method": args.method,
                 "backend": args.backend, "alpha": args.alpha, "tolerance": args.tolerance}
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    if args.selection is not None:
        cfg["selection"] = [s for s in args.selection.split(",") if s]
    if not cfg["tolerance"] > 0:
        raise ConfigError("tolerance must be positive")
    if cfg["alpha"] < 0:
        raise ConfigError("alpha must be non-negative")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be at least 1")
    return Context(cfg, p.parent)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_log(out: Path, command: str, ctx: Context) -> None:
    _write_json(out / "run.json", {"command": command, "seed": ctx.cfg["seed"],
                                   "config": {k: ctx.cfg[k] for k in sorted(ctx.cfg)}})


# ---------------------------------------------------------------- commands


def cmd_calibrate(ctx: Context, out: Path) -> int:
    cal = ctx.cfg["calibration"]
    sc = ctx.scenario()
    seed = ctx.cfg["seed"]
    seeds = cal.get("seeds") or [seed + j for j in range(int(cal.get("n_seeds", 5)))]
    fractions = cal.get("flow_fractions", [0.2, 0.4, 0.6, 0.8, 0.9, 0.95, 1.0, 1.05])
    link_ids = cal.get("links") or [l.id for l in ctx.net.links]
    rows, fits = [], {}
    for lid in link_ids:
        link = ctx.net.link(lid)
        levels = [f * link.flow_capacity for f in fractions]
        samples = delay.generate_link_samples(sc, lid, levels, seeds,
                                              horizon=float(cal.get("horizon", 1800.0)),
                                              warmup_fraction=float(cal.get("warmup_fraction", 0.2)))
        rows.extend((lid, s) for s in samples)
        fits[lid] = delay.fit_bpr(samples, cap=link.flow_capacity)
    delay.write_samples_csv(out / "samples.csv", rows)
    delay.write_fits_csv(out / "fits.csv", fits)
    _write_json(out / "calibration.json", {
        "seed": seed, "seeds": seeds,
        "links": {lid: {**rep.params.to_dict(), "r2": rep.r_squared, "n_samples": rep.n_samples,
                        "converged": rep.converged} for lid, rep in fits.items()}})
    print(f"calibrated {len(fits)} links")
    return EXIT_OK


def cmd_equilibrium(ctx: Context, out: Path) -> int:
    try:
        sol = ctx.solve()
    except ConvergenceError as exc:
        if exc.solution is not None:
            write_solution(out, exc.solution)
        raise
    write_solution(out, sol)
    print(f"total_delay={sol.total_delay!r} wardrop_gap={sol.wardrop_gap:.3g}")
    return EXIT_OK


def _recover(ctx: Context):
    sol = ctx.solve()
    net = sol.network
    c = ctx.cfg
    lib = routes.build_route_library(net, ctx.demand, ctx.selection, c["k_od"], c["k_oc"], c["k_cd"])
    flows = routes.recover_flows(lib, sol.x, ctx.demand, sol.partition())
    return sol, lib, flows


def cmd_recover(ctx: Context, out: Path) -> int:
    sol, lib, flows = _recover(ctx)
    write_solution(out, sol)
    routes.write_library(out / "routes.json", lib)
    routes.write_route_flows(out / "route_flows.csv", flows)
    ks = [int(k) for k in ctx.cfg["coverage_k"]]
    routes.write_coverage(out / "coverage.csv", routes.topk_coverage(flows, lib, sol.x, ks))
    print(f"{len(lib)} routes, residual={flows.residual:.3g}")
    return EXIT_OK


def cmd_simulate(ctx: Context, out: Path) -> int:
    sol, lib, flows = _recover(ctx)
    c = ctx.cfg
    sim = c["simulation"]
    n_vehicles = int(sim.get("n_vehicles", 0))
    if n_vehicles < 1:
        raise ConfigError("simulation.n_vehicles must be at least 1")
    sc = ctx.scenario(sol.network)
    counts = br.vehicle_counts(ctx.demand, n_vehicles)
    start = br.initial_assignment(lib.routes, flows.by_route(), counts,
                                  float(sim.get("departure_spread", 0.0)))
    benefits = {od.i: od.benefit for od in ctx.demand}
    assign, report = br.find_approx_ne(sc, start, c["alpha"], c["n_mc_search"], c["max_iters"],
                                       c["seed"], benefits, c["jobs"])
    seeds = [c["seed"] + j for j in range(c["n_mc_final"])]
    mc = queuesim.monte_carlo(sc, assign.trips(), seeds, routes=lib.routes, jobs=c["jobs"])
    routes.write_library(out / "routes.json", lib)
    br.write_assignment(out / "assignment.csv", assign)
    br.write_report(out / "ne_report.json", report)
    queuesim.write_vehicles_csv(out / "vehicles.csv", mc.runs[0])
    queuesim.write_links_csv(out / "heatmap.csv", mc)
    _write_json(out / "simulation.json", {
        "seed": c["seed"], "seeds": seeds, "mean_total_travel_time": mc.mean_total,
        "stderr_total_travel_time": mc.stderr_total, "flagged_runs": mc.flagged_runs,
        "route_means": mc.route_means, "route_stderr": mc.route_stderr,
        "converged": report.converged})
    print(f"mean total travel time {mc.mean_total:.6g} (se {mc.stderr_total:.3g}), "
          f"converged={report.converged}")
    return EXIT_OK if report.converged else EXIT_LIMIT


def _backend(ctx: Context, name: str):
    c = ctx.cfg
    if name == "game":
        return placement.GameBackend(ctx.net, ctx.demand, ctx.delays, ctx.charger_delay,
                                     c["tolerance"], c["max_iter"])
    if name == "queue":
        sim = c["simulation"]
        n_vehicles = int(sim.get("n_vehicles", 0))
        if n_vehicles < 1:
            raise ConfigError("simulation.n_vehicles must be at least 1")
        return placement.QueueBackend(
            ctx.scenario(), ctx.demand, n_vehicles, ctx.delays, ctx.charger_delay, c["alpha"],
            c["n_mc_search"], c["n_mc_final"], c["max_iters"], c["seed"],
            float(sim.get("departure_spread", 0.0)), c["k_od"], c["k_oc"], c["k_cd"],
            c["tolerance"], 1)
    raise ConfigError(f"unknown backend {name!r} (use game or queue)")


def cmd_place(ctx: Context, out: Path) -> int:
    c = ctx.cfg
    backend = _backend(ctx, c["backend"])
    cands = ctx.net.candidates
    method = c["method"]
    if method in ("greedy", "greedy-swap"):
        res = placement.greedy_place(backend, cands, c["n_s"], c.get("tie_break", "lowest"),
                                     c["seed"], c["jobs"])
        if method == "greedy-swap":
            res = placement.single_swap_refine(backend, res, cands, jobs=c["jobs"])
    elif method == "exhaustive":
        res = placement.exhaustive_place(backend, cands, c["n_s"], c["budget"], c["jobs"])
    else:
        raise ConfigError(f"unknown method {method!r} (use greedy, greedy-swap or exhaustive)")
    doc = res.to_dict()
    doc["backend"] = backend.name
    doc["seed"] = c["seed"]
    _write_json(out / "placement.json", doc)
    placement.write_ranking(out / "ranking.csv", res)
    print(f"{res.method}: {' '.join(res.selection)} objective={res.objective!r}")
    return EXIT_OK


def cmd_compare(ctx: Context, out: Path) -> int:
    c = ctx.cfg
    cmp = placement.compare(_backend(ctx, "game"), _backend(ctx, "queue"), ctx.net.candidates,
                            c["n_s"], c["jobs"])
    doc = cmp.to_dict()
    doc["seed"] = c["seed"]
    _write_json(out / "comparison.json", doc)
    placement.write_comparison(out / "comparison.csv", cmp)
    rho = "n/a" if cmp.rank_correlation is None else f"{cmp.rank_correlation:.3f}"
    print(f"{len(cmp.rows)} selections, rank correlation {rho}")
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "equilibrium": cmd_equilibrium,
    "recover": cmd_recover,
    "simulate": cmd_simulate,
    "place": cmd_place,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evplace", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--selection", help="comma-separated charger nodes")
        p.add_argument("--ns", type=int, help="number of chargers to place")
        p.add_argument("--method", choices=["greedy", "greedy-swap", "exhaustive"])
        p.add_argument("--backend", choices=["game", "queue"])
        p.add_argument("--alpha", type=float)
        p.add_argument("--tolerance", type=float)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        ctx = load_config(args.config, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _run_log(out, args.command, ctx)
        return COMMANDS[args.command](ctx, out)
    except (InfeasibleDemandError, placement.PlacementError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConvergenceError, placement.BudgetExceeded) as exc:
        print(f"limit reached: {exc}", file=sys.stderr)
        return EXIT_LIMIT
    except (ConfigError, NetworkError, br.AssignmentError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
