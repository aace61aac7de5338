"""Atomic mesoscopic traffic simulator with charging stations.

Links are spatial queues: a vehicle spends the free-flow time running, then
waits in the link's exit queue. A link accepts vehicles while its storage
(jam spacing 7 m per lane) has room. Per-step inflow/outflow capacity is
random with the link's flow capacity as its long-run mean. Intersections are
non-signalized: approaches are served in random order (roundabout links
first) and movements crossing the first (primary) movement of the step are
held back. Charging stations are entrance queue -> ports -> bounded exit
queue.

Time advances in fixed steps. Each step runs, in order: running -> exit-queue
promotions, the node model (which also releases station exit queues and
loads departing vehicles), and the station model.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from evplace.network import F2, Link, Network, Node
from evplace.routes import Route

PRE_ENTRY, RUNNING, EXIT_QUEUE, ST_ENTRANCE, AT_PORT, ST_EXIT, ARRIVED = range(7)
STATE_NAMES = ("pre_entry", "running", "exit_queue", "station_entrance", "at_port",
               "station_exit", "arrived")

_LINK_STREAM, _NODE_STREAM, _ARRIVAL_STREAM = 0, 1, 2


@dataclass(frozen=True)
class StationSpec:
    node: str
    ports: int = 4
    rate: float = 0.01  # charge fraction per step
    exit_capacity: int = 2

    def __post_init__(self):
        if self.ports < 1 or self.exit_capacity < 1 or not self.rate > 0:
            raise ValueError(f"invalid station spec {self}")


@dataclass(frozen=True)
class Scenario:
    network: Network
    stations: Mapping[str, StationSpec] = field(default_factory=dict)
    horizon: float = 7200.0
    timestep: float = 1.0
    initial_charge: float = 0.2
    target_charge: float = 1.0
    default_station: StationSpec = StationSpec("*")
    gridlock_window: float = 600.0
    conflict_threshold_deg: float = 45.0

    def station(self, node: str) -> StationSpec:
        spec = self.stations.get(node)
        return spec if spec is not None else replace(self.default_station, node=node)

    def link_steps(self, link: Link) -> int:
        return max(1, math.ceil(link.free_flow_time / self.timestep - 1e-9))

    def charge_steps(self, node: str, initial: float | None = None) -> int:
        initial = self.initial_charge if initial is None else initial
        need = self.target_charge - initial
        if need <= 0:
            return 0
        return math.ceil(need / self.station(node).rate - 1e-9)

    def route_free_flow_time(self, route: Route) -> float:
        """Uncontended travel time of a route, including charging."""
        net = self.network
        steps = sum(self.link_steps(net.link(lid)) for lid in route.links)
        if route.charger is not None:
            steps += self.charge_steps(route.charger)
        return steps * self.timestep


@dataclass(frozen=True)
class Trip:
    vehicle_id: str
    route: Route
    departure: float = 0.0
    initial_charge: float | None = None


@dataclass
class SimResult:
    seed: int
    travel_times: dict[str, float]
    departures: dict[str, float]
    arrivals: dict[str, float]
    route_of: dict[str, str]
    link_mean_times: dict[str, float]
    link_counts: dict[str, int]
    route_mean_times: dict[str, float]
    total_travel_time: float
    unfinished: list[str]
    gridlock: bool
    end_time: float

    @property
    def flagged(self) -> bool:
        return bool(self.unfinished)


class _Station:
    __slots__ = ("spec", "entrance", "ports", "exitq", "seq")

    def __init__(self, spec: StationSpec):
        self.spec = spec
        self.entrance: deque[int] = deque()
        self.ports: list[int | None] = [None] * spec.ports
        self.exitq: deque[int] = deque()
        self.seq = 0


def _bearing(a: Node, b: Node) -> float | None:
    if a.x is None or b.x is None or a.y is None or b.y is None:
        return None
    return math.degrees(math.atan2(b.y - a.y, b.x - a.x))


class Simulation:
    """One seeded run; ``step`` advances a single timestep."""

    def __init__(self, scenario: Scenario, trips: Sequence[Trip], seed: int, trace: bool = False):
        self.scenario = scenario
        self.seed = int(seed)
        net = scenario.network
        self.net = net
        dt = scenario.timestep
        self.dt = dt
        L = net.n_links
        self.fft_steps = [scenario.link_steps(l) for l in net.links]
        self.rate = [l.flow_capacity * dt / 3600.0 for l in net.links]
        # credit cap: one step of capacity plus one vehicle, so a saturated link
        # never loses credit and an idle one cannot bank a long burst
        self.cmax = [r + 1.0 for r in self.rate]
        self.storage = [l.storage_capacity for l in net.links]
        self.roundabout = [l.roundabout for l in net.links]
        self.heading = [_bearing(net.nodes[net.tails[k]], net.nodes[net.heads[k]]) for k in range(L)]
        self.heads = [int(h) for h in net.heads]
        thr = scenario.conflict_threshold_deg
        self._conflict_band = (thr, 180.0 - thr)

        # capacity credit per link, [inflow, outflow]
        self.credit = [[c for c in self.cmax], [c for c in self.cmax]]
        self.credit_t = [[0] * L, [0] * L]
        self.budget_t = [[-1] * L, [-1] * L]
        self.budget = [[0] * L, [0] * L]
        self._link_rng: dict[int, np.random.Generator] = {}
        self._node_rng: dict[int, np.random.Generator] = {}

        self.running: list[deque] = [deque() for _ in range(L)]
        self.exitq: list[deque] = [deque() for _ in range(L)]
        self.occupancy = [0] * L
        self.link_time_sum = [0.0] * L
        self.link_count = [0] * L

        self.stations: dict[int, _Station] = {}
        n = len(trips)
        self.ids = [str(t.vehicle_id) for t in trips]
        if len(set(self.ids)) != n:
            raise ValueError("duplicate vehicle ids")
        self.route_ids = [t.route.route_id for t in trips]
        self.links_of: list[list[int]] = []
        self.charge_at: list[int | None] = []
        self.charge_node: list[int | None] = []
        self.charge_need: list[int] = []
        self.charge_done = [0] * n
        self.charged = [False] * n
        self.pos = [-1] * n
        self.state = [PRE_ENTRY] * n
        self.entry_step = [0] * n
        self.depart_step: list[int] = []
        self.arrive_step: list[int | None] = [None] * n
        self.port_seq = [0] * n
        # origin queues: node -> {first target -> deque}
        self.origin_q: dict[int, dict[tuple, deque]] = {}
        order = sorted(range(n), key=lambda v: (trips[v].departure, v))
        for v, trip in enumerate(trips):
            route = trip.route
            if not route.links:
                raise ValueError(f"vehicle {trip.vehicle_id} has no route")
            idx = [net.link_index[lid] for lid in route.links]
            for a, b in zip(idx, idx[1:]):
                if net.heads[a] != net.tails[b]:
                    raise ValueError(f"route {route.route_id} is not connected")
            self.links_of.append(idx)
            self.depart_step.append(max(0, math.ceil(trip.departure / dt - 1e-9)))
            if route.charger is not None:
                node = net.node_index[route.charger]
                at = route.charge_at if route.charge_at is not None else 0
                where = net.tails[idx[0]] if at == 0 else net.heads[idx[at - 1]]
                if where != node:
                    raise ValueError(f"route {route.route_id}: charger not on the route")
                self.charge_at.append(at)
                self.charge_node.append(node)
                self.charge_need.append(scenario.charge_steps(route.charger, trip.initial_charge))
                if node not in self.stations:
                    self.stations[node] = _Station(scenario.station(route.charger))
            else:
                if route.vtype == F2:
                    raise ValueError(f"must-charge vehicle {trip.vehicle_id} has a route without a charger")
                self.charge_at.append(None)
                self.charge_node.append(None)
                self.charge_need.append(0)
        for v in order:
            o = int(net.tails[self.links_of[v][0]])
            key = self._next_key(v)
            self.origin_q.setdefault(o, {}).setdefault(key, deque()).append(v)
        self.t = 0
        self.idle_steps = 0
        self.gridlock = False
        self.n_arrived = 0
        self.trace = trace
        self.events: list[tuple] = []

    # ------------------------------------------------------------ helpers

    def _rng(self, kind: int, k: int) -> np.random.Generator:
        table = self._link_rng if kind == _LINK_STREAM else self._node_rng
        g = table.get(k)
        if g is None:
            g = table[k] = np.random.default_rng([self.seed, kind, k])
        return g

    def _budget(self, side: int, l: int) -> int:
        t = self.t
        if self.budget_t[side][l] == t:
            return self.budget[side][l]
        c = min(self.cmax[l], self.credit[side][l] + self.rate[l] * (t - self.credit_t[side][l]))
        self.credit[side][l] = c
        self.credit_t[side][l] = t
        if c <= 0:
            b = 0
        else:
            whole = math.floor(c)
            frac = c - whole
            b = whole + (1 if frac > 0 and self._rng(_LINK_STREAM, 2 * l + side).random() < frac else 0)
        self.budget_t[side][l] = t
        self.budget[side][l] = b
        return b

    def _consume(self, side: int, l: int):
        self.budget[side][l] -= 1
        self.credit[side][l] -= 1.0

    def _next_key(self, v: int) -> tuple:
        """What vehicle ``v`` does after its current link: ('S',), ('D',) or ('L', link)."""
        nxt = self.pos[v] + 1
        at = self.charge_at[v]
        if at is not None and not self.charged[v] and nxt == at:
            return ("S",)
        if nxt == len(self.links_of[v]):
            return ("D",)
        return ("L", self.links_of[v][nxt])

    def _log(self, *event):
        if self.trace:
            self.events.append((self.t,) + event)

    # --------------------------------------------------------------- step

    def step(self) -> int:
        """Advance one timestep; returns the number of state changes."""
        t = self.t
        changes = 0
        # (1) free-flow time elapsed -> exit queue
        for l in range(self.net.n_links):
            run = self.running[l]
            while run and run[0][0] <= t:
                _, v = run.popleft()
                self.exitq[l].append(v)
                self.state[v] = EXIT_QUEUE
                self._log("exitq_in", l, v)
                changes += 1
        # (2)+(3) node model; capacities are sampled lazily per link and step
        changes += self._node_model()
        # (4) stations
        changes += self._station_model()
        self.idle_steps = 0 if changes else self.idle_steps + 1
        self.t += 1
        return changes

    def _approaches(self, n: int) -> list[tuple]:
        aps = []
        for l in self.net.in_links[n]:
            if self.exitq[l]:
                aps.append(("L", l))
        st = self.stations.get(n)
        if st is not None and st.exitq:
            aps.append(("S", n))
        for key, q in self.origin_q.get(n, {}).items():
            if q and self.depart_step[q[0]] <= self.t:
                aps.append(("O", key))
        return aps

    def _node_model(self) -> int:
        nodes = set()
        for l in range(self.net.n_links):
            if self.exitq[l]:
                nodes.add(self.heads[l])
        for n, st in self.stations.items():
            if st.exitq:
                nodes.add(n)
        for n, qs in self.origin_q.items():
            if any(q and self.depart_step[q[0]] <= self.t for q in qs.values()):
                nodes.add(n)
        moved = 0
        for n in sorted(nodes):
            aps = self._approaches(n)
            first = [a for a in aps if a[0] == "L" and self.roundabout[a[1]]]
            rest = [a for a in aps if not (a[0] == "L" and self.roundabout[a[1]])]
            if len(rest) > 1:
                perm = self._rng(_NODE_STREAM, n).permutation(len(rest))
                rest = [rest[k] for k in perm]
            order = first + rest
            primary: list = []  # heading of the first movement, if any
            blocked = set()
            progress = True
            while progress:
                progress = False
                for ap in order:
                    if ap in blocked:
                        continue
                    if self._try_move(ap, n, primary):
                        moved += 1
                        progress = True
                    else:
                        blocked.add(ap)
        return moved

    def _conflicts(self, heading, primary) -> bool:
        if not primary or primary[0] is None or heading is None:
            return False
        diff = abs(heading - primary[0]) % 360.0
        diff = min(diff, 360.0 - diff)
        lo, hi = self._conflict_band
        return lo < diff < hi

    def _try_move(self, ap: tuple, n: int, primary: list) -> bool:
        kind = ap[0]
        if kind == "L":
            l_in = ap[1]
            queue = self.exitq[l_in]
            if not queue:
                return False
            v = queue[0]
            if self._budget(1, l_in) < 1:
                return False
            heading = self.heading[l_in]
            if not self.roundabout[l_in] and self._conflicts(heading, primary):
                return False
        elif kind == "S":
            l_in = None
            queue = self.stations[n].exitq
            if not queue:
                return False
            v = queue[0]
            heading = None
        else:
            l_in = None
            queue = self.origin_q[n][ap[1]]
            if not queue or self.depart_step[queue[0]] > self.t:
                return False
            v = queue[0]
            heading = None

        nxt = self._next_key(v)
        if nxt[0] == "L":
            l_out = nxt[1]
            if self.occupancy[l_out] >= self.storage[l_out] or self._budget(0, l_out) < 1:
                return False

        # commit
        queue.popleft()
        if not primary:
            primary.append(heading)
        if l_in is not None:
            self._consume(1, l_in)
            self.occupancy[l_in] -= 1
            self.link_time_sum[l_in] += (self.t - self.entry_step[v]) * self.dt
            self.link_count[l_in] += 1
            self._log("exitq_out", l_in, v)
        elif kind == "S":
            self._log("st_out", n, v)
        if nxt[0] == "L":
            self._consume(0, l_out)
            self.occupancy[l_out] += 1
            self.pos[v] += 1
            self.entry_step[v] = self.t
            self.running[l_out].append((self.t + self.fft_steps[l_out], v))
            self.state[v] = RUNNING
            self._log("enter", l_out, v)
        elif nxt[0] == "S":
            self.stations[n].entrance.append(v)
            self.state[v] = ST_ENTRANCE
            self._log("st_in", n, v)
        else:
            self.state[v] = ARRIVED
            self.arrive_step[v] = self.t
            self.n_arrived += 1
            self._log("arrive", n, v)
        return True

    def _station_model(self) -> int:
        changes = 0
        for n in sorted(self.stations):
            st = self.stations[n]
            for p in range(len(st.ports)):
                if st.ports[p] is None and st.entrance:
                    v = st.entrance.popleft()
                    st.ports[p] = v
                    st.seq += 1
                    self.port_seq[v] = st.seq
                    self.state[v] = AT_PORT
                    self._log("port", n, v)
                    changes += 1
            done = []
            for p, v in enumerate(st.ports):
                if v is None:
                    continue
                if self.charge_done[v] < self.charge_need[v]:
                    self.charge_done[v] += 1
                    changes += 1
                if self.charge_done[v] >= self.charge_need[v]:
                    done.append((self.port_seq[v], p, v))
            for _, p, v in sorted(done):
                if len(st.exitq) >= st.spec.exit_capacity:
                    break
                st.ports[p] = None
                st.exitq.append(v)
                self.charged[v] = True
                self.state[v] = ST_EXIT
                self._log("st_exitq_in", n, v)
                changes += 1
        return changes

    # ------------------------------------------------------------ queries

    @property
    def done(self) -> bool:
        return self.n_arrived == len(self.ids)

    def counts(self) -> dict[str, int]:
        out = dict.fromkeys(STATE_NAMES, 0)
        for s in self.state:
            out[STATE_NAMES[s]] += 1
        return out

    def charge_level(self, v: int) -> float:
        node = self.charge_node[v]
        if node is None:
            return self.scenario.initial_charge
        spec = self.stations[node].spec
        return min(self.scenario.target_charge,
                   self.scenario.initial_charge + spec.rate * self.charge_done[v])

    def run(self, max_steps: int | None = None) -> SimResult:
        if max_steps is None:
            max_steps = math.ceil(self.scenario.horizon / self.dt)
        window = math.ceil(self.scenario.gridlock_window / self.dt)
        last_depart = max(self.depart_step, default=0)
        while not self.done and self.t < max_steps:
            self.step()
            if self.idle_steps >= window and self.t > last_depart:
                self.gridlock = True
                break
        return self.result()

    def result(self) -> SimResult:
        dt = self.dt
        end = self.t * dt
        travel, deps, arrs, route_of = {}, {}, {}, {}
        unfinished = []
        per_route: dict[str, list[float]] = {}
        total = 0.0
        for v, vid in enumerate(self.ids):
            dep = self.depart_step[v] * dt
            deps[vid] = dep
            route_of[vid] = self.route_ids[v]
            if self.arrive_step[v] is None:
                unfinished.append(vid)
                total += max(end - dep, 0.0)
                continue
            arr = self.arrive_step[v] * dt
            arrs[vid] = arr
            travel[vid] = arr - dep
            total += arr - dep
            per_route.setdefault(self.route_ids[v], []).append(arr - dep)
        links = self.net.links
        return SimResult(
            seed=self.seed,
            travel_times=travel,
            departures=deps,
            arrivals=arrs,
            route_of=route_of,
            link_mean_times={links[l].id: self.link_time_sum[l] / self.link_count[l]
                             for l in range(len(links)) if self.link_count[l]},
            link_counts={links[l].id: self.link_count[l] for l in range(len(links))},
            route_mean_times={r: float(np.mean(ts)) for r, ts in sorted(per_route.items())},
            total_travel_time=total,
            unfinished=unfinished,
            gridlock=self.gridlock,
            end_time=end,
        )


def run(scenario: Scenario, trips: Sequence[Trip], seed: int, max_steps: int | None = None) -> SimResult:
    """Simulate ``trips`` until all arrive, the horizon ends, or gridlock."""
    return Simulation(scenario, trips, seed).run(max_steps)


@dataclass
class MonteCarloResult:
    seeds: list[int]
    mean_total: float
    stderr_total: float
    route_means: dict[str, float]
    route_stderr: dict[str, float]
    link_means: dict[str, float]
    link_counts: dict[str, float]
    flagged_runs: int
    runs: list[SimResult] = field(repr=False, default_factory=list)


def _stderr(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def _run_one(args):
    scenario, trips, seed = args
    return run(scenario, trips, seed)


def monte_carlo(scenario: Scenario, trips: Sequence[Trip], seeds: Sequence[int],
                routes: Iterable[Route] = (), jobs: int = 1) -> MonteCarloResult:
    """Independent seeded runs with means and standard errors.

    Routes in ``routes`` that no vehicle uses report their free-flow time.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("monte_carlo needs at least one seed")
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, [(scenario, trips, s) for s in seeds]))
    else:
        results = [run(scenario, trips, s) for s in seeds]
    totals = [r.total_travel_time for r in results]
    per_route: dict[str, list[float]] = {}
    for r in results:
        for rid, m in r.route_mean_times.items():
            per_route.setdefault(rid, []).append(m)
    route_means = {rid: float(np.mean(v)) for rid, v in sorted(per_route.items())}
    route_se = {rid: _stderr(v) for rid, v in sorted(per_route.items())}
    for route in routes:
        if route.route_id not in route_means:
            route_means[route.route_id] = scenario.route_free_flow_time(route)
            route_se[route.route_id] = 0.0
    per_link: dict[str, list[float]] = {}
    for r in results:
        for lid, m in r.link_mean_times.items():
            per_link.setdefault(lid, []).append(m)
    counts = {lid: float(np.mean([r.link_counts[lid] for r in results]))
              for lid in results[0].link_counts}
    return MonteCarloResult(
        seeds, float(np.mean(totals)), _stderr(totals), route_means, route_se,
        {lid: float(np.mean(v)) for lid, v in sorted(per_link.items())}, counts,
        sum(1 for r in results if r.flagged), results)


def isolated_link_run(link: Link, flow_vph: float, seed: int, horizon: float = 1800.0,
                      timestep: float = 1.0, max_factor: float = 3.0) -> SimResult:
    """Poisson arrivals at ``flow_vph`` onto a single copy of ``link``."""
    a, b = Node(link.tail), Node(link.head)
    solo = Link(link.id, link.tail, link.head, link.length, link.lanes, link.free_flow_time,
                link.flow_capacity)
    net = Network([a, b], [solo])
    scenario = Scenario(net, horizon=horizon * max_factor, timestep=timestep)
    rng = np.random.default_rng([int(seed), _ARRIVAL_STREAM, 0])
    route = Route("solo", 0, 1, (link.id,))
    trips = []
    t = float(rng.exponential(3600.0 / flow_vph))
    while t < horizon:
        trips.append(Trip(f"v{len(trips)}", route, t))
        t += float(rng.exponential(3600.0 / flow_vph))
    return run(scenario, trips, seed)


# ------------------------------------------------------------------- files


def station_from_dict(raw: Mapping, node: str | None = None) -> StationSpec:
    return StationSpec(str(raw.get("node", node or "*")), int(raw.get("ports", 4)),
                       float(raw.get("rate", 0.01)), int(raw.get("exit_capacity", 2)))


def scenario_from_dict(net: Network, raw: Mapping) -> Scenario:
    """Scenario from a config mapping; unknown station nodes are rejected."""
    stations = {}
    for s in raw.get("stations", ()):
        spec = station_from_dict(s)
        if spec.node not in net.node_index:
            raise ValueError(f"station at unknown node {spec.node!r}")
        stations[spec.node] = spec
    default = station_from_dict(raw.get("default_station", {}), "*")
    sc = Scenario(net, stations, float(raw.get("horizon", 7200.0)), float(raw.get("timestep", 1.0)),
                  float(raw.get("initial_charge", 0.2)), float(raw.get("target_charge", 1.0)),
                  default, float(raw.get("gridlock_window", 600.0)),
                  float(raw.get("conflict_threshold_deg", 45.0)))
    if not sc.timestep > 0 or not sc.horizon > 0:
        raise ValueError("horizon and timestep must be positive")
    if not 0 <= sc.initial_charge <= sc.target_charge:
        raise ValueError("need 0 <= initial_charge <= target_charge")
    return sc


def write_vehicles_csv(path, result: SimResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "depart", "arrive", "route_id"])
        for vid, dep in result.departures.items():
            arr = result.arrivals.get(vid)
            w.writerow([vid, repr(dep), "" if arr is None else repr(arr), result.route_of[vid]])


def write_links_csv(path, mc: MonteCarloResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["link_id", "mean_time_s", "mean_count"])
        for lid, cnt in mc.link_counts.items():
            t = mc.link_means.get(lid)
            w.writerow([lid, "" if t is None else repr(t), repr(cnt)])
