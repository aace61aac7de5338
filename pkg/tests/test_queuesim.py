from collections import defaultdict

import numpy as np
import pytest

from evplace.instances import random_network
from evplace.network import F1, F2, Link, Network, Node
from evplace.queuesim import (ARRIVED, Scenario, Simulation, StationSpec, Trip, isolated_link_run,
                              monte_carlo, run, scenario_from_dict, write_links_csv,
                              write_vehicles_csv)
from evplace.routes import Route, build_route_library


def corridor(n=3, length=200.0, fft=10.0, lanes=1):
    nodes = [Node(f"n{k}", 100.0 * k, 0.0) for k in range(n)]
    links = [Link(f"l{k}", f"n{k}", f"n{k + 1}", length, lanes, fft) for k in range(n - 1)]
    return Network(nodes, links, candidates=[n.id for n in nodes])


def test_single_vehicle_free_flow():
    net = corridor(2, fft=37.0)
    res = run(Scenario(net), [Trip("v", Route("r", 1, F1, ("l0",)), 5.0)], seed=3)
    assert res.arrivals["v"] == 42.0
    assert res.travel_times["v"] == 37.0
    assert res.total_travel_time == 37.0


def test_zero_vehicles():
    res = run(Scenario(corridor()), [], seed=0)
    assert res.total_travel_time == 0 and not res.unfinished


def test_spillback_hand_trace():
    nodes = [Node("A"), Node("B"), Node("C")]
    links = [Link("AB", "A", "B", 100, 1, 5), Link("BC", "B", "C", 7, 1, 100)]
    net = Network(nodes, links)
    assert links[1].storage_capacity == 1
    trips = [Trip("v1", Route("r1", 1, F1, ("BC",))),
             Trip("v2", Route("r2", 1, F1, ("AB", "BC"))),
             Trip("v3", Route("r3", 1, F1, ("AB", "BC")), 1.0)]
    sim = Simulation(Scenario(net), trips, seed=0, trace=True)
    sim.run()
    enter = {(e[2], e[3]): e[0] for e in sim.events if e[1] == "enter"}
    leave = {(e[2], e[3]): e[0] for e in sim.events if e[1] == "exitq_out"}
    # v2 reaches the end of AB at t=5 but BC holds v1 until t=100
    assert enter[(1, 1)] > 5 and enter[(1, 1)] >= leave[(1, 0)]
    assert enter[(1, 2)] >= leave[(1, 1)]
    assert sim.done


def test_station_hand_trace():
    net = corridor(2)
    r = Route("r", 1, F2, ("l0",), "n0", 0)
    sc = Scenario(net, default_station=StationSpec("*", ports=2, rate=0.16))
    assert sc.charge_steps("n0") == 5
    sim = Simulation(sc, [Trip(f"v{k}", r) for k in range(3)], seed=0, trace=True)
    sim.run()
    port = {e[3]: e[0] for e in sim.events if e[1] == "port"}
    assert port == {0: 0, 1: 0, 2: 5}
    out = [e[3] for e in sim.events if e[1] == "st_out"]
    assert out == [0, 1, 2]


def test_uncontended_charging_time():
    net = corridor(3, fft=12.0)
    r = Route("r", 1, F2, ("l0", "l1"), "n1", 1)
    sc = Scenario(net, default_station=StationSpec("*", ports=1, rate=0.03))
    res = run(sc, [Trip("v", r)], seed=0)
    assert res.travel_times["v"] == 12 + 12 + 27
    assert res.travel_times["v"] == sc.route_free_flow_time(r)


def test_must_charge_needs_charger_route():
    with pytest.raises(ValueError):
        Simulation(Scenario(corridor()), [Trip("v", Route("r", 1, F2, ("l0",)))], 0)
    with pytest.raises(ValueError):
        Simulation(Scenario(corridor()), [Trip("v", Route("r", 1, F1, ()))], 0)


def busy_scenario(seed):
    rng = np.random.default_rng(seed)
    net, dem = random_network(rng, n_nodes=7)
    net = Network(net.nodes, [Link(l.id, l.tail, l.head, 21.0, 1, l.free_flow_time / 4, 900.0)
                              for l in net.links], net.candidates)
    lib = build_route_library(net, dem, net.candidates)
    trips = [Trip(f"v{k}", lib.routes[int(rng.integers(len(lib)))], float(rng.uniform(0, 60)))
             for k in range(80)]
    sc = Scenario(net, default_station=StationSpec("*", ports=2, rate=0.1, exit_capacity=1),
                  gridlock_window=300)
    return sc, trips


@pytest.mark.parametrize("seed", range(4))
def test_invariants_every_step(seed):
    sc, trips = busy_scenario(seed)
    sim = Simulation(sc, trips, seed, trace=True)
    n = len(trips)
    steps = 0
    while not sim.done and not sim.gridlock and steps < 4000:
        sim.step()
        steps += 1
        assert sum(sim.counts().values()) == n
        occ = [len(sim.running[l]) + len(sim.exitq[l]) for l in range(sim.net.n_links)]
        assert occ == sim.occupancy
        assert all(o <= cap for o, cap in zip(occ, sim.storage))
        for st in sim.stations.values():
            assert len(st.ports) == st.spec.ports
            assert len(st.exitq) <= st.spec.exit_capacity
    # FIFO: each queue releases vehicles in the order they joined
    joined, left = defaultdict(list), defaultdict(list)
    for t, kind, where, v in sim.events:
        if kind == "exitq_in":
            joined[("L", where)].append(v)
        elif kind == "exitq_out":
            left[("L", where)].append(v)
        elif kind == "st_in":
            joined[("E", where)].append(v)
        elif kind == "port":
            left[("E", where)].append(v)
        elif kind == "st_exitq_in":
            joined[("X", where)].append(v)
        elif kind == "st_out":
            left[("X", where)].append(v)
    for key, seq in left.items():
        assert seq == joined[key][:len(seq)], key


def test_replay_is_bit_exact():
    sc, trips = busy_scenario(1)
    a = Simulation(sc, trips, 11, trace=True)
    b = Simulation(sc, trips, 11, trace=True)
    ra, rb = a.run(), b.run()
    assert a.events == b.events
    assert ra == rb
    c = Simulation(sc, trips, 12, trace=True)
    c.run()
    assert c.events != a.events


@pytest.mark.parametrize("lanes", [1, 2])
def test_saturated_discharge_rate(lanes):
    net = corridor(2, length=100000.0, fft=60.0, lanes=lanes)
    r = Route("r", 1, F1, ("l0",))
    trips = [Trip(f"v{k}", r) for k in range(2 * 1900 * lanes)]
    res = run(Scenario(net), trips, seed=5, max_steps=3700)
    served = sum(1 for a in res.arrivals.values() if 60 <= a < 3660)
    assert served / lanes == pytest.approx(1900, rel=0.05)
    assert res.unfinished  # horizon cut the run short, and it says so


def test_gridlock_detected():
    net = Network([Node("a"), Node("b")],
                  [Link("ab", "a", "b", 7, 1, 1), Link("ba", "b", "a", 7, 1, 1)])
    trips = [Trip("v1", Route("r1", 1, F1, ("ab", "ba"))),
             Trip("v2", Route("r2", 1, F1, ("ba", "ab")))]
    res = run(Scenario(net, gridlock_window=30), trips, seed=0)
    assert res.gridlock
    assert sorted(res.unfinished) == ["v1", "v2"]
    assert res.end_time < 100


def test_perpendicular_movements_do_not_share_a_step():
    # west and south approaches cross at X
    nodes = [Node("W", -100, 0), Node("S", 0, -100), Node("X", 0, 0), Node("N", 0, 100),
             Node("E", 100, 0)]
    links = [Link("WX", "W", "X", 100, 1, 10), Link("SX", "S", "X", 100, 1, 10),
             Link("XE", "X", "E", 100, 1, 10), Link("XN", "X", "N", 100, 1, 10)]
    net = Network(nodes, links)
    trips = [Trip("a", Route("ra", 1, F1, ("WX", "XE"))), Trip("b", Route("rb", 1, F1, ("SX", "XN")))]
    for seed in range(10):
        sim = Simulation(Scenario(net), trips, seed, trace=True)
        sim.run()
        out = sorted(e[0] for e in sim.events if e[1] == "exitq_out")
        assert out[0] != out[1]
        # without coordinates nothing conflicts
        flat = Network([Node(n.id) for n in nodes], links)
        sim = Simulation(Scenario(flat), trips, seed, trace=True)
        sim.run()
        out = sorted(e[0] for e in sim.events if e[1] == "exitq_out")
        assert out[0] == out[1]


def test_monte_carlo_basics():
    net = corridor(2)
    r = Route("r", 1, F1, ("l0",))
    unused = Route("u", 1, F1, ("l0",))
    one = monte_carlo(Scenario(net), [Trip("v", r)], [4], routes=[r, unused])
    assert one.stderr_total == 0 and one.mean_total == 10.0
    assert one.route_means["u"] == 10.0
    many = monte_carlo(Scenario(net), [Trip("v", r)], range(10))
    assert many.stderr_total == 0.0
    with pytest.raises(ValueError):
        monte_carlo(Scenario(net), [Trip("v", r)], [])


def test_monte_carlo_stderr_scaling():
    sc, trips = busy_scenario(2)
    # nested seed sets: the first 25 runs of the 100
    a = monte_carlo(sc, trips, range(25))
    b = monte_carlo(sc, trips, range(100))
    assert 1.5 <= a.stderr_total / b.stderr_total <= 2.5


def test_parallel_matches_serial():
    sc, trips = busy_scenario(3)
    a = monte_carlo(sc, trips, range(4))
    b = monte_carlo(sc, trips, range(4), jobs=2)
    assert a.mean_total == b.mean_total and a.route_means == b.route_means


def test_isolated_link_poisson():
    link = Link("l", "a", "b", 400, 1, 28.8)
    res = isolated_link_run(link, 600.0, seed=1, horizon=1800)
    assert 200 < len(res.departures) < 400
    assert not res.unfinished
    assert min(res.travel_times.values()) >= 29.0


def test_scenario_file_and_outputs(tmp_path):
    net = corridor(3)
    sc = scenario_from_dict(net, {"horizon": 600, "stations": [{"node": "n1", "ports": 3}]})
    assert sc.station("n1").ports == 3 and sc.station("n2").ports == 4
    with pytest.raises(ValueError):
        scenario_from_dict(net, {"stations": [{"node": "zz"}]})
    with pytest.raises(ValueError):
        scenario_from_dict(net, {"initial_charge": 2})
    r = Route("r", 1, F1, ("l0", "l1"))
    mc = monte_carlo(sc, [Trip("v", r)], [0, 1])
    write_vehicles_csv(tmp_path / "v.csv", mc.runs[0])
    write_links_csv(tmp_path / "l.csv", mc)
    assert (tmp_path / "v.csv").read_text().splitlines()[1] == "v,0.0,20.0,r"
    assert len((tmp_path / "l.csv").read_text().splitlines()) == 3
