"""Small reference networks with known equilibria, plus a random generator."""

from __future__ import annotations

import numpy as np

from evplace.delay import DelayParams, PowerDelay
from evplace.network import ChargerLink, DemandTable, Link, Network, Node, ODPair


def _link(lid, tail, head, law, fft=10.0, length=200.0, lanes=1):
    return Link(lid, tail, head, length, lanes, fft, delay=law)


def fig3() -> tuple[Network, DemandTable]:
    """Greedy counterexample: one OD, must-charge demand 1, default charger c0.

    Links O->c4 and c5->D have delay equal to their flow, the c0 detour costs
    10 + 10, O->c1->c5 and c4->c3->D each carry one constant 1.1 link, and
    every other link is free. Candidates are c1, c2, c3; stations add no
    delay.
    """
    const = PowerDelay
    lin = PowerDelay(0.0, 1.0, 1.0)
    nodes = [Node(n) for n in ("O", "c0", "c4", "c3", "c2", "c5", "c1", "D")]
    links = [
        _link("O-c0", "O", "c0", const(10.0)),
        _link("c0-D", "c0", "D", const(10.0)),
        _link("O-c4", "O", "c4", lin),
        _link("c4-c3", "c4", "c3", const(0.0)),
        _link("c3-D", "c3", "D", const(1.1)),
        _link("c4-c2", "c4", "c2", const(0.0)),
        _link("c2-c5", "c2", "c5", const(0.0)),
        _link("c5-D", "c5", "D", lin),
        _link("O-c1", "O", "c1", const(0.0)),
        _link("c1-c5", "c1", "c5", const(1.1)),
    ]
    net = Network(nodes, links, candidates=["c1", "c2", "c3"],
                  chargers=[ChargerLink("c0", PowerDelay(0.0))])
    demand = DemandTable((ODPair(1, "O", "D", q_f2=1.0),))
    return net, demand


def pigou() -> tuple[Network, DemandTable]:
    """Two parallel links, delays 1 and x, unit demand: all flow on the second."""
    nodes = [Node("s"), Node("t")]
    links = [
        _link("l1", "s", "t", PowerDelay(1.0)),
        _link("l2", "s", "t", PowerDelay(0.0, 1.0, 1.0)),
    ]
    return Network(nodes, links), DemandTable((ODPair(1, "s", "t", q_f1=1.0),))


def braess() -> tuple[Network, DemandTable]:
    """Classic Braess network with demand 6.

    Equilibrium: each of the three paths carries 2, so s->a and b->t carry
    4, the others 2, and every path costs 92.
    """
    nodes = [Node(n) for n in ("s", "a", "b", "t")]
    links = [
        _link("sa", "s", "a", PowerDelay(0.0, 10.0, 1.0)),
        _link("at", "a", "t", PowerDelay(50.0, 1.0, 1.0)),
        _link("sb", "s", "b", PowerDelay(50.0, 1.0, 1.0)),
        _link("bt", "b", "t", PowerDelay(0.0, 10.0, 1.0)),
        _link("ab", "a", "b", PowerDelay(10.0, 1.0, 1.0)),
    ]
    return Network(nodes, links), DemandTable((ODPair(1, "s", "t", q_f1=6.0),))


def random_network(rng: np.random.Generator, n_nodes: int = 8, extra_links: int = 6,
                   n_candidates: int = 2, n_ods: int = 2,
                   with_types=(1, 2, 3), installed: bool = True) -> tuple[Network, DemandTable]:
    """Random layered digraph with BPR delays, chargers and a few OD pairs.

    Nodes are ordered; most links point forward so path counts stay small.
    Charger stations get a mildly congestible BPR law. With
    ``installed=False`` the candidates are left empty, for placement runs.
    """
    names = [f"n{k}" for k in range(n_nodes)]
    xs = rng.uniform(0, 1000, n_nodes)
    ys = rng.uniform(0, 1000, n_nodes)
    nodes = [Node(n, float(x), float(y)) for n, x, y in zip(names, xs, ys)]
    pairs = set()
    for k in range(n_nodes - 1):
        pairs.add((k, k + 1))
    spare = sum(min(3, n_nodes - 1 - a) for a in range(n_nodes)) - (n_nodes - 1)
    while len(pairs) < n_nodes - 1 + min(extra_links, spare):
        a, b = sorted(rng.choice(n_nodes, 2, replace=False))
        if b - a <= 3:
            pairs.add((int(a), int(b)))
    links = []
    for k, (a, b) in enumerate(sorted(pairs)):
        fft = float(rng.uniform(20, 120))
        cap = float(rng.uniform(300, 1500))
        law = DelayParams(fft, cap, float(rng.uniform(0.1, 1.0)), float(rng.uniform(1.0, 4.0)))
        links.append(Link(f"e{k}", names[a], names[b], 100.0 + fft * 10, 1, fft, cap, delay=law))
    inner = list(range(1, n_nodes - 1))
    cand = sorted(rng.choice(inner, size=min(n_candidates, len(inner)), replace=False))
    chargers = [ChargerLink(names[c], DelayParams(float(rng.uniform(30, 90)), 600.0, 0.5, 2.0))
                for c in cand]
    ods = []
    for i in range(n_ods):
        o = int(rng.integers(0, max(1, n_nodes // 3)))
        d = int(rng.integers(max(o + 2, 2 * n_nodes // 3), n_nodes))
        q = {f"q_f{t}": (float(rng.uniform(100, 600)) if t in with_types else 0.0)
             for t in (1, 2, 3)}
        ods.append(ODPair(i + 1, names[o], names[d], benefit=float(rng.uniform(0, 60)), **q))
    net = Network(nodes, links, candidates=[names[c] for c in cand],
                  chargers=chargers if installed else [])
    return net, DemandTable(tuple(ods))


def desk_grid(rows: int = 3, cols: int = 5, spacing: float = 400.0,
              candidates=("n2", "n7", "n11", "n13")) -> tuple[Network, DemandTable]:
    """Small two-way grid for placement experiments (15 nodes by default).

    Nodes ``n{r*cols+c}`` sit on a ``spacing``-metre lattice; every link is
    one lane at 50 km/h with BPR(0.15, 4) delays. Two OD pairs run along
    the first and last rows and carry 600 veh/h in total, half of it
    must-charge, so candidates differ in how far drivers detour to charge. Use
    ``desk_station_delay`` as the charger delay of selected stations.
    """
    names = [f"n{k}" for k in range(rows * cols)]
    nodes = [Node(names[r * cols + c], c * spacing, r * spacing)
             for r in range(rows) for c in range(cols)]
    fft = round(spacing / (50 / 3.6), 3)
    links = []

    def add(a, b):
        lid = f"{names[a]}-{names[b]}"
        links.append(Link(lid, names[a], names[b], spacing, 1, fft, delay=DelayParams(fft, 1900.0)))

    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                add(k, k + 1)
                add(k + 1, k)
            if r + 1 < rows:
                add(k, k + cols)
                add(k + cols, k)
    net = Network(nodes, links, candidates=list(candidates))
    last = rows * cols - 1
    demand = DemandTable((
        ODPair(1, names[0], names[cols - 1], q_f1=120.0, q_f2=150.0, q_f3=30.0, benefit=20.0),
        ODPair(2, names[(rows - 1) * cols], names[last], q_f1=120.0, q_f2=150.0, q_f3=30.0,
               benefit=20.0),
    ))
    return net, demand


def desk_station_delay(station_fft: float = 40.0, station_cap: float = 180.0) -> DelayParams:
    return DelayParams(station_fft, station_cap)
