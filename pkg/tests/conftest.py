import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).resolve().parents[1] / "data"


@pytest.fixture
def data_dir():
    return DATA


def random_instances(count, max_paths=12, seed0=0, **kw):
    """Random networks whose commodities have at most ``max_paths`` paths."""
    from evplace.instances import random_network
    from oracles import PathProblem

    out, seed = [], seed0
    while len(out) < count:
        rng = np.random.default_rng(seed)
        seed += 1
        net, dem = random_network(rng, n_nodes=int(rng.integers(5, 9)),
                                  extra_links=int(rng.integers(2, 6)), **kw)
        pp = PathProblem(net, dem)
        if pp.max_paths() <= max_paths:
            out.append((seed - 1, net, dem, pp))
    return out


# criterion number -> (passed, one-line detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
