import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from evplace.delay import (DelayParams, LinkSample, PowerDelay, PowerLaws, bpr_delay, bpr_integral,
                           fit_bpr, generate_link_samples, read_fits_csv, write_fits_csv)
from evplace.network import Link, Network, Node
from evplace.queuesim import Scenario

params = st.builds(DelayParams, st.floats(1, 300), st.floats(50, 5000), st.floats(0.01, 2),
                   st.floats(1, 8))


@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
@settings(max_examples=60, deadline=None)
@given(params, st.floats(0, 6000))
def test_integral_matches_quadrature(p, x):
    ref = quad(lambda s: bpr_delay(p, s), 0, x, epsabs=1e-12, epsrel=1e-12)[0]
    assert bpr_integral(p, x) == pytest.approx(ref, rel=1e-9, abs=1e-9)
    assert p.as_power().integral(x) == pytest.approx(ref, rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(params, st.floats(1, 6000))
def test_derivative_finite_difference(p, x):
    # numeric derivative in 50-digit arithmetic, free of cancellation error
    laws = PowerLaws([p])
    with mpmath.workdps(50):
        ref = float(mpmath.diff(lambda s: p.fft * (1 + p.a * (s / p.cap) ** p.b), x))
    assert laws.derivative(np.array([x]))[0] == pytest.approx(ref, rel=1e-9, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(params, st.floats(0, 6000), st.floats(0, 6000))
def test_bpr_monotone(p, x, y):
    lo, hi = sorted((x, y))
    assert bpr_delay(p, lo) <= bpr_delay(p, hi)
    assert bpr_delay(p, 0) == pytest.approx(p.fft)


def test_invalid_params():
    for bad in [(0, 1), (1, 0), (1, 1, -0.1), (1, 1, 0.1, 0)]:
        with pytest.raises(ValueError):
            DelayParams(*bad)
    with pytest.raises(ValueError):
        bpr_delay(DelayParams(1, 1), -1)


def test_power_delay_vectorised():
    laws = [PowerDelay(1.0), PowerDelay(0.0, 2.0, 1.0), DelayParams(10, 100, 0.15, 4)]
    pl = PowerLaws(laws)
    x = np.array([3.0, 3.0, 80.0])
    assert np.allclose(pl.delay(x), [1.0, 6.0, bpr_delay(laws[2], 80.0)])
    assert np.allclose(pl.integral(x), [3.0, 9.0, bpr_integral(laws[2], 80.0)])


def synthetic(p, flows, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    return [LinkSample(f, bpr_delay(p, f) * (1 + noise * rng.standard_normal())) for f in flows]


def test_fit_noiseless_recovers_params():
    true = DelayParams(30.0, 1900.0, 0.5, 4.0)
    rep = fit_bpr(synthetic(true, np.linspace(100, 2400, 12)), cap=1900.0)
    for name in ("fft", "cap", "a", "b"):
        assert getattr(rep.params, name) == pytest.approx(getattr(true, name), rel=1e-4)
    assert rep.r_squared > 0.999999


def test_fit_insufficient_samples():
    true = DelayParams(30.0, 1900.0)
    with pytest.raises(ValueError, match="insufficient"):
        fit_bpr(synthetic(true, [100, 200, 300]))
    with pytest.raises(ValueError, match="insufficient"):
        fit_bpr(synthetic(true, [100] * 5))


def test_fit_constant_data_r2():
    rep = fit_bpr([LinkSample(f, 10.0) for f in (100, 200, 300, 400)])
    assert rep.r_squared == 1.0
    assert rep.params.fft == pytest.approx(10.0, rel=1e-4)


def test_fits_csv_round_trip(tmp_path):
    rep = fit_bpr(synthetic(DelayParams(30, 1000, 0.3, 3), np.linspace(100, 1500, 8)), cap=1000)
    write_fits_csv(tmp_path / "f.csv", {"l1": rep})
    assert read_fits_csv(tmp_path / "f.csv")["l1"] == rep.params


def test_generated_samples_increase_near_capacity():
    from scipy.stats import spearmanr

    net = Network([Node("a"), Node("b")], [Link("ab", "a", "b", 400, 1, 28.8)])
    levels = [1500, 1600, 1700, 1800, 1850, 1900]
    samples = generate_link_samples(Scenario(net), "ab", levels, seeds=[0, 1, 2])
    assert len(samples) == len(levels)
    rho = spearmanr([s.flow for s in samples], [s.mean_delay for s in samples]).statistic
    assert rho > 0.9
    assert all(s.mean_delay >= 29 for s in samples)
