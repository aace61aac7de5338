"""BPR link delays, their integrals, and calibration from simulated samples."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares

A_MIN = 1e-6
B_BOUNDS = (1.0, 12.0)


@dataclass(frozen=True)
class DelayParams:
    """BPR law ``fft * (1 + a * (x / cap) ** b)``."""

    fft: float
    cap: float
    a: float = 0.15
    b: float = 4.0

    def __post_init__(self):
        for name in ("fft", "cap", "a", "b"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"DelayParams.{name} must be positive, got {value!r}")

    def as_power(self) -> PowerDelay:
        return PowerDelay(self.fft, self.fft * self.a / self.cap ** self.b, self.b)

    def __call__(self, x: float) -> float:
        return bpr_delay(self, x)

    def integral(self, x: float) -> float:
        return bpr_integral(self, x)

    def to_dict(self) -> dict:
        return {"fft": self.fft, "cap": self.cap, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class PowerDelay:
    """Generic non-decreasing law ``free + coef * x ** power``.

    Covers BPR as well as the constant and linear delays used in textbook
    examples (Pigou, Braess) and constant-time charging stations.
    """

    free: float
    coef: float = 0.0
    power: float = 1.0

    def __post_init__(self):
        if self.free < 0 or self.coef < 0 or not self.power > 0:
            raise ValueError(f"invalid power delay {self}")

    def as_power(self) -> PowerDelay:
        return self

    def __call__(self, x: float) -> float:
        if x < 0:
            raise ValueError("flow must be non-negative")
        return self.free + self.coef * x ** self.power

    def integral(self, x: float) -> float:
        if x < 0:
            raise ValueError("flow must be non-negative")
        return self.free * x + self.coef * x ** (self.power + 1) / (self.power + 1)

    def to_dict(self) -> dict:
        return {"free": self.free, "coef": self.coef, "power": self.power}


def delay_from_dict(raw: Mapping) -> DelayParams | PowerDelay:
    if "fft" in raw:
        return DelayParams(float(raw["fft"]), float(raw["cap"]),
                           float(raw.get("a", 0.15)), float(raw.get("b", 4.0)))
    return PowerDelay(float(raw.get("free", 0.0)), float(raw.get("coef", 0.0)),
                      float(raw.get("power", 1.0)))


def bpr_delay(p: DelayParams, x: float) -> float:
    if x < 0:
        raise ValueError("flow must be non-negative")
    return p.fft * (1.0 + p.a * (x / p.cap) ** p.b)


def bpr_integral(p: DelayParams, x: float) -> float:
    """Closed-form integral of the BPR delay from 0 to ``x``."""
    if x < 0:
        raise ValueError("flow must be non-negative")
    return p.fft * x + p.fft * p.a * x ** (p.b + 1) / ((p.b + 1) * p.cap ** p.b)


class PowerLaws:
    """Vectorised evaluation of a list of power delays."""

    def __init__(self, laws: Sequence[DelayParams | PowerDelay]):
        laws = [law.as_power() for law in laws]
        self.free = np.array([l.free for l in laws], dtype=float)
        self.coef = np.array([l.coef for l in laws], dtype=float)
        self.power = np.array([l.power for l in laws], dtype=float)

    def __len__(self):
        return len(self.free)

    def delay(self, x: np.ndarray) -> np.ndarray:
        return self.free + self.coef * np.power(np.maximum(x, 0.0), self.power)

    def integral(self, x: np.ndarray) -> np.ndarray:
        x = np.maximum(x, 0.0)
        return self.free * x + self.coef * np.power(x, self.power + 1) / (self.power + 1)

    def derivative(self, x: np.ndarray) -> np.ndarray:
        x = np.maximum(x, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = self.coef * self.power * np.power(x, self.power - 1)
        return np.where(self.coef > 0, np.nan_to_num(d, posinf=0.0), 0.0)

    def subset(self, idx) -> PowerLaws:
        out = PowerLaws.__new__(PowerLaws)
        out.free, out.coef, out.power = self.free[idx], self.coef[idx], self.power[idx]
        return out


# ------------------------------------------------------------- calibration


@dataclass(frozen=True)
class LinkSample:
    flow: float
    mean_delay: float
    seed_count: int = 1

    def __post_init__(self):
        if self.flow < 0:
            raise ValueError("sample flow must be non-negative")
        if not self.mean_delay > 0:
            raise ValueError("sample delay must be positive")


@dataclass(frozen=True)
class FitReport:
    params: DelayParams
    r_squared: float
    residual_norm: float
    converged: bool = True
    n_samples: int = 0


def _r_squared(y: np.ndarray, yhat: np.ndarray) -> float:
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 1e-12 * max(1.0, float(np.sum(y ** 2))):
        return 1.0 if ss_res <= 1e-12 * max(1.0, float(np.sum(y ** 2))) else 0.0
    return 1.0 - ss_res / ss_tot


def fit_bpr(samples: Sequence[LinkSample], init: DelayParams | None = None,
            cap: float | None = None, max_nfev: int = 2000) -> FitReport:
    """Least-squares BPR fit to ``(flow, mean delay)`` samples.

    ``cap`` and ``a`` enter the model only through ``a / cap**b``, so the
    capacity acts as a gauge: it is pinned to ``cap`` when given (e.g. the
    link's nominal capacity), otherwise to the largest sampled flow. ``fft``,
    ``a`` and ``b`` are fitted in log space with ``a >= 1e-6`` and
    ``1 <= b <= 12``.
    """
    if len(samples) < 4:
        raise ValueError(f"insufficient samples: need at least 4, got {len(samples)}")
    x = np.array([s.flow for s in samples], dtype=float)
    y = np.array([s.mean_delay for s in samples], dtype=float)
    if len(np.unique(x)) < 2:
        raise ValueError("insufficient samples: need at least 2 distinct flow values")

    if cap is None:
        cap = init.cap if init is not None else float(x.max())
    if not cap > 0:
        raise ValueError("capacity anchor must be positive")
    if init is None:
        init = DelayParams(float(y.min()), cap, 0.15, 4.0)
    else:
        # re-express the initial guess in the pinned gauge
        init = DelayParams(init.fft, cap, init.a * (cap / init.cap) ** init.b, init.b)

    u = x / cap
    lo = np.array([-np.inf, math.log(A_MIN), B_BOUNDS[0]])
    hi = np.array([np.inf, math.log(1e8), B_BOUNDS[1]])
    theta0 = np.clip([math.log(init.fft), math.log(init.a), init.b], lo + 1e-12, hi - 1e-12)

    def residual(theta):
        fft, a, b = math.exp(theta[0]), math.exp(theta[1]), theta[2]
        return fft * (1.0 + a * u ** b) - y

    def jac(theta):
        fft, a, b = math.exp(theta[0]), math.exp(theta[1]), theta[2]
        ub = u ** b
        with np.errstate(divide="ignore", invalid="ignore"):
            logu = np.where(u > 0, np.log(np.where(u > 0, u, 1.0)), 0.0)
        return np.column_stack([fft * (1.0 + a * ub), fft * a * ub, fft * a * ub * logu])

    sol = least_squares(residual, theta0, jac=jac, bounds=(lo, hi), method="trf",
                        x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
    theta = sol.x
    params = DelayParams(math.exp(theta[0]), cap, max(math.exp(theta[1]), A_MIN), float(theta[2]))
    yhat = np.array([bpr_delay(params, v) for v in x])
    return FitReport(params, _r_squared(y, yhat), float(np.linalg.norm(yhat - y)),
                     converged=bool(sol.status > 0), n_samples=len(samples))


def generate_link_samples(scenario, link_id: str, flow_levels: Sequence[float],
                          seeds: Sequence[int], horizon: float = 1800.0,
                          warmup_fraction: float = 0.2) -> list[LinkSample]:
    """Simulate one physical link in isolation at several arrival rates.

    Vehicles arrive as a Poisson stream at each flow level (veh/h) and the
    recorded delay is the time from arrival at the upstream end until
    discharge, so waiting for inflow capacity counts. Vehicles arriving in
    the first ``warmup_fraction`` of the horizon are not measured. Levels at
    which some seed does not clear within three horizons are dropped.
    """
    from evplace import queuesim

    if not seeds:
        raise ValueError("generate_link_samples needs at least one seed")
    if any(not f > 0 for f in flow_levels):
        raise ValueError("flow levels must be strictly positive")
    link = scenario.network.link(link_id)
    samples = []
    for flow in flow_levels:
        delays = []
        ok = True
        for seed in seeds:
            res = queuesim.isolated_link_run(link, flow, seed, horizon=horizon,
                                             timestep=scenario.timestep)
            if res.unfinished:
                ok = False
                break
            cutoff = warmup_fraction * horizon
            times = [res.travel_times[v] for v, dep in res.departures.items() if dep >= cutoff]
            if times:
                delays.append(float(np.mean(times)))
        if ok and delays:
            samples.append(LinkSample(float(flow), float(np.mean(delays)), len(delays)))
    return samples


def write_samples_csv(path: str | Path, rows: Iterable[tuple[str, LinkSample]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["link_id", "flow_vph", "mean_delay_s", "seed_count"])
        for link_id, s in rows:
            w.writerow([link_id, repr(s.flow), repr(s.mean_delay), s.seed_count])


def write_fits_csv(path: str | Path, fits: Mapping[str, FitReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["link_id", "fft", "cap", "a", "b", "r2"])
        for link_id, rep in fits.items():
            p = rep.params
            w.writerow([link_id, repr(p.fft), repr(p.cap), repr(p.a), repr(p.b), repr(rep.r_squared)])


def read_fits_csv(path: str | Path) -> dict[str, DelayParams]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["link_id"]] = DelayParams(float(row["fft"]), float(row["cap"]),
                                              float(row["a"]), float(row["b"]))
    return out
