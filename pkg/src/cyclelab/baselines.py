"""Classical comparison controllers: fixed time, cycle-level BackPressure, adaptive Webster."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signal import (
    CYCLE_SET,
    DEFAULT_CYCLE,
    N_PHASES,
    PHASE_MOVEMENTS,
    HybridAction,
    InvalidActionError,
    PhasePlan,
    SignalTimingParams,
    decode_action,
    plan_from_splits,
)
from .sim import SATURATION_HEADWAY, Simulation

BACKPRESSURE_CYCLE = 90
WEBSTER_INTERVAL = 300
WEBSTER_SATURATION_CAP = 0.95
SATURATION_FLOW = 1.0 / SATURATION_HEADWAY  # vehicles per second per lane

_UNIFORM = np.full(N_PHASES, 1.0 / N_PHASES)


@dataclass(frozen=True)
class WebsterInputs:
    interval: float
    flow_ratios: tuple[float, ...]  # critical y_i per phase
    lost_time_per_phase: float = 3.0

    def __post_init__(self):
        if any(y < 0 for y in self.flow_ratios):
            raise ValueError("flow ratios must be non-negative")

    @property
    def total_lost_time(self) -> float:
        return self.lost_time_per_phase * len(self.flow_ratios)


@dataclass(frozen=True)
class PressureReading:
    pressures: tuple[float, ...]

    def __post_init__(self):
        if any(p < 0 for p in self.pressures):
            raise ValueError("pressures are floored at zero")


def fixed_time_plan(params: SignalTimingParams | None = None, k: int = DEFAULT_CYCLE) -> PhasePlan:
    return decode_action(HybridAction(k, _UNIFORM), params)


def _proportional(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    return w / s if s > 0 else _UNIFORM.copy()


def backpressure_splits(pressures: PressureReading, fixed_k: int = BACKPRESSURE_CYCLE) -> HybridAction:
    """Splits proportional to phase pressure within a fixed cycle length.

    ``fixed_k`` may lie off the discrete cycle set; it only has to fit the
    minimum greens and yellows.
    """
    p = SignalTimingParams()
    if p.green_budget(fixed_k) < 0:
        raise InvalidActionError(f"cycle {fixed_k} s cannot hold the minimum greens")
    return HybridAction(int(fixed_k), _proportional(pressures.pressures))


def snap_cycle(c: float, cycle_set=CYCLE_SET) -> int:
    """Nearest element of ``cycle_set``; an exact midpoint goes to the longer cycle."""
    best = None
    for k in sorted(cycle_set):
        if best is None or abs(c - k) <= abs(c - best):
            best = k
    return int(best)


def webster_cycle(inputs: WebsterInputs) -> int:
    Y = float(sum(inputs.flow_ratios))
    if Y >= WEBSTER_SATURATION_CAP:
        return max(CYCLE_SET)
    c0 = (1.5 * inputs.total_lost_time + 5.0) / (1.0 - Y)
    return snap_cycle(min(max(c0, min(CYCLE_SET)), max(CYCLE_SET)))


def webster_plan(inputs: WebsterInputs) -> HybridAction:
    """Webster cycle snapped onto the cycle set, splits proportional to critical flow ratios."""
    return HybridAction(webster_cycle(inputs), _proportional(inputs.flow_ratios))


# -- controllers driven by the harness --------------------------------------


class Controller:
    """Per-intersection plan source.  ``plan`` is asked once per cycle at the observation instant."""

    name = "controller"

    def on_tick(self, sim: Simulation, t: int) -> None:
        pass

    def plan(self, n: int, sim: Simulation, t: int) -> PhasePlan:
        raise NotImplementedError


class FixedTimeController(Controller):
    name = "fixed"

    def __init__(self, params: SignalTimingParams | None = None):
        self._plan = fixed_time_plan(params)

    def plan(self, n, sim, t):
        return self._plan


class BackPressureController(Controller):
    name = "backpressure"

    def __init__(self, params: SignalTimingParams | None = None, fixed_k: int = BACKPRESSURE_CYCLE):
        self.params = params or SignalTimingParams()
        self.fixed_k = fixed_k

    def plan(self, n, sim, t):
        pr = sim.movement_queues(n)
        a = backpressure_splits(PressureReading(tuple(pr[i] for i in range(N_PHASES))), self.fixed_k)
        return plan_from_splits(a.k, a.splits, self.params)


@dataclass
class WebsterController(Controller):
    """Re-plans every ``interval`` seconds from stop-line arrivals of the last interval."""

    n_intersections: int
    params: SignalTimingParams = field(default_factory=SignalTimingParams)
    interval: int = WEBSTER_INTERVAL
    name: str = "webster"

    def __post_init__(self):
        self._mark = [None] * self.n_intersections
        self._plans = [fixed_time_plan(self.params)] * self.n_intersections

    def flow_ratios(self, counts: dict, base: dict | None) -> tuple[float, ...]:
        ys = []
        for phase in range(N_PHASES):
            sides, cls = PHASE_MOVEMENTS[phase]
            busiest = max(counts[(s, cls)] - (base[(s, cls)] if base else 0) for s in sides)
            ys.append(busiest / (self.interval * SATURATION_FLOW))
        return tuple(ys)

    def on_tick(self, sim, t):
        if (t + 1) % self.interval:
            return
        for n in range(self.n_intersections):
            counts = dict(sim.stopline_arrivals[n])
            ys = self.flow_ratios(counts, self._mark[n])
            self._mark[n] = counts
            a = webster_plan(WebsterInputs(self.interval, ys, self.params.yellow))
            self._plans[n] = decode_action(a, self.params)

    def plan(self, n, sim, t):
        return self._plans[n]
