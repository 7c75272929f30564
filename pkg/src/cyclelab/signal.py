"""Hybrid actions, phase plans and asynchronous per-intersection cycle clocks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

N_PHASES = 4
CYCLE_SET = (60, 72, 84, 96, 108, 120)
DEFAULT_CYCLE = 84

# phase index -> (approach sides, lane movement class); class "through" covers
# straight and right turns, which share the outer lane
PHASE_MOVEMENTS = {
    0: (("N", "S"), "through"),
    1: (("N", "S"), "left"),
    2: (("E", "W"), "through"),
    3: (("E", "W"), "left"),
}
PHASE_NAMES = ("NS-through", "NS-left", "EW-through", "EW-left")


class InvalidActionError(ValueError):
    pass


class MissingPlanError(RuntimeError):
    pass


@dataclass(frozen=True)
class SignalTimingParams:
    cycle_set: tuple[int, ...] = CYCLE_SET
    g_min: float = 12.0
    yellow: float = 3.0
    n_phases: int = N_PHASES

    def __post_init__(self):
        if min(self.cycle_set) < self.n_phases * (self.g_min + self.yellow):
            raise ValueError("shortest cycle cannot hold minimum greens plus yellows")

    @property
    def lost_time(self) -> float:
        return self.n_phases * self.yellow

    def green_budget(self, k: float) -> float:
        return k - self.n_phases * self.g_min - self.n_phases * self.yellow


@dataclass(frozen=True)
class HybridAction:
    k: int
    splits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "splits", np.asarray(self.splits, dtype=float))

    @property
    def k_index(self) -> int:
        return CYCLE_SET.index(self.k)


@dataclass(frozen=True)
class PhasePlan:
    cycle_length: int
    greens: tuple[float, ...]
    yellow: float
    splits: tuple[float, ...] = ()

    @property
    def total(self) -> float:
        return float(sum(self.greens) + self.yellow * len(self.greens))

    def tick_greens(self) -> tuple[int, ...]:
        """Integer green seconds that keep the cycle exactly ``cycle_length`` ticks."""
        target = int(round(self.cycle_length - self.yellow * len(self.greens)))
        floors = [int(np.floor(g + 1e-9)) for g in self.greens]
        short = target - sum(floors)
        # largest remainder; ties go to the earlier phase
        order = sorted(range(len(self.greens)), key=lambda i: (-(self.greens[i] - floors[i]), i))
        for i in order[:short]:
            floors[i] += 1
        return tuple(floors)


def normalize_splits(raw) -> np.ndarray:
    """Softmax onto the open simplex; stable for any finite input."""
    z = np.asarray(raw, dtype=float)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def plan_from_splits(k: float, splits, p: SignalTimingParams) -> PhasePlan:
    """Effective greens for any cycle length ``k`` that fits the minimum greens."""
    l = np.asarray(splits, dtype=float)
    if l.shape != (p.n_phases,):
        raise InvalidActionError(f"expected {p.n_phases} splits, got shape {l.shape}")
    if np.any(l < -1e-12) or abs(l.sum() - 1.0) > 1e-9:
        raise InvalidActionError(f"splits {l.tolist()} are not on the simplex")
    budget = p.green_budget(k)
    if budget < 0:
        raise InvalidActionError(f"cycle {k} s is shorter than minimum greens plus yellows")
    greens = tuple(float(budget * li + p.g_min) for li in l)
    return PhasePlan(int(k), greens, p.yellow, tuple(float(x) for x in l))


def decode_action(a: HybridAction, p: SignalTimingParams | None = None) -> PhasePlan:
    """Phase plan of a hybrid action: ``L_i = (k - sum g_min - sum y) * l_i + g_min``."""
    p = p or SignalTimingParams()
    if a.k not in p.cycle_set:
        raise InvalidActionError(f"cycle length {a.k} not in {p.cycle_set}")
    return plan_from_splits(a.k, a.splits, p)


# -- scheduler ---------------------------------------------------------------


@dataclass(frozen=True)
class ControlEvent:
    kind: str  # "phase_end" | "observation_due" | "plan_swap_due"
    intersection: int
    time: int
    phase: int | None = None
    cycle: int = 0


@dataclass
class _Clock:
    plan: PhasePlan
    ticks: tuple[int, ...]
    pending: PhasePlan | None = None
    phase: int = 0
    phase_elapsed: int = 0
    cycle_elapsed: int = 0
    cycle_index: int = 0
    cycle_start: int = 0


@dataclass
class CycleScheduler:
    """Independent cycle clocks for every intersection.

    :meth:`tick` is called once per simulated second after the simulator has
    advanced; emitted events are stamped with the time at the end of the tick.
    """

    n_intersections: int
    advance_time: int = 0
    initial_plan: PhasePlan | None = None
    params: SignalTimingParams = field(default_factory=SignalTimingParams)
    clocks: list[_Clock] = field(init=False)

    def __post_init__(self):
        plan = self.initial_plan or decode_action(
            HybridAction(DEFAULT_CYCLE, np.full(N_PHASES, 1.0 / N_PHASES)), self.params
        )
        if not 0 <= self.advance_time < self.params.g_min + self.params.yellow:
            raise ValueError("advance_time must fall within the last phase")
        self.clocks = [_Clock(plan, plan.tick_greens()) for _ in range(self.n_intersections)]

    def install(self, n: int, plan: PhasePlan) -> None:
        """Queue ``plan`` to start at intersection ``n``'s next cycle boundary."""
        self.clocks[n].pending = plan

    def green_phase(self, n: int) -> int | None:
        """Phase currently showing green at ``n``; None during yellow."""
        c = self.clocks[n]
        return c.phase if c.phase_elapsed < c.ticks[c.phase] else None

    def signal_states(self) -> list[int | None]:
        return [self.green_phase(n) for n in range(self.n_intersections)]

    def remaining(self, n: int) -> int:
        c = self.clocks[n]
        return c.plan.cycle_length - c.cycle_elapsed

    def current_plan(self, n: int) -> PhasePlan:
        return self.clocks[n].plan

    def cycle_index(self, n: int) -> int:
        return self.clocks[n].cycle_index

    def tick(self, n: int, t: int) -> list[ControlEvent]:
        """Advance intersection ``n`` by one second ending at time ``t + 1``."""
        c = self.clocks[n]
        now = t + 1
        c.phase_elapsed += 1
        c.cycle_elapsed += 1
        events: list[ControlEvent] = []
        k = c.plan.cycle_length
        if c.phase_elapsed >= c.ticks[c.phase] + self.params.yellow:
            events.append(ControlEvent("phase_end", n, now, c.phase, c.cycle_index))
            c.phase += 1
            c.phase_elapsed = 0
        if c.cycle_elapsed == k - self.advance_time:
            events.append(ControlEvent("observation_due", n, now, None, c.cycle_index))
        if c.cycle_elapsed == k:
            events.append(ControlEvent("plan_swap_due", n, now, None, c.cycle_index))
        return events

    def swap(self, n: int, now: int) -> None:
        """Start the next cycle at ``n`` with its pending plan."""
        c = self.clocks[n]
        if c.pending is None:
            log.warning("intersection %d: no pending plan at cycle end, repeating current plan", n)
            nxt = c.plan
        else:
            nxt = c.pending
        c.plan = nxt
        c.ticks = nxt.tick_greens()
        c.pending = None
        c.phase = 0
        c.phase_elapsed = 0
        c.cycle_elapsed = 0
        c.cycle_index += 1
        c.cycle_start = now

    def tick_all(self, t: int) -> list[ControlEvent]:
        events: list[ControlEvent] = []
        for n in range(self.n_intersections):
            events.extend(self.tick(n, t))
        return events


def tick_scheduler(sched: CycleScheduler, intersection: int, t: int, strict: bool = False) -> list[ControlEvent]:
    """One tick of one intersection's clock; cycle swaps are applied in place.

    With ``strict`` a swap without a pending plan raises :class:`MissingPlanError`
    instead of repeating the current plan.
    """
    events = sched.tick(intersection, t)
    for ev in events:
        if ev.kind == "plan_swap_due":
            if strict and sched.clocks[intersection].pending is None:
                raise MissingPlanError(f"no pending plan at intersection {intersection}")
            sched.swap(intersection, ev.time)
    return events
