"""Fixed-step point-queue simulation of a signalized grid.

Each directed link is a free-flow pipe (travel time ``length / speed_limit``)
ending in one vertical FIFO queue per lane.  On two-lane links the inner lane
holds left-turners and the outer lane straight and right-turning traffic.
A green lane discharges one vehicle every two seconds as long as the lane it
enters downstream has storage left; otherwise the vehicle stays put
(spillback).
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .grid import HEADINGS, SENSOR_RANGE, DemandSchedule, GridNetwork, movement
from .signal import PHASE_MOVEMENTS

VEHICLE_LENGTH = 7.5
SATURATION_HEADWAY = 2  # seconds per vehicle per lane (1800 veh/h)
SENSOR_CAP = int(SENSOR_RANGE // VEHICLE_LENGTH)  # 13 vehicles per lane


def lane_for(move: str, lanes: int, vid: int) -> int:
    if lanes == 1:
        return 0
    if move == "left":
        return 0
    return 1 + vid % (lanes - 1)


def movement_class(move: str) -> str:
    return "left" if move == "left" else "through"


class Vehicle:
    __slots__ = ("id", "route", "moves", "lanes", "leg", "spawn_time", "entry_time", "wait", "done_time")

    def __init__(self, vid: int, route: list[int], moves: list[str], lanes: list[int], spawn_time: int):
        self.id = vid
        self.route = route
        self.moves = moves  # movement at the downstream end of each leg
        self.lanes = lanes  # lane used on each leg
        self.leg = 0
        self.spawn_time = spawn_time
        self.entry_time = spawn_time
        self.wait = 0.0
        self.done_time: int | None = None


@dataclass
class LinkState:
    transit: list[deque]
    queue: list[deque]
    last_discharge: list[int]

    def occupancy(self, lane: int) -> int:
        return len(self.transit[lane]) + len(self.queue[lane])


@dataclass
class SensorSnapshot:
    time: int
    approach: np.ndarray  # per approach lane, sides N,E,S,W then lane index
    exit: np.ndarray  # per exit lane, same ordering


@dataclass
class EpisodeMetrics:
    average_waiting: float
    throughput: int
    spawned: int
    total_waiting: float
    waiting_series: list[int] = field(default_factory=list)
    cycle_rewards: dict[int, list[float]] = field(default_factory=dict)


class Simulation:
    def __init__(self, net: GridNetwork, schedule: DemandSchedule, event_log: bool = False):
        self.net = net
        self.schedule = schedule
        self.t = 0
        self.speed = net.speed_limit
        self.links = [
            LinkState([deque() for _ in range(l.lanes)], [deque() for _ in range(l.lanes)], [-10**9] * l.lanes)
            for l in net.links
        ]
        self.travel = [l.length / net.speed_limit for l in net.links]
        self.capacity = [int(l.length // VEHICLE_LENGTH) for l in net.links]
        self.is_exit = [net.is_boundary(l.downstream) for l in net.links]
        self.is_entry = [net.is_boundary(l.upstream) for l in net.links]

        # spawn list sorted by (arrival time, route order); vehicle ids follow it
        spawns = []
        for ri, r in enumerate(schedule.routes):
            for j, a in enumerate(r.arrivals):
                spawns.append((float(a), ri, j))
        spawns.sort()
        self._spawns = spawns
        self._spawn_ptr = 0
        self._route_moves: list[list[str]] = []
        for r in schedule.routes:
            hs = [net.links[l].heading for l in r.links]
            self._route_moves.append([movement(hs[i], hs[i + 1]) for i in range(len(hs) - 1)] + ["exit"])
        self.backlog = {l.id: deque() for l in net.links if self.is_entry[l.id]}

        self.vehicles: list[Vehicle] = []
        self.completed = 0
        self.in_network = 0
        self.waiting_series: list[int] = []

        n_int = net.n_interior
        self._prev_green: list[int | None] = [None] * n_int
        self._onset: dict[tuple[int, int], set] = {}  # (link, lane) -> ids queued at green onset
        self._secondary = [0] * n_int
        self._cycle_waits: list[dict[int, float]] = [dict() for _ in range(n_int)]
        # arrivals at the stop line per intersection keyed by (side, movement class)
        self.stopline_arrivals: list[dict[tuple[str, str], int]] = [
            {(s, c): 0 for s in HEADINGS for c in ("through", "left")} for _ in range(n_int)
        ]
        self._approach = [[(side, ix.incoming[side]) for side in HEADINGS] for ix in net.intersections]
        self._exits = [[(side, ix.outgoing[side]) for side in HEADINGS] for ix in net.intersections]
        self._side_of_link = {}
        for ix in net.intersections:
            for side, lid in ix.incoming.items():
                self._side_of_link[lid] = side
        self.events: list[dict] | None = [] if event_log else None

    # -- bookkeeping -------------------------------------------------------

    @property
    def spawned(self) -> int:
        return len(self.vehicles)

    def count_in_network(self) -> int:
        n = sum(len(b) for b in self.backlog.values())
        for ls in self.links:
            n += sum(len(d) for d in ls.transit) + sum(len(d) for d in ls.queue)
        return n

    def _place(self, v: Vehicle, link: int, t: int) -> None:
        v.entry_time = t
        self.links[link].transit[v.lanes[v.leg]].append(v)

    def _has_room(self, v: Vehicle, leg: int) -> bool:
        link = v.route[leg]
        return self.links[link].occupancy(v.lanes[leg]) < self.capacity[link]

    # -- stepping ----------------------------------------------------------

    def step(self, greens: list[int | None], dt: int = 1) -> list[dict]:
        """Advance one tick under the given per-intersection green phases.

        ``greens[n]`` is the phase index showing green at intersection
        ``n`` (None while yellow).  Returns events for vehicles that
        completed their trip.
        """
        if dt != 1:
            raise ValueError("the simulator runs on a fixed 1 s tick")
        t = self.t
        net = self.net
        out_events: list[dict] = []

        # greens that ended with the previous tick: count vehicles left over
        for n, prev in enumerate(self._prev_green):
            if prev is not None and greens[n] != prev:
                self._close_green(n, prev)

        # spawn
        spawns = self._spawns
        while self._spawn_ptr < len(spawns) and spawns[self._spawn_ptr][0] < t + 1:
            _, ri, _ = spawns[self._spawn_ptr]
            self._spawn_ptr += 1
            route = self.schedule.routes[ri].links
            moves = self._route_moves[ri]
            vid = len(self.vehicles)
            lanes = [lane_for(m, net.links[l].lanes, vid) for l, m in zip(route, moves)]
            v = Vehicle(vid, route, moves, lanes, t)
            self.vehicles.append(v)
            self.in_network += 1
            self.backlog[route[0]].append(v)
        for lid, bl in self.backlog.items():
            while bl and self._has_room(bl[0], 0):
                self._place(bl.popleft(), lid, t)

        # free-flow arrivals at the stop line (or trip end)
        for lid, ls in enumerate(self.links):
            travel = self.travel[lid]
            for lane, tr in enumerate(ls.transit):
                while tr and t - tr[0].entry_time >= travel:
                    v = tr.popleft()
                    if self.is_exit[lid]:
                        v.done_time = t
                        self.completed += 1
                        self.in_network -= 1
                        out_events.append({"tick": t, "vehicle": v.id, "event": "complete"})
                    else:
                        ls.queue[lane].append(v)
                        node = net.links[lid].downstream
                        side = self._side_of_link[lid]
                        self.stopline_arrivals[node][(side, movement_class(v.moves[v.leg]))] += 1

        # greens starting this tick: remember who is already waiting
        for n, g in enumerate(greens):
            if g is not None and g != self._prev_green[n]:
                for lid, lane in self._served_lanes(n, g):
                    self._onset[(lid, lane)] = {v.id for v in self.links[lid].queue[lane]}

        # discharge
        for n, g in enumerate(greens):
            if g is None:
                continue
            sides, cls = PHASE_MOVEMENTS[g]
            for side in sides:
                lid = net.intersections[n].incoming[side]
                ls = self.links[lid]
                for lane, q in enumerate(ls.queue):
                    if not q or t - ls.last_discharge[lane] < SATURATION_HEADWAY:
                        continue
                    v = q[0]
                    if movement_class(v.moves[v.leg]) != cls:
                        continue
                    if not self._has_room(v, v.leg + 1):
                        continue
                    q.popleft()
                    ls.last_discharge[lane] = t
                    v.leg += 1
                    self._place(v, v.route[v.leg], t)

        # stopped time and sensor-zone detection
        stopped = 0
        for n in range(net.n_interior):
            waits = self._cycle_waits[n]
            for _, lid in self._approach[n]:
                ls = self.links[lid]
                zone = net.links[lid].length - SENSOR_RANGE
                for q in ls.queue:
                    for v in q:
                        v.wait += 1.0
                        waits[v.id] = waits.get(v.id, 0.0) + 1.0
                    stopped += len(q)
                for tr in ls.transit:
                    for v in tr:
                        if self.speed * (t - v.entry_time) >= zone:
                            waits.setdefault(v.id, 0.0)
        self.waiting_series.append(stopped)

        if self.events is not None:
            for n in range(net.n_interior):
                self.events.append(
                    {
                        "tick": t,
                        "intersection": n,
                        "phase": greens[n],
                        "queues": [len(q) for _, lid in self._approach[n] for q in self.links[lid].queue],
                    }
                )
        self._prev_green = list(greens)
        self.t = t + 1
        return out_events

    def _served_lanes(self, n: int, phase: int) -> list[tuple[int, int]]:
        sides, cls = PHASE_MOVEMENTS[phase]
        out = []
        for side in sides:
            lid = self.net.intersections[n].incoming[side]
            lanes = self.net.links[lid].lanes
            for lane in range(lanes):
                if lanes == 1 or (lane == 0) == (cls == "left"):
                    out.append((lid, lane))
        return out

    def _close_green(self, n: int, phase: int) -> None:
        for lid, lane in self._served_lanes(n, phase):
            onset = self._onset.pop((lid, lane), None)
            if not onset:
                continue
            q = self.links[lid].queue[lane]
            if self.net.links[lid].lanes == 1:
                # single-lane approaches: only the phase's own movement was due
                _, cls = PHASE_MOVEMENTS[phase]
                left = sum(1 for v in q if v.id in onset and movement_class(v.moves[v.leg]) == cls)
            else:
                left = sum(1 for v in q if v.id in onset)
            self._secondary[n] += left

    # -- measurements ------------------------------------------------------

    def sensor_snapshot(self, n: int) -> SensorSnapshot:
        """Lane counts within 100 m of intersection ``n`` at the current time."""
        now = self.t
        net = self.net
        app = []
        for _, lid in self._approach[n]:
            ls = self.links[lid]
            zone = net.links[lid].length - SENSOR_RANGE
            for lane in range(len(ls.queue)):
                c = len(ls.queue[lane])
                c += sum(1 for v in ls.transit[lane] if self.speed * (now - v.entry_time) >= zone)
                app.append(min(c, SENSOR_CAP))
        ext = []
        for _, lid in self._exits[n]:
            ls = self.links[lid]
            length = net.links[lid].length
            # queued vehicle q (0 = head) stands at length - 7.5 (q + 1) from the upstream end
            first_in_zone = max(0, math.ceil((length - SENSOR_RANGE) / VEHICLE_LENGTH - 1))
            for lane in range(len(ls.queue)):
                c = sum(1 for v in ls.transit[lane] if self.speed * (now - v.entry_time) <= SENSOR_RANGE)
                c += max(0, len(ls.queue[lane]) - first_in_zone)
                ext.append(min(c, SENSOR_CAP))
        return SensorSnapshot(now, np.array(app, dtype=float), np.array(ext, dtype=float))

    def measure_secondary_queue(self, n: int, reset: bool = True) -> int:
        """Vehicles queued at a green's onset and still queued when it ended.

        Accumulated over every green that closed since the last reset.
        """
        v = self._secondary[n]
        if reset:
            self._secondary[n] = 0
        return v

    def pop_cycle_waits(self, n: int) -> list[float]:
        """Stopped seconds of every vehicle detected at ``n`` since the last call."""
        waits = self._cycle_waits[n]
        self._cycle_waits[n] = {}
        return [waits[k] for k in sorted(waits)]

    def movement_queues(self, n: int) -> dict[int, float]:
        """Per-phase pressure: sum over served movements of upstream minus downstream queue, floored at 0."""
        ix = self.net.intersections[n]
        pressures = {}
        for phase, (sides, cls) in PHASE_MOVEMENTS.items():
            total = 0
            for side in sides:
                lid = ix.incoming[side]
                heading = self.net.links[lid].heading
                counts: dict[str, int] = {}
                for q in self.links[lid].queue:
                    for v in q:
                        m = v.moves[v.leg]
                        counts[m] = counts.get(m, 0) + 1
                moves = ("left",) if cls == "left" else ("straight", "right")
                for m in moves:
                    up = counts.get(m, 0)
                    out_heading = _turn(heading, m)
                    olid = ix.outgoing[out_heading]
                    down = 0 if self.is_exit[olid] else sum(len(q) for q in self.links[olid].queue)
                    total += up - down
            pressures[phase] = float(max(0, total))
        return pressures

    def write_event_log(self, path) -> None:
        if self.events is None:
            raise RuntimeError("simulation was created without event_log=True")
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.events:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _turn(heading: str, move: str) -> str:
    i = HEADINGS.index(heading)
    return HEADINGS[{"straight": i, "right": (i + 1) % 4, "left": (i - 1) % 4}[move]]


def step(sim: Simulation, greens: list[int | None], dt: int = 1) -> list[dict]:
    return sim.step(greens, dt)


def sensor_snapshot(sim: Simulation, intersection: int) -> SensorSnapshot:
    return sim.sensor_snapshot(intersection)


def measure_secondary_queue(sim: Simulation, intersection: int) -> int:
    return sim.measure_secondary_queue(intersection)


def finalize_episode(sim: Simulation) -> EpisodeMetrics:
    """Network-wide average stopped time per spawned vehicle and throughput."""
    total = float(sum(v.wait for v in sim.vehicles))
    n = sim.spawned
    return EpisodeMetrics(
        average_waiting=total / n if n else 0.0,
        throughput=sim.completed,
        spawned=n,
        total_waiting=total,
        waiting_series=list(sim.waiting_series),
    )
