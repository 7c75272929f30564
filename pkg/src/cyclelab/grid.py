"""Synthetic grid road network and time-varying origin-destination demand.

Geometry conventions
--------------------
Interior intersections sit at ``(row, col)`` with row 0 on the north edge and
col 0 on the west edge; the node id is ``row * cols + col``.  Every interior
intersection has one boundary node beyond each grid edge it touches, so each
intersection always has four approaches and four exits.

Boundary nodes are labeled ``1 .. 2*rows + 2*cols`` clockwise starting at the
northwest corner: the north edge west-to-east, the east edge north-to-south,
the south edge east-to-west and the west edge south-to-north.  Their node ids
are ``rows * cols + label - 1``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SENSOR_RANGE = 100.0
DEMAND_WINDOW = 300.0
SCHEMA_VERSION = 1

# unit vectors as (d_row, d_col); heading is the direction of travel
HEADINGS = ("N", "E", "S", "W")
_DELTA = {"N": (-1, 0), "E": (0, 1), "S": (1, 0), "W": (0, -1)}
_OPPOSITE = {"N": "S", "E": "W", "S": "N", "W": "E"}
_LEFT_OF = {"N": "W", "E": "N", "S": "E", "W": "S"}
_RIGHT_OF = {"N": "E", "E": "S", "S": "W", "W": "N"}


class GridError(ValueError):
    """Raised for invalid grid geometry or routing requests."""


class DimensionTooSmallError(GridError):
    pass


class GeometryError(GridError):
    pass


class UnreachableError(GridError):
    pass


def movement(in_heading: str, out_heading: str) -> str:
    """Classify a turn as ``"straight"``, ``"left"``, ``"right"`` or ``"uturn"``."""
    if in_heading == out_heading:
        return "straight"
    if _LEFT_OF[in_heading] == out_heading:
        return "left"
    if _RIGHT_OF[in_heading] == out_heading:
        return "right"
    return "uturn"


def approach_side(in_heading: str) -> str:
    """Compass side an incoming link arrives from (a southbound link comes from N)."""
    return _OPPOSITE[in_heading]


@dataclass(frozen=True)
class IntersectionDescriptor:
    id: int
    row: int
    col: int
    # link ids keyed by compass side: incoming[side] arrives from that side,
    # outgoing[side] departs towards it
    incoming: dict[str, int]
    outgoing: dict[str, int]
    # neighbouring interior intersection per side, None at the grid edge
    neighbors: dict[str, int | None]


@dataclass(frozen=True)
class LinkDescriptor:
    id: int
    upstream: int
    downstream: int
    heading: str
    length: float
    lanes: int


@dataclass
class GridNetwork:
    rows: int
    cols: int
    link_length: float
    lanes_per_direction: int
    speed_limit: float
    intersections: list[IntersectionDescriptor]
    links: list[LinkDescriptor]
    boundary_nodes: list[int]
    # boundary node id -> (edge, position along the edge in label order)
    boundary_edge: dict[int, tuple[str, int]] = field(default_factory=dict)

    @property
    def n_interior(self) -> int:
        return self.rows * self.cols

    def is_boundary(self, node: int) -> bool:
        return node >= self.n_interior

    def label(self, node: int) -> int:
        """Clockwise boundary label (1-based) of a boundary node."""
        if not self.is_boundary(node):
            raise GridError(f"node {node} is not a boundary node")
        return node - self.n_interior + 1

    def node_of_label(self, label: int) -> int:
        if not 1 <= label <= len(self.boundary_nodes):
            raise GridError(f"boundary label {label} out of range")
        return self.n_interior + label - 1

    def edge_nodes(self, edge: str) -> list[int]:
        """Boundary nodes on one edge (``"N"``, ``"E"``, ``"S"``, ``"W"``) in label order."""
        nodes = [n for n, (e, _) in self.boundary_edge.items() if e == edge]
        return sorted(nodes, key=lambda n: self.boundary_edge[n][1])

    def out_links(self, node: int) -> list[int]:
        return [l.id for l in self.links if l.upstream == node]

    def in_links(self, node: int) -> list[int]:
        return [l.id for l in self.links if l.downstream == node]

    def travel_time(self, link: int) -> float:
        return self.links[link].length / self.speed_limit

    def to_dict(self) -> dict:
        return {
            "schema": "cyclelab.grid",
            "schema_version": SCHEMA_VERSION,
            "rows": self.rows,
            "cols": self.cols,
            "link_length": self.link_length,
            "lanes_per_direction": self.lanes_per_direction,
            "speed_limit": self.speed_limit,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridNetwork":
        _check_schema(data, "cyclelab.grid")
        return build_grid(
            data["rows"],
            data["cols"],
            data["link_length"],
            data["lanes_per_direction"],
            data["speed_limit"],
        )


def _check_schema(data: dict, name: str) -> None:
    if data.get("schema") != name:
        raise GridError(f"expected schema {name!r}, got {data.get('schema')!r}")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise GridError(f"unsupported schema_version {data.get('schema_version')!r}")


def build_grid(
    rows: int,
    cols: int,
    link_length: float = 300.0,
    lanes: int = 2,
    speed_limit: float = 20.0,
) -> GridNetwork:
    """Build a ``rows x cols`` grid of signalized intersections.

    Raises :class:`DimensionTooSmallError` below 2x2 and :class:`GeometryError`
    when links are shorter than the 100 m sensor range.
    """
    if rows < 2 or cols < 2:
        raise DimensionTooSmallError(f"grid must be at least 2x2, got {rows}x{cols}")
    if link_length < SENSOR_RANGE:
        raise GeometryError(f"link_length {link_length} m is below the {SENSOR_RANGE} m sensor range")
    if speed_limit <= 0:
        raise GeometryError("speed_limit must be positive")
    if lanes < 1:
        raise GeometryError("need at least one lane per direction")

    n_int = rows * cols
    boundary: list[tuple[str, int, int]] = []  # (edge, row, col) of the adjacent intersection
    boundary += [("N", 0, c) for c in range(cols)]
    boundary += [("E", r, cols - 1) for r in range(rows)]
    boundary += [("S", rows - 1, c) for c in reversed(range(cols))]
    boundary += [("W", r, 0) for r in reversed(range(rows))]
    boundary_id = {(edge, r, c): n_int + i for i, (edge, r, c) in enumerate(boundary)}
    boundary_edge: dict[int, tuple[str, int]] = {}
    edge_pos: dict[str, int] = {}
    for i, (edge, _, _) in enumerate(boundary):
        boundary_edge[n_int + i] = (edge, edge_pos.get(edge, 0))
        edge_pos[edge] = edge_pos.get(edge, 0) + 1

    def node_at(r: int, c: int, side: str) -> int:
        dr, dc = _DELTA[side]
        rr, cc = r + dr, c + dc
        if 0 <= rr < rows and 0 <= cc < cols:
            return rr * cols + cc
        return boundary_id[(side, r, c)]

    links: list[LinkDescriptor] = []
    link_of: dict[tuple[int, int], int] = {}

    def add_link(u: int, v: int, heading: str) -> int:
        key = (u, v)
        if key not in link_of:
            link_of[key] = len(links)
            links.append(LinkDescriptor(len(links), u, v, heading, float(link_length), lanes))
        return link_of[key]

    incoming: dict[int, dict[str, int]] = {n: {} for n in range(n_int)}
    outgoing: dict[int, dict[str, int]] = {n: {} for n in range(n_int)}
    for r in range(rows):
        for c in range(cols):
            n = r * cols + c
            for side in HEADINGS:
                other = node_at(r, c, side)
                outgoing[n][side] = add_link(n, other, side)
                incoming[n][side] = add_link(other, n, _OPPOSITE[side])

    intersections = []
    for r in range(rows):
        for c in range(cols):
            n = r * cols + c
            nbrs: dict[str, int | None] = {}
            for side in HEADINGS:
                other = node_at(r, c, side)
                nbrs[side] = other if other < n_int else None
            intersections.append(
                IntersectionDescriptor(n, r, c, dict(incoming[n]), dict(outgoing[n]), nbrs)
            )
    return GridNetwork(
        rows=rows,
        cols=cols,
        link_length=float(link_length),
        lanes_per_direction=lanes,
        speed_limit=float(speed_limit),
        intersections=intersections,
        links=links,
        boundary_nodes=[n_int + i for i in range(len(boundary))],
        boundary_edge=boundary_edge,
    )


# -- routing -----------------------------------------------------------------

_TIE_ORDER = ("N", "E", "S", "W")


def shortest_route(net: GridNetwork, origin: int, dest: int) -> list[int]:
    """Minimal-link-count route between two boundary nodes as a list of link ids.

    Among equally short routes the one that goes straight ahead is preferred at
    every intersection, then the headings N, E, S, W in that order.
    """
    if origin == dest:
        raise GridError("origin and destination must differ")
    if not (net.is_boundary(origin) and net.is_boundary(dest)):
        raise GridError("routes run between boundary nodes")

    # reverse BFS: distance (in links) from every node to dest; boundary nodes
    # other than dest are sinks and cannot be passed through
    dist = {dest: 0}
    frontier = deque([dest])
    preds: dict[int, list[LinkDescriptor]] = {}
    for link in net.links:
        preds.setdefault(link.downstream, []).append(link)
    while frontier:
        v = frontier.popleft()
        for link in preds.get(v, []):
            u = link.upstream
            if u in dist:
                continue
            if net.is_boundary(u) and u != origin:
                continue
            dist[u] = dist[v] + 1
            frontier.append(u)
    if origin not in dist:
        raise UnreachableError(f"no route from {origin} to {dest}")

    route: list[int] = []
    node = origin
    heading: str | None = None
    while node != dest:
        options = [net.links[l] for l in net.out_links(node)]
        options = [l for l in options if dist.get(l.downstream, -1) == dist[node] - 1]
        if heading is not None:
            options = [l for l in options if movement(heading, l.heading) != "uturn"]
        if not options:
            raise UnreachableError(f"no route from {origin} to {dest}")

        def rank(link: LinkDescriptor) -> tuple[int, int]:
            straight = 0 if link.heading == heading else 1
            return straight, _TIE_ORDER.index(link.heading)

        best = min(options, key=rank)
        route.append(best.id)
        node = best.downstream
        heading = best.heading
    return route


# -- demand ------------------------------------------------------------------


@dataclass(frozen=True)
class FlowGroup:
    id: str
    origins: tuple[int, ...]
    destinations: tuple[int, ...]
    upper_bound: float  # vehicles/hour per route


# group id -> (origin edge, destination edge); F1 southbound, F2 northbound,
# f1 eastbound, f2 westbound
GROUP_EDGES = {"F1": ("N", "S"), "F2": ("S", "N"), "f1": ("W", "E"), "f2": ("E", "W")}
TABLE1_BOUNDS = {"F1": 300.0, "F2": 350.0, "f1": 200.0, "f2": 250.0}


def default_flow_groups(
    net: GridNetwork, bounds: dict[str, float] | None = None
) -> list[FlowGroup]:
    """The four O-D flow groups; ``bounds`` defaults to the Table 1 upper bounds."""
    bounds = dict(TABLE1_BOUNDS if bounds is None else bounds)
    groups = []
    for gid, (src, dst) in GROUP_EDGES.items():
        groups.append(
            FlowGroup(gid, tuple(net.edge_nodes(src)), tuple(net.edge_nodes(dst)), float(bounds[gid]))
        )
    return groups


@dataclass
class RouteDemand:
    group: str
    origin: int
    destination: int
    links: list[int]
    arrivals: list[float]


@dataclass
class DemandSchedule:
    episode_seed: int
    horizon: float
    # group id -> per-window demand factor
    sigma: dict[str, list[float]]
    routes: list[RouteDemand]

    def n_vehicles(self) -> int:
        return sum(len(r.arrivals) for r in self.routes)

    def to_dict(self) -> dict:
        return {
            "schema": "cyclelab.demand",
            "schema_version": SCHEMA_VERSION,
            "episode_seed": self.episode_seed,
            "horizon": self.horizon,
            "sigma": self.sigma,
            "routes": [
                {
                    "group": r.group,
                    "origin": r.origin,
                    "destination": r.destination,
                    "links": r.links,
                    # repr round-trips floats exactly
                    "arrivals": [float(a) for a in r.arrivals],
                }
                for r in self.routes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DemandSchedule":
        _check_schema(data, "cyclelab.demand")
        routes = [
            RouteDemand(r["group"], r["origin"], r["destination"], list(r["links"]), list(r["arrivals"]))
            for r in data["routes"]
        ]
        return cls(data["episode_seed"], data["horizon"], dict(data["sigma"]), routes)


def generate_demand_schedule(
    net: GridNetwork,
    groups: list[FlowGroup],
    seed: int,
    horizon: float,
    sigma_override: float | None = None,
) -> DemandSchedule:
    """Draw destinations, demand factors and Poisson arrival times for one episode.

    ``sigma_override`` pins every demand factor to a constant (test hook).
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = np.random.default_rng(seed)
    n_windows = int(np.ceil(horizon / DEMAND_WINDOW))
    sigma: dict[str, list[float]] = {}
    routes: list[RouteDemand] = []
    for g in groups:
        if not g.origins or not g.destinations:
            raise ValueError(f"flow group {g.id} needs origins and destinations")
        dest_idx = rng.integers(0, len(g.destinations), size=len(g.origins))
        s = rng.uniform(0.0, 1.0, size=n_windows)
        if sigma_override is not None:
            s = np.full(n_windows, float(sigma_override))
        sigma[g.id] = [float(v) for v in s]
        for origin, di in zip(g.origins, dest_idx):
            dest = g.destinations[int(di)]
            arrivals: list[float] = []
            for w in range(n_windows):
                start = w * DEMAND_WINDOW
                end = min(horizon, start + DEMAND_WINDOW)
                mean = g.upper_bound * s[w] * (end - start) / 3600.0
                count = int(rng.poisson(mean))
                times = np.sort(rng.uniform(start, end, size=count))
                arrivals.extend(float(t) for t in times if t < horizon)
            routes.append(
                RouteDemand(g.id, origin, dest, shortest_route(net, origin, dest), arrivals)
            )
    return DemandSchedule(int(seed), float(horizon), sigma, routes)


def save_scenario(path: str | Path, net: GridNetwork, schedule: DemandSchedule) -> None:
    """Write network and demand schedule as one JSON scenario file."""
    payload = {
        "schema": "cyclelab.scenario",
        "schema_version": SCHEMA_VERSION,
        "network": net.to_dict(),
        "demand": schedule.to_dict(),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_scenario(path: str | Path) -> tuple[GridNetwork, DemandSchedule]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    _check_schema(data, "cyclelab.scenario")
    return GridNetwork.from_dict(data["network"]), DemandSchedule.from_dict(data["demand"])
