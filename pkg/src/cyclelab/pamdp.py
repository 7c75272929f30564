"""Cycle-level observations, rewards and neighbour information sharing."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .grid import HEADINGS, GridNetwork
from .sim import SENSOR_CAP, SensorSnapshot

N_SLOTS = 4  # neighbour slots, ordered N, E, S, W
DELTA_DIM = 6  # [k, l1, l2, l3, l4, rho]


class ArityError(ValueError):
    pass


@dataclass(frozen=True)
class PamdpParams:
    lambda_p: float = 10.0
    phi: float = 0.9
    gamma: float = 0.99

    def __post_init__(self):
        if self.lambda_p <= 0:
            raise ValueError("lambda_p must be positive")
        if not 0.0 < self.phi < 1.0:
            raise ValueError("phi must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class LocalState:
    raw: np.ndarray  # vehicle counts, phase-major: [approach lanes, exit lanes] per phase
    times: tuple[int, ...]

    @property
    def normalized(self) -> np.ndarray:
        return self.raw / SENSOR_CAP

    @property
    def dim(self) -> int:
        return self.raw.size


def assemble_local_state(snapshots: list[SensorSnapshot]) -> LocalState:
    """Concatenate the four phase-end snapshots of one cycle in phase order."""
    if len(snapshots) != 4:
        raise ArityError(f"need exactly 4 phase-end snapshots, got {len(snapshots)}")
    parts = []
    for s in snapshots:
        parts.append(s.approach)
        parts.append(s.exit)
    return LocalState(np.concatenate(parts).astype(float), tuple(s.time for s in snapshots))


def local_reward(cycle_waits, n_secondary: int, p: PamdpParams | None = None) -> float:
    """``-(mean stopped time of detected vehicles) - lambda_p * secondary-queue count``."""
    p = p or PamdpParams()
    waits = list(cycle_waits)
    w = sum(waits) / len(waits) if waits else 0.0
    return -w - p.lambda_p * n_secondary


def multi_reward(own: float, neighbor_rewards, p: PamdpParams | None = None) -> float:
    """Neighbour-discounted reward ``(R_i + phi * sum_j R_j) / (|N_i| + 1)``."""
    p = p or PamdpParams()
    rs = list(neighbor_rewards)
    return (own + p.phi * sum(rs)) / (len(rs) + 1)


@dataclass
class NeighborDigest:
    local: np.ndarray  # (4, state_dim) normalized counts, zero where masked
    delta: np.ndarray  # (4, 6) raw [k, l1..l4, rho], zero where masked
    mask: np.ndarray  # (4,) bool
    rewards: list[float | None]


@dataclass
class MultiAgentState:
    local: np.ndarray  # (state_dim,) normalized
    delta: np.ndarray  # (6,) own [k, l1..l4, rho]
    nb_local: np.ndarray  # (4, state_dim)
    nb_delta: np.ndarray  # (4, 6)
    mask: np.ndarray  # (4,) bool

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.local, self.delta, self.nb_local.ravel(), self.nb_delta.ravel(), self.mask.astype(float)]
        )

    @classmethod
    def from_flat(cls, v: np.ndarray, state_dim: int) -> "MultiAgentState":
        i = 0
        local = v[i : i + state_dim]; i += state_dim
        delta = v[i : i + DELTA_DIM]; i += DELTA_DIM
        nb_local = v[i : i + N_SLOTS * state_dim].reshape(N_SLOTS, state_dim); i += N_SLOTS * state_dim
        nb_delta = v[i : i + N_SLOTS * DELTA_DIM].reshape(N_SLOTS, DELTA_DIM); i += N_SLOTS * DELTA_DIM
        mask = v[i : i + N_SLOTS] > 0.5
        return cls(local, delta, nb_local, nb_delta, mask)


def flat_dim(state_dim: int) -> int:
    return state_dim + DELTA_DIM + N_SLOTS * (state_dim + DELTA_DIM) + N_SLOTS


@dataclass
class _Publication:
    time: int
    local: np.ndarray
    reward: float


@dataclass
class InfoHub:
    """What each intersection has broadcast: completed-cycle states, rewards and its clock.

    Clock samples are kept for ``max_delay`` seconds so lagged reads see the
    neighbour's ``rho`` as it was at the lagged instant.
    """

    net: GridNetwork
    state_dim: int
    max_delay: int = 0
    pubs: list[list[_Publication]] = field(init=False)
    clock: list[deque] = field(init=False)

    def __post_init__(self):
        n = self.net.n_interior
        self.pubs = [[] for _ in range(n)]
        # up to two samples per second: before and after a cycle swap
        self.clock = [deque(maxlen=2 * self.max_delay + 4) for _ in range(n)]

    def record_control(self, n: int, time: int, k: int, splits, rho: int) -> None:
        delta = np.zeros(DELTA_DIM)
        delta[0] = k
        delta[1:5] = splits
        delta[5] = rho
        self.clock[n].append((time, delta))

    def publish(self, n: int, time: int, local: np.ndarray, reward: float) -> None:
        self.pubs[n].append(_Publication(time, np.asarray(local, dtype=float), float(reward)))

    def _latest(self, n: int, at: int) -> _Publication | None:
        for p in reversed(self.pubs[n]):
            if p.time <= at:
                return p
        return None

    def _clock_at(self, n: int, at: int) -> np.ndarray | None:
        for time, delta in reversed(self.clock[n]):
            if time <= at:
                return delta
        return None

    def delta(self, n: int, at: int) -> np.ndarray:
        d = self._clock_at(n, at)
        return np.zeros(DELTA_DIM) if d is None else d.copy()


def share_info(hub: InfoHub, agent: int, now: int, transmission_delay: int = 0, enabled: bool = True) -> NeighborDigest:
    """Neighbour digests as seen by ``agent`` at ``now`` through a lagged channel.

    Slots without a neighbour, without a completed cycle yet, or with sharing
    disabled are masked and zero.
    """
    local = np.zeros((N_SLOTS, hub.state_dim))
    delta = np.zeros((N_SLOTS, DELTA_DIM))
    mask = np.zeros(N_SLOTS, dtype=bool)
    rewards: list[float | None] = [None] * N_SLOTS
    if enabled:
        at = now - transmission_delay
        nbrs = hub.net.intersections[agent].neighbors
        for slot, side in enumerate(HEADINGS):
            j = nbrs[side]
            if j is None:
                continue
            pub = hub._latest(j, at)
            d = hub._clock_at(j, at)
            if pub is None or d is None:
                continue
            local[slot] = pub.local
            delta[slot] = d
            mask[slot] = True
            rewards[slot] = pub.reward
    return NeighborDigest(local, delta, mask, rewards)
