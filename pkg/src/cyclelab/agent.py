"""Parameterized deep Q-network agent with neighbour attention.

Both networks embed an agent's cycle observation together with a control
digest ``[k, l1..l4, rho]`` through a single leaky-ReLU layer, attend over the
embedded neighbour digests, and feed ``[own embedding, head outputs]`` to a
three-layer perceptron.  The Q-network embeds every candidate ``(k, x_k)`` so
it returns one value per cycle length; the actor embeds the currently
running plan and outputs split logits.
"""

from __future__ import annotations

import contextlib
import copy
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import ops
from .nn.checkpoint import architecture_hash
from .nn.layers import AttentionHeads, DenseLayer
from .nn.optim import Adam, clip_by_global_norm, sgd_step
from .nn.tensor import Tape, Tensor
from .pamdp import DELTA_DIM, N_SLOTS, MultiAgentState, flat_dim
from .signal import CYCLE_SET, HybridAction, N_PHASES

N_ACTIONS = len(CYCLE_SET)
_K = np.array(CYCLE_SET, dtype=float)
_RHO_SCALE = float(max(CYCLE_SET))
ENC_DIM = N_ACTIONS + N_PHASES + 1


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    state_dim: int = 64
    embed_dim: int = 64
    attn_dim: int = 32
    value_dim: int = 32
    n_heads: int = 4
    hidden: int = 128
    per_k_splits: bool = False


@dataclass(frozen=True)
class AgentHyper:
    lr_q: float = 0.001
    lr_actor: float = 0.001
    gamma: float = 0.99
    batch_size: int = 128
    n_step: int = 4
    buffer_capacity: int = 20000
    tau: float = 0.01
    use_target: bool = True
    clip_norm: float | None = 10.0
    optimizer: str = "sgd"  # "sgd" | "adam"
    eps_start: float = 1.0
    eps_end: float = 0.05


def encode_delta(delta: np.ndarray) -> np.ndarray:
    """``[k, l1..l4, rho]`` -> one-hot(k), splits, rho / 120; an all-zero digest stays zero."""
    delta = np.asarray(delta, dtype=float)
    onehot = (delta[..., :1] == _K).astype(float)
    return np.concatenate([onehot, delta[..., 1:5], delta[..., 5:6] / _RHO_SCALE], axis=-1)


@dataclass
class StateBatch:
    local: np.ndarray  # (B, S)
    delta: np.ndarray  # (B, 6)
    nb_local: np.ndarray  # (B, 4, S)
    nb_delta: np.ndarray  # (B, 4, 6)
    mask: np.ndarray  # (B, 4) bool

    def __len__(self) -> int:
        return self.local.shape[0]

    @classmethod
    def of(cls, states: list[MultiAgentState]) -> "StateBatch":
        return cls(
            np.stack([s.local for s in states]),
            np.stack([s.delta for s in states]),
            np.stack([s.nb_local for s in states]),
            np.stack([s.nb_delta for s in states]),
            np.stack([s.mask for s in states]).astype(bool),
        )

    @classmethod
    def from_flat(cls, flat: np.ndarray, state_dim: int) -> "StateBatch":
        B = flat.shape[0]
        S = state_dim
        i = 0
        local = flat[:, i : i + S]; i += S
        delta = flat[:, i : i + DELTA_DIM]; i += DELTA_DIM
        nb_local = flat[:, i : i + N_SLOTS * S].reshape(B, N_SLOTS, S); i += N_SLOTS * S
        nb_delta = flat[:, i : i + N_SLOTS * DELTA_DIM].reshape(B, N_SLOTS, DELTA_DIM); i += N_SLOTS * DELTA_DIM
        mask = flat[:, i : i + N_SLOTS] > 0.5
        return cls(local, delta, nb_local, nb_delta, mask)

    def neighbor_inputs(self) -> np.ndarray:
        return np.concatenate([self.nb_local, encode_delta(self.nb_delta)], axis=-1)


def _mlp(rng, n_in: int, hidden: int, n_out: int, name: str) -> list[DenseLayer]:
    return [
        DenseLayer.init(rng, n_in, hidden, "leaky-relu", f"{name}.F1"),
        DenseLayer.init(rng, hidden, hidden, "leaky-relu", f"{name}.F2"),
        DenseLayer.init(rng, hidden, n_out, "linear", f"{name}.F3"),
    ]


class _AttentiveNet:
    def __init__(self, cfg: NetConfig, rng: np.random.Generator, n_out: int, name: str):
        self.cfg = cfg
        self.name = name
        n_in = cfg.state_dim + ENC_DIM
        self.D = DenseLayer.init(rng, n_in, cfg.embed_dim, "leaky-relu", f"{name}.D")
        self.attn = AttentionHeads.init(rng, cfg.n_heads, cfg.embed_dim, cfg.attn_dim, cfg.value_dim, f"{name}.attn")
        self.F = _mlp(rng, cfg.embed_dim + self.attn.out_dim, cfg.hidden, n_out, name)

    @property
    def params(self) -> list[Tensor]:
        out = list(self.D.params) + list(self.attn.params)
        for layer in self.F:
            out += layer.params
        return out

    def named_params(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params}

    def _trunk(self, own_in, batch: StateBatch):
        e_i = self.D(own_in)
        e_j = self.D(batch.neighbor_inputs())
        b, alpha = self.attn(e_i, e_j, batch.mask)
        h = ops.concat([e_i, b], axis=-1)
        for layer in self.F:
            h = layer(h)
        return h, alpha


class QNetwork(_AttentiveNet):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator, name: str = "q"):
        super().__init__(cfg, rng, N_ACTIONS, name)

    def forward(self, batch: StateBatch, splits, k_index: np.ndarray | None = None):
        """Q values and attention weights.

        ``splits`` is (B, 4) shared across k or (B, 6, 4) per k (array or
        tensor).  Without ``k_index`` returns Q (B, 6) for every cycle
        length; with it, Q (B,) of the indexed cycle length.

        Shared splits take one pass: the embedding sees the splits and the
        agent's running cycle length, and the head emits all six values.
        Per-k splits embed each candidate ``(k, x_k)`` separately.
        """
        B = len(batch)
        splits = splits if isinstance(splits, Tensor) else Tensor(splits)
        if not self.cfg.per_k_splits:
            slot = (batch.delta[:, None, :1] == _K).astype(float)
            splits = ops.reshape(splits, (B, 1, N_PHASES))
            ks = np.zeros((B, 1), dtype=int)
        elif k_index is None:
            ks = np.broadcast_to(np.arange(N_ACTIONS), (B, N_ACTIONS))
            slot = np.eye(N_ACTIONS)[ks]
        else:
            ks = np.asarray(k_index, dtype=int)[:, None]
            slot = np.eye(N_ACTIONS)[ks]
            splits = ops.reshape(splits, (B, 1, N_PHASES))
        K = ks.shape[1]
        pre = np.concatenate([np.broadcast_to(batch.local[:, None, :], (B, K, batch.local.shape[1])), slot], axis=-1)
        rho = np.broadcast_to(batch.delta[:, None, 5:6] / _RHO_SCALE, (B, K, 1))
        own_in = ops.concat([pre, splits, rho], axis=-1)
        out, alpha = self._trunk(own_in, batch)
        if not self.cfg.per_k_splits:
            q = ops.reshape(out, (B, N_ACTIONS))
            if k_index is not None:
                q = ops.take_last(q, np.asarray(k_index, dtype=int))
        else:
            q = ops.take_last(out, ks)
            if k_index is not None:
                q = ops.reshape(q, (B,))
        return q, alpha


class ActorNetwork(_AttentiveNet):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator, name: str = "actor"):
        n_out = N_PHASES * (N_ACTIONS if cfg.per_k_splits else 1)
        super().__init__(cfg, rng, n_out, name)

    def forward(self, batch: StateBatch):
        """Splits (B, 4), or (B, 6, 4) with per-k heads, plus attention weights."""
        B = len(batch)
        own_in = np.concatenate([batch.local, encode_delta(batch.delta)], axis=-1)[:, None, :]
        out, alpha = self._trunk(own_in, batch)
        if self.cfg.per_k_splits:
            logits = ops.reshape(out, (B, N_ACTIONS, N_PHASES))
        else:
            logits = ops.reshape(out, (B, N_PHASES))
        return ops.softmax(logits), alpha


@contextlib.contextmanager
def frozen(params: list[Tensor]):
    """Temporarily stop gradients flowing into ``params``."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


@dataclass
class AgentParams:
    q: QNetwork
    actor: ActorNetwork
    q_target: QNetwork | None = None
    actor_target: ActorNetwork | None = None

    @classmethod
    def init(cls, cfg: NetConfig, rng: np.random.Generator, use_target: bool = True) -> "AgentParams":
        q = QNetwork(cfg, rng)
        actor = ActorNetwork(cfg, rng)
        if not use_target:
            return cls(q, actor)
        return cls(q, actor, copy.deepcopy(q), copy.deepcopy(actor))

    @property
    def cfg(self) -> NetConfig:
        return self.q.cfg

    def target_q(self) -> QNetwork:
        return self.q_target if self.q_target is not None else self.q

    def target_actor(self) -> ActorNetwork:
        return self.actor_target if self.actor_target is not None else self.actor

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("online", self.q), ("online", self.actor), ("target", self.q_target), ("target", self.actor_target)):
            if net is None:
                continue
            for name, p in net.named_params().items():
                out[f"{prefix}/{name}"] = p.value
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for prefix, net in (("online", self.q), ("online", self.actor), ("target", self.q_target), ("target", self.actor_target)):
            if net is None:
                continue
            for name, p in net.named_params().items():
                p.value = np.array(tensors[f"{prefix}/{name}"], dtype=float)

    def arch_hash(self) -> str:
        return architecture_hash({k: v.shape for k, v in self.tensors().items()}, asdict(self.cfg))

    def param_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in sorted(self.tensors().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


# -- forward helpers on raw states ------------------------------------------


def _as_batch(params: AgentParams, s) -> tuple[StateBatch, bool]:
    if isinstance(s, StateBatch):
        return s, False
    if isinstance(s, MultiAgentState):
        return StateBatch.of([s]), True
    return StateBatch.of(list(s)), False


def actor_splits(params: AgentParams, s) -> np.ndarray:
    """Deterministic split vectors; (4,) or (6, 4) for a single state."""
    batch, single = _as_batch(params, s)
    x, _ = params.actor.forward(batch)
    return x.value[0] if single else x.value


def q_values(params: AgentParams, s, splits) -> np.ndarray:
    """Q(s, k, x_k) for every cycle length k; (6,) for a single state."""
    batch, single = _as_batch(params, s)
    x = np.asarray(splits, dtype=float)
    if single:
        x = x[None]
    q, _ = params.q.forward(batch, x)
    return q.value[0] if single else q.value


def greedy(params: AgentParams, s: MultiAgentState) -> tuple[HybridAction, np.ndarray, np.ndarray]:
    """Greedy hybrid action, its Q values and the attention weights of the chosen k (mean over heads)."""
    batch = StateBatch.of([s])
    x, _ = params.actor.forward(batch)
    q, alpha = params.q.forward(batch, x.value)
    qv = q.value[0]
    k_idx = int(np.argmax(qv))
    return _action(x.value[0], k_idx), qv, _chosen_attention(alpha, k_idx)


def _chosen_attention(alpha: np.ndarray, k_idx: int) -> np.ndarray:
    """Head-averaged neighbour weights (4,) of the embedding that produced Q of ``k_idx``."""
    row = k_idx if alpha.shape[1] > 1 else 0
    return alpha[0, row].mean(axis=0)


def _action(x: np.ndarray, k_idx: int) -> HybridAction:
    xs = x[k_idx] if x.ndim == 2 else x
    return HybridAction(CYCLE_SET[k_idx], xs)


def select_action(params: AgentParams, s: MultiAgentState, eps: float, rng: np.random.Generator) -> HybridAction:
    """Epsilon-greedy over cycle lengths; splits always come from the actor.

    Greedy ties resolve to the shortest cycle.
    """
    action, _, _ = select_action_with_info(params, s, eps, rng)
    return action


def select_action_with_info(params, s, eps, rng):
    if not 0.0 <= eps <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    batch = StateBatch.of([s])
    x, _ = params.actor.forward(batch)
    q, alpha = params.q.forward(batch, x.value)
    qv = q.value[0]
    if rng.random() < eps:
        k_idx = int(rng.integers(N_ACTIONS))
    else:
        k_idx = int(np.argmax(qv))
    return _action(x.value[0], k_idx), qv, _chosen_attention(alpha, k_idx)


# -- replay and targets -----------------------------------------------------


@dataclass
class Transition:
    state: MultiAgentState
    k: int
    splits: np.ndarray
    reward: float
    next_state: MultiAgentState
    episode: int = 0
    agent: int = 0
    cycle: int = 0


class ReplayBuffer:
    """Ring buffer of n-step samples with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int):
        self.capacity = capacity
        self.state_dim = state_dim
        d = flat_dim(state_dim)
        self.s = np.zeros((capacity, d))
        self.s2 = np.zeros((capacity, d))
        self.k = np.zeros(capacity, dtype=int)
        self.x = np.zeros((capacity, N_PHASES))
        self.ret = np.zeros(capacity)
        self.disc = np.zeros(capacity)
        self.size = 0
        self.ptr = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s: MultiAgentState, k_idx: int, x: np.ndarray, ret: float, s2: MultiAgentState, disc: float) -> None:
        i = self.ptr
        self.s[i] = s.flat()
        self.s2[i] = s2.flat()
        self.k[i] = k_idx
        self.x[i] = x
        self.ret[i] = ret
        self.disc[i] = disc
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        if self.size < n:
            raise EmptyBatchError(f"buffer holds {self.size} < {n} samples")
        idx = rng.choice(self.size, size=n, replace=False)
        return (
            StateBatch.from_flat(self.s[idx], self.state_dim),
            self.k[idx],
            self.x[idx],
            self.ret[idx],
            StateBatch.from_flat(self.s2[idx], self.state_dim),
            self.disc[idx],
        )


def discounted_sum(rewards, gamma: float) -> float:
    return float(sum(gamma**i * r for i, r in enumerate(rewards)))


class NStepWindow:
    """Turns an agent's stream of 1-step transitions into n-step replay samples.

    Windows never cross an episode boundary; at the end of an episode the
    leftover windows are flushed as truncated returns without bootstrap.
    With ``bootstrap_tail`` they instead bootstrap from the last next state
    with discount ``gamma**m`` for a window of ``m`` rewards, which treats the
    horizon as a time limit rather than a terminal state.
    """

    def __init__(self, n: int, gamma: float, bootstrap_tail: bool = False):
        self.n = n
        self.gamma = gamma
        self.bootstrap_tail = bootstrap_tail
        self.items: deque[Transition] = deque()

    def push(self, tr: Transition):
        """Returns the completed sample ``(first, returns, last_next_state, discount)`` or None."""
        self.items.append(tr)
        if len(self.items) < self.n:
            return None
        rewards = [t.reward for t in self.items]
        first = self.items.popleft()
        return first, discounted_sum(rewards, self.gamma), tr.next_state, self.gamma**self.n

    def flush(self):
        out = []
        while self.items:
            rewards = [t.reward for t in self.items]
            last = self.items[-1].next_state
            first = self.items.popleft()
            if self.bootstrap_tail:
                out.append((first, discounted_sum(rewards, self.gamma), last, self.gamma ** len(rewards)))
            else:
                out.append((first, discounted_sum(rewards, self.gamma), first.next_state, 0.0))
        return out


def max_target_q(params: AgentParams, next_batch: StateBatch) -> np.ndarray:
    """``max_k Q^-(s', k, mu^-(s'))`` per row."""
    x, _ = params.target_actor().forward(next_batch)
    q, _ = params.target_q().forward(next_batch, x.value)
    return q.value.max(axis=1)


def n_step_target(rewards, gamma: float, n: int, bootstrap_value: float | None) -> float:
    """``sum_{i<n} gamma^i R_i + gamma^n * bootstrap``; ``None`` bootstrap means a truncated window."""
    r = list(rewards)
    if len(r) > n:
        raise ValueError("window longer than n")
    y = discounted_sum(r, gamma)
    if bootstrap_value is not None:
        if len(r) != n:
            raise ValueError("bootstrapped windows need exactly n rewards")
        y += gamma**n * bootstrap_value
    return y


def compute_targets(params: AgentParams, ret: np.ndarray, next_batch: StateBatch, disc: np.ndarray) -> np.ndarray:
    boot = max_target_q(params, next_batch)
    return ret + disc * boot


def losses(params: AgentParams, batch: StateBatch, k_idx, splits, y, tape_q: Tape | None = None, tape_a: Tape | None = None):
    """Critic loss ``mean 1/2 (Q - y)^2`` and actor loss ``mean -sum_k Q(s, k, mu(s))``.

    Returns ``(l_w, l_theta, q_tensor_loss, actor_tensor_loss, attention)``;
    pass active tapes to differentiate.  The actor loss never reaches the
    Q-network weights.
    """
    if len(batch) == 0:
        raise EmptyBatchError("empty batch")
    q, alpha = params.q.forward(batch, splits, k_index=k_idx)
    lw = ops.mean(ops.mul(ops.square(ops.sub(q, np.asarray(y, dtype=float))), 0.5))
    with frozen(params.q.params):
        mu, _ = params.actor.forward(batch)
        qa, _ = params.q.forward(batch, mu)
        la = ops.mul(ops.mean(ops.total(qa, axis=1)), -1.0)
    return float(lw.value), float(la.value), lw, la, alpha


@dataclass
class ExplorationSchedule:
    total_steps: int
    start: float = 1.0
    end: float = 0.05
    decay_fraction: float = 0.8

    def __call__(self, step: int) -> float:
        horizon = max(1.0, self.decay_fraction * self.total_steps)
        frac = min(1.0, max(0.0, step / horizon))
        return float(self.start + (self.end - self.start) * frac)


def _entropy(alpha: np.ndarray, mask: np.ndarray) -> float:
    a = alpha  # (B, K, H, J)
    m = np.broadcast_to(mask[:, None, None, :], a.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(m & (a > 0), a * np.log(np.where(a > 0, a, 1.0)), 0.0).sum(axis=-1)
    valid = mask.any(axis=1)
    if not valid.any():
        return 0.0
    return float(ent[valid].mean())


@dataclass
class PDQNAgent:
    """Online/target parameters, replay and optimizer state of one learner."""

    cfg: NetConfig
    hyper: AgentHyper
    seed: int
    agent_id: int = 0
    params: AgentParams = field(init=False)
    buffer: ReplayBuffer = field(init=False)
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        init_rng = np.random.default_rng([self.seed, self.agent_id, 0])
        self.params = AgentParams.init(self.cfg, init_rng, self.hyper.use_target)
        self.buffer = ReplayBuffer(self.hyper.buffer_capacity, self.cfg.state_dim)
        self.rng = np.random.default_rng([self.seed, self.agent_id, 1])
        self.updates = 0
        if self.hyper.optimizer == "adam":
            self._opt_q = Adam(self.params.q.params, self.hyper.lr_q)
            self._opt_a = Adam(self.params.actor.params, self.hyper.lr_actor)
        elif self.hyper.optimizer == "sgd":
            self._opt_q = self._opt_a = None
        else:
            raise ValueError(f"unknown optimizer {self.hyper.optimizer!r}")

    def update(self) -> dict:
        """One minibatch step of both networks followed by a soft target update."""
        return update(self)


def update(agent: PDQNAgent) -> dict:
    h = agent.hyper
    p = agent.params
    if len(agent.buffer) < h.batch_size:
        return {"updated": False, "reason": "buffer below batch size", "size": len(agent.buffer)}
    batch, k_idx, x, ret, next_batch, disc = agent.buffer.sample(h.batch_size, agent.rng)
    y = compute_targets(p, ret, next_batch, disc)

    with Tape() as tq:
        q, alpha = p.q.forward(batch, x, k_index=k_idx)
        lw = ops.mean(ops.mul(ops.square(ops.sub(q, y)), 0.5))
    gq = tq.gradients(lw, p.q.params)
    with frozen(p.q.params), Tape() as ta:
        mu, _ = p.actor.forward(batch)
        qa, _ = p.q.forward(batch, mu)
        la = ops.mul(ops.mean(ops.total(qa, axis=1)), -1.0)
    ga = ta.gradients(la, p.actor.params)

    gq, nq = clip_by_global_norm(gq, h.clip_norm)
    ga, na = clip_by_global_norm(ga, h.clip_norm)
    if agent._opt_q is None:
        sgd_step(p.q.params, gq, h.lr_q)
        sgd_step(p.actor.params, ga, h.lr_actor)
    else:
        agent._opt_q.step(gq)
        agent._opt_a.step(ga)
    if p.q_target is not None:
        soft_update(p.q_target.params, p.q.params, h.tau)
        soft_update(p.actor_target.params, p.actor.params, h.tau)
    agent.updates += 1
    return {
        "updated": True,
        "loss_q": float(lw.value),
        "loss_actor": float(la.value),
        "grad_norm_q": nq,
        "grad_norm_actor": na,
        "attention_entropy": _entropy(alpha, batch.mask),
    }


def soft_update(target: list[Tensor], online: list[Tensor], tau: float) -> None:
    for t, o in zip(target, online):
        t.value = (1.0 - tau) * t.value + tau * o.value
