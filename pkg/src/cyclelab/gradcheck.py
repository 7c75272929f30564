"""Central finite-difference check of the tape gradients of both networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agent import ActorNetwork, NetConfig, QNetwork, StateBatch
from .nn import ops
from .nn.tensor import Tape, Tensor
from .signal import CYCLE_SET

TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    seed: int
    network: str
    tensor: str  # "all" for the whole network
    rel_error: float


def random_batch(rng: np.random.Generator, batch: int, state_dim: int) -> StateBatch:
    k = rng.choice(CYCLE_SET, size=batch).astype(float)
    splits = rng.dirichlet(np.ones(4), size=batch)
    rho = rng.uniform(0, k)
    delta = np.column_stack([k, splits, rho])
    nb_k = rng.choice(CYCLE_SET, size=(batch, 4)).astype(float)
    nb_delta = np.concatenate(
        [nb_k[..., None], rng.dirichlet(np.ones(4), size=(batch, 4)), rng.uniform(0, nb_k)[..., None]], axis=-1
    )
    mask = rng.random((batch, 4)) < 0.7
    mask[0] = True
    nb_local = rng.random((batch, 4, state_dim)) * mask[..., None]
    nb_delta = nb_delta * mask[..., None]
    return StateBatch(rng.random((batch, state_dim)), delta, nb_local, nb_delta, mask)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / scale)


def _check(loss_fn, params: list[Tensor], rng, coords: int, h: float) -> list[tuple[str, float]]:
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.gradients(loss, params)
    out = []
    for p, g in zip(params, grads):
        flat = p.value.reshape(-1)
        idx = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().value)
            flat[i] = old - h
            down = float(loss_fn().value)
            flat[i] = old
            num[j] = (up - down) / (2 * h)
        out.append((p.name or "input", g.reshape(-1)[idx], num))
    return out


def _aggregate(parts) -> float:
    """Norm-wise relative error over the sampled coordinates of every tensor of one network."""
    a = np.concatenate([x[1] for x in parts])
    b = np.concatenate([x[2] for x in parts])
    return _rel(a, b)


def grad_check(seed: int, cfg: NetConfig | None = None, batch: int = 3, coords: int = 3, h: float = 1e-6) -> list[GradCheckResult]:
    """Relative errors of every parameter tensor of a Q-network and an actor, plus the split input."""
    cfg = cfg or NetConfig()
    rng = np.random.default_rng(seed)
    q = QNetwork(cfg, rng)
    actor = ActorNetwork(cfg, rng)
    # the default init leaves biases at zero; randomize them so their gradients are exercised
    for p in q.params + actor.params:
        p.value = p.value + rng.normal(0, 0.05, p.value.shape)
    b = random_batch(rng, batch, cfg.state_dim)
    split_shape = (batch, len(CYCLE_SET), 4) if cfg.per_k_splits else (batch, 4)
    splits = Tensor(rng.dirichlet(np.ones(4), size=split_shape[:-1]), requires_grad=True, name="splits")
    wq = rng.normal(size=(batch, len(CYCLE_SET)))
    wa = rng.normal(size=(batch, len(CYCLE_SET), 4) if cfg.per_k_splits else (batch, 4))

    def q_loss():
        v, _ = q.forward(b, splits)
        return ops.total(ops.mul(v, wq))

    def a_loss():
        v, _ = actor.forward(b)
        return ops.total(ops.mul(v, wa))

    res = []
    for net, parts in (("q", _check(q_loss, q.params + [splits], rng, coords, h)), ("actor", _check(a_loss, actor.params, rng, coords, h))):
        res.append(GradCheckResult(seed, net, "all", _aggregate(parts)))
        for name, a, n in parts:
            res.append(GradCheckResult(seed, net, name, _rel(a, n)))
    return res


def run_grad_check(seeds=range(100), tolerance: float = TOLERANCE, **kw) -> tuple[bool, float, list[GradCheckResult]]:
    results = []
    for s in seeds:
        results.extend(grad_check(int(s), **kw))
    worst = max(r.rel_error for r in results if r.tensor == "all")
    return worst < tolerance, worst, results
