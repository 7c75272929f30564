"""Episode loop, training and evaluation over the mesoscopic simulator."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..agent import (
    AgentHyper,
    ExplorationSchedule,
    NetConfig,
    NStepWindow,
    PDQNAgent,
    Transition,
    select_action_with_info,
)
from ..baselines import BackPressureController, Controller, FixedTimeController, WebsterController
from ..grid import GridNetwork, build_grid, default_flow_groups, generate_demand_schedule
from ..nn.checkpoint import CheckpointError, architecture_hash, load_checkpoint, save_checkpoint
from ..pamdp import (
    InfoHub,
    MultiAgentState,
    PamdpParams,
    assemble_local_state,
    local_reward,
    multi_reward,
    share_info,
)
from ..signal import CycleScheduler, HybridAction, SignalTimingParams, decode_action, normalize_splits
from ..sim import Simulation, finalize_episode
from .config import ExperimentConfig

log = logging.getLogger(__name__)

STATE_DIM = 64
OUT_ENV = "CYCLELAB_OUT"
LEARNING_CONTROLLERS = ("cyclight", "single-pdqn")


class ArchitectureMismatchError(CheckpointError):
    pass


def default_out_dir(cfg: ExperimentConfig) -> Path:
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return Path(os.environ.get(OUT_ENV, "runs"))


def build_network(cfg: ExperimentConfig) -> GridNetwork:
    return build_grid(cfg.rows, cfg.cols, cfg.link_length, cfg.lanes, cfg.speed_limit)


def timing_params(cfg: ExperimentConfig) -> SignalTimingParams:
    return SignalTimingParams(g_min=cfg.g_min, yellow=cfg.yellow)


def pamdp_params(cfg: ExperimentConfig) -> PamdpParams:
    return PamdpParams(cfg.lambda_p, cfg.phi, cfg.gamma)


# -- results ---------------------------------------------------------------


@dataclass
class EpisodeResult:
    episode: int
    seed: int
    avg_wait: float
    throughput: int
    spawned: int
    controller: str
    cycles: list[dict] = field(default_factory=list)
    attention: dict[int, list[float]] = field(default_factory=dict)  # intersection -> mean (N, E, S, W)
    losses: dict[int, dict[str, float]] = field(default_factory=dict)  # learner -> means
    waiting_series: list[int] = field(default_factory=list)
    epsilon: float = 0.0

    def summary(self) -> dict:
        return {
            "episode": self.episode,
            "seed": self.seed,
            "avg_wait_s": self.avg_wait,
            "throughput": self.throughput,
            "spawned": self.spawned,
            "controller": self.controller,
            "epsilon": self.epsilon,
            "losses": {str(k): v for k, v in sorted(self.losses.items())},
        }


@dataclass
class RunLedger:
    config: dict
    mode: str  # "train" | "eval" | "baseline"
    episodes: list[EpisodeResult] = field(default_factory=list)
    updates: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def waits(self) -> np.ndarray:
        return np.array([e.avg_wait for e in self.episodes])

    def throughputs(self) -> np.ndarray:
        return np.array([e.throughput for e in self.episodes], dtype=float)

    def aggregate(self, window: int | None = None) -> dict:
        eps = self.episodes[-window:] if window else self.episodes
        w = np.array([e.avg_wait for e in eps])
        th = np.array([e.throughput for e in eps], dtype=float)
        return {
            "episodes": len(eps),
            "mean_wait_s": float(w.mean()) if len(w) else float("nan"),
            "std_wait_s": float(w.std()) if len(w) else float("nan"),
            "mean_throughput": float(th.mean()) if len(th) else float("nan"),
        }

    def echo(self) -> tuple:
        c = self.config
        return (c["lr_q"], c["lr_actor"], c["gamma"], c["batch_size"], c["n_step"], c["lambda_p"], c["phi"], c["g_min"], c["yellow"])


# -- learners ----------------------------------------------------------------


class Learners:
    """Agents for every intersection, either one per intersection or one shared."""

    def __init__(self, cfg: ExperimentConfig, n_intersections: int):
        self.cfg = cfg
        self.n = n_intersections
        net_cfg = NetConfig(state_dim=STATE_DIM, per_k_splits=cfg.per_k_splits)
        hyper = AgentHyper(
            lr_q=cfg.lr_q,
            lr_actor=cfg.lr_actor,
            gamma=cfg.gamma,
            batch_size=cfg.batch_size,
            n_step=cfg.n_step,
            buffer_capacity=cfg.buffer_capacity,
            tau=cfg.tau,
            use_target=cfg.use_target,
            clip_norm=cfg.clip_norm,
            optimizer=cfg.optimizer,
            eps_start=cfg.eps_start,
            eps_end=cfg.eps_end,
        )
        count = 1 if cfg.share_params else n_intersections
        self.agents = [PDQNAgent(net_cfg, hyper, cfg.seed, agent_id=i) for i in range(count)]
        self.explore_rng = np.random.default_rng([cfg.seed, 10**6])
        self.stored = [0] * count

    def owner(self, n: int) -> int:
        return 0 if self.cfg.share_params else n

    def agent_for(self, n: int) -> PDQNAgent:
        return self.agents[self.owner(n)]

    # checkpoint plumbing

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, a in enumerate(self.agents):
            for name, v in a.params.tensors().items():
                out[f"agent{i}/{name}"] = v
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for i, a in enumerate(self.agents):
            prefix = f"agent{i}/"
            a.params.load_tensors({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})

    def arch_hash(self) -> str:
        shapes = {k: v.shape for k, v in self.tensors().items()}
        cfg = self.agents[0].cfg
        return architecture_hash(shapes, {"net": cfg.__dict__, "agents": len(self.agents)})

    def param_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in self.agents:
            h.update(a.params.param_hash().encode())
        return h.hexdigest()

    def save(self, path: Path, metadata: dict) -> None:
        meta = dict(metadata)
        meta["arch_hash"] = self.arch_hash()
        meta["n_agents"] = len(self.agents)
        meta["rng_state"] = {
            "explore": self.explore_rng.bit_generator.state,
            "agents": [a.rng.bit_generator.state for a in self.agents],
        }
        save_checkpoint(path, self.tensors(), meta)

    def load(self, path: Path) -> dict:
        tensors, meta = load_checkpoint(path)
        if meta.get("arch_hash") != self.arch_hash():
            raise ArchitectureMismatchError(f"{path}: checkpoint architecture does not match the configured network")
        self.load_tensors(tensors)
        rng = meta.get("rng_state")
        if rng:
            self.explore_rng.bit_generator.state = rng["explore"]
            for a, st in zip(self.agents, rng["agents"]):
                a.rng.bit_generator.state = st
        return meta


def make_controller(cfg: ExperimentConfig, n_intersections: int) -> Controller | None:
    p = timing_params(cfg)
    if cfg.controller == "fixed":
        return FixedTimeController(p)
    if cfg.controller == "backpressure":
        return BackPressureController(p)
    if cfg.controller == "webster":
        return WebsterController(n_intersections, p)
    return None


# -- one episode ---------------------------------------------------------------


@dataclass
class _Pending:
    state: MultiAgentState
    k_idx: int
    splits: np.ndarray
    cycle: int


def run_episode(
    cfg: ExperimentConfig,
    net: GridNetwork,
    episode: int,
    seed: int,
    learners: Learners | None = None,
    controller: Controller | None = None,
    train: bool = False,
    explore: ExplorationSchedule | None = None,
    step_offset: int = 0,
    schedule=None,
    sim_hook=None,
) -> tuple[EpisodeResult, list[dict]]:
    """Simulate one episode; returns the result and per-update diagnostics.

    Exactly one of ``learners`` and ``controller`` drives the signals.
    ``train`` enables exploration, replay storage and updates.
    """
    if (learners is None) == (controller is None):
        raise ValueError("need exactly one of learners or controller")
    timing = timing_params(cfg)
    pp = pamdp_params(cfg)
    sharing = cfg.controller != "single-pdqn"
    groups = default_flow_groups(net, cfg.demand_bounds)
    if schedule is None:
        schedule = generate_demand_schedule(net, groups, seed, cfg.horizon)
    sim = Simulation(net, schedule)
    if sim_hook is not None:
        sim_hook(sim)
    n_int = net.n_interior
    sched = CycleScheduler(n_int, cfg.advance_time, params=timing)
    hub = InfoHub(net, STATE_DIM, cfg.transmission_delay)
    snaps: list[list] = [[] for _ in range(n_int)]
    pending: list[_Pending | None] = [None] * n_int
    in_flight: list[tuple[int, object] | None] = [None] * n_int  # plan and the time it reaches the signal
    windows = [NStepWindow(cfg.n_step, cfg.gamma, cfg.bootstrap_horizon) for _ in range(n_int)] if learners else []
    cycles: list[dict] = []
    att_sum = np.zeros((n_int, 4))
    att_cnt = np.zeros(n_int)
    diags: list[dict] = []
    eps = 0.0
    label = cfg.controller if learners else controller.name

    def store(n: int, sample) -> None:
        first, ret, nxt, disc = sample
        owner = learners.owner(n)
        agent = learners.agents[owner]
        agent.buffer.add(first.state, first.k, first.splits, ret, nxt, disc)
        learners.stored[owner] += 1
        if learners.stored[owner] % cfg.update_every == 0:
            d = agent.update()
            if d.get("updated"):
                d.update({"episode": episode, "cycle": first.cycle, "agent": owner, "epsilon": eps})
                diags.append(d)

    for n in range(n_int):
        plan = sched.current_plan(n)
        hub.record_control(n, 0, plan.cycle_length, plan.splits, sched.remaining(n))

    for t in range(cfg.horizon):
        sim.step(sched.signal_states())
        if controller is not None:
            controller.on_tick(sim, t)
        events = sched.tick_all(t)
        now = t + 1
        for n in range(n_int):
            plan = sched.current_plan(n)
            hub.record_control(n, now, plan.cycle_length, plan.splits, sched.remaining(n))
        observing = []
        for ev in events:
            n = ev.intersection
            if ev.kind == "phase_end" and (cfg.advance_time == 0 or ev.phase < 3):
                snaps[n].append(sim.sensor_snapshot(n))
            elif ev.kind == "observation_due":
                if cfg.advance_time > 0:
                    snaps[n].append(sim.sensor_snapshot(n))
                observing.append(n)

        if observing:
            if learners is not None and train:
                eps = explore(step_offset + t)
            rewards = {}
            for n in observing:
                ls = assemble_local_state(snaps[n])
                snaps[n] = []
                waits = sim.pop_cycle_waits(n)
                secondary = sim.measure_secondary_queue(n)
                r = local_reward(waits, secondary, pp)
                hub.publish(n, now, ls.normalized, r)
                rewards[n] = (ls, r, secondary, float(np.mean(waits)) if waits else 0.0)
            for n in observing:
                ls, r, secondary, mean_wait = rewards[n]
                cur = sched.current_plan(n)
                rec = {
                    "episode": episode,
                    "intersection": n,
                    "cycle": sched.cycle_index(n),
                    "time": now,
                    "k": cur.cycle_length,
                    "splits": list(cur.splits),
                    "local_reward": r,
                    "secondary": secondary,
                    "mean_wait": mean_wait,
                }
                if learners is None:
                    plan = controller.plan(n, sim, now)
                else:
                    digest = share_info(hub, n, now, cfg.transmission_delay, enabled=sharing)
                    own = hub.delta(n, now)
                    state = MultiAgentState(ls.normalized, own, digest.local, digest.delta, digest.mask)
                    nbr = [x for x in digest.rewards if x is not None]
                    R = multi_reward(r, nbr, pp) if sharing else r
                    rec["reward"] = R
                    if train and pending[n] is not None:
                        p = pending[n]
                        tr = Transition(p.state, p.k_idx, p.splits, R * cfg.reward_scale, state, episode, n, p.cycle)
                        sample = windows[n].push(tr)
                        if sample is not None:
                            store(n, sample)
                    params = learners.agent_for(n).params
                    action, q, alpha = select_action_with_info(params, state, eps if train else 0.0, learners.explore_rng)
                    splits = action.splits
                    if train and cfg.split_noise > 0:
                        noisy = np.log(np.maximum(splits, 1e-12)) + learners.explore_rng.normal(0, cfg.split_noise, 4)
                        splits = normalize_splits(noisy)
                        action = HybridAction(action.k, splits)
                    if digest.mask.any():
                        att_sum[n] += alpha
                        att_cnt[n] += 1
                    rec["q"] = [float(v) for v in q]
                    rec["attention"] = [float(v) for v in alpha]
                    pending[n] = _Pending(state, action.k_index, np.asarray(splits, dtype=float), sched.cycle_index(n))
                    plan = decode_action(action, timing)
                rec["next_k"] = plan.cycle_length
                rec["next_splits"] = list(plan.splits)
                cycles.append(rec)
                in_flight[n] = (now + cfg.transmission_delay, plan)

        for n in range(n_int):
            f = in_flight[n]
            if f is not None and f[0] <= now:
                sched.install(n, f[1])
                in_flight[n] = None
        for ev in events:
            if ev.kind == "plan_swap_due":
                n = ev.intersection
                sched.swap(n, now)
                plan = sched.current_plan(n)
                hub.record_control(n, now, plan.cycle_length, plan.splits, sched.remaining(n))

    if learners is not None and train:
        for n in range(n_int):
            for sample in windows[n].flush():
                store(n, sample)

    m = finalize_episode(sim)
    att = {n: (att_sum[n] / att_cnt[n]).tolist() for n in range(n_int) if att_cnt[n] > 0}
    losses: dict[int, dict[str, float]] = {}
    for d in diags:
        acc = losses.setdefault(d["agent"], {"loss_q": 0.0, "loss_actor": 0.0, "updates": 0})
        acc["loss_q"] += d["loss_q"]
        acc["loss_actor"] += d["loss_actor"]
        acc["updates"] += 1
    for acc in losses.values():
        acc["loss_q"] /= acc["updates"]
        acc["loss_actor"] /= acc["updates"]
    result = EpisodeResult(
        episode, int(seed), float(m.average_waiting), int(m.throughput), int(m.spawned), label,
        cycles, att, losses, list(m.waiting_series), float(eps),
    )
    return result, diags


# -- training and evaluation ---------------------------------------------------


def run_training(cfg: ExperimentConfig, out_dir: str | Path | None = None, progress=None) -> tuple[RunLedger, Learners]:
    """Train learners over ``cfg.episodes`` episodes; checkpoints every ``checkpoint_every`` and at the end."""
    cfg.validate()
    if cfg.controller not in LEARNING_CONTROLLERS:
        raise ValueError(f"controller {cfg.controller!r} does not learn; use run_baseline")
    net = build_network(cfg)
    learners = Learners(cfg, net.n_interior)
    explore = ExplorationSchedule(cfg.episodes * cfg.horizon, cfg.eps_start, cfg.eps_end, cfg.eps_decay_fraction)
    ledger = RunLedger(cfg.to_dict(), "train")
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out is not None:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    best = float("inf")
    for e in range(cfg.episodes):
        seed = cfg.train_seed_base + e
        res, diags = run_episode(
            cfg, net, e, seed, learners=learners, train=True, explore=explore, step_offset=e * cfg.horizon
        )
        ledger.episodes.append(res)
        ledger.updates.extend(diags)
        if progress is not None:
            progress(res)
        last = e + 1 == cfg.episodes
        if ckpt_dir is not None and ((e + 1) % cfg.checkpoint_every == 0 or last):
            meta = {"episode": e, "config": cfg.to_dict(), "updates": [a.updates for a in learners.agents]}
            path = ckpt_dir / f"episode_{e + 1:04d}.cylb"
            learners.save(path, meta)
            learners.save(ckpt_dir / "latest.cylb", meta)
            ledger.checkpoints.append(str(path))
            # best by the trailing training-curve window
            window = ledger.aggregate(cfg.checkpoint_every)["mean_wait_s"]
            if window < best:
                best = window
                learners.save(ckpt_dir / "best.cylb", dict(meta, window_mean_wait_s=window))
    return ledger, learners


def _eval_one(args) -> EpisodeResult:
    cfg, checkpoint, i = args
    net = build_network(cfg)
    learners = Learners(cfg, net.n_interior)
    learners.load(Path(checkpoint))
    res, _ = run_episode(cfg, net, i, cfg.eval_seed_base + i, learners=learners, train=False)
    return res


def run_evaluation(
    cfg: ExperimentConfig,
    checkpoint: str | Path | Learners,
    episodes: int,
    workers: int = 1,
) -> RunLedger:
    """Frozen greedy policy on seeds ``eval_seed_base, eval_seed_base + 1, ...``."""
    cfg.validate()
    net = build_network(cfg)
    ledger = RunLedger(cfg.to_dict(), "eval")
    if isinstance(checkpoint, Learners):
        learners = checkpoint
    else:
        learners = Learners(cfg, net.n_interior)
        learners.load(Path(checkpoint))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_eval_one, [(cfg, str(checkpoint), i) for i in range(episodes)]))
            ledger.episodes = sorted(results, key=lambda r: r.episode)
            return ledger
    for i in range(episodes):
        res, diags = run_episode(cfg, net, i, cfg.eval_seed_base + i, learners=learners, train=False)
        assert not diags
        ledger.episodes.append(res)
    return ledger


def run_baseline(cfg: ExperimentConfig, episodes: int | None = None) -> RunLedger:
    """A classical controller on the evaluation seed schedule."""
    cfg.validate()
    if cfg.controller in LEARNING_CONTROLLERS:
        raise ValueError(f"controller {cfg.controller!r} is a learner; use run_training/run_evaluation")
    net = build_network(cfg)
    ledger = RunLedger(cfg.to_dict(), "baseline")
    for i in range(episodes if episodes is not None else cfg.episodes):
        ctl = make_controller(cfg, net.n_interior)
        res, _ = run_episode(cfg, net, i, cfg.eval_seed_base + i, controller=ctl)
        ledger.episodes.append(res)
    return ledger
