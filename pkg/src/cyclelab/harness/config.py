"""Experiment configuration: a versioned JSON document validated at load."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..grid import TABLE1_BOUNDS
from ..signal import CYCLE_SET

CONFIG_SCHEMA = "cyclelab.config"
CONFIG_VERSION = 1
CONTROLLERS = ("fixed", "backpressure", "webster", "cyclight", "single-pdqn")


class ConfigError(ValueError):
    pass


def _halved() -> dict[str, float]:
    return {k: v / 2 for k, v in TABLE1_BOUNDS.items()}


@dataclass
class ExperimentConfig:
    """Everything that determines a run.

    The defaults are the desk-scale setting (3x3 grid, 1500 s episodes,
    150 episodes, halved demand bounds) with the learner tuned for that
    budget: Adam, one update per two stored samples, time-limit bootstrap
    at the horizon and log-normal noise on explored splits.
    :meth:`full_scale` gives the 5x5 setting with the reference demand
    table and plain SGD updates after every stored sample.
    """

    # network and demand
    rows: int = 3
    cols: int = 3
    link_length: float = 300.0
    lanes: int = 2
    speed_limit: float = 20.0
    demand_bounds: dict[str, float] = field(default_factory=_halved)

    controller: str = "cyclight"

    # learner
    lr_q: float = 0.001
    lr_actor: float = 0.001
    gamma: float = 0.99
    batch_size: int = 128
    n_step: int = 4
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.8
    clip_norm: float | None = 10.0
    tau: float = 0.01
    use_target: bool = True
    optimizer: str = "adam"
    buffer_capacity: int = 20000
    per_k_splits: bool = False
    share_params: bool = True
    update_every: int = 2
    reward_scale: float = 0.01
    split_noise: float = 0.3
    bootstrap_horizon: bool = True

    # decision process
    lambda_p: float = 10.0
    phi: float = 0.9
    g_min: float = 12.0
    yellow: float = 3.0

    # schedule
    horizon: int = 1500
    episodes: int = 150
    advance_time: int = 0
    transmission_delay: int = 0
    seed: int = 0
    train_seed_base: int = 1
    eval_seed_base: int = 100000
    checkpoint_every: int = 50
    out_dir: str | None = None

    @classmethod
    def full_scale(cls, **overrides) -> "ExperimentConfig":
        base = dict(
            rows=5,
            cols=5,
            demand_bounds=dict(TABLE1_BOUNDS),
            horizon=3000,
            episodes=700,
            optimizer="sgd",
            update_every=1,
            split_noise=0.0,
            bootstrap_horizon=False,
        )
        base.update(overrides)
        return cls(**base)

    # -- validation ---------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.rows >= 2 and self.cols >= 2, "rows and cols must be >= 2")
        need(self.link_length > 0 and self.speed_limit > 0, "link_length and speed_limit must be positive")
        need(self.lanes in (1, 2), "lanes must be 1 or 2")
        need(set(self.demand_bounds) == set(TABLE1_BOUNDS), f"demand_bounds needs keys {sorted(TABLE1_BOUNDS)}")
        need(all(v >= 0 for v in self.demand_bounds.values()), "demand bounds must be non-negative")
        need(self.controller in CONTROLLERS, f"controller must be one of {CONTROLLERS}")
        need(self.lr_q > 0 and self.lr_actor > 0, "learning rates must be positive")
        need(0 < self.gamma <= 1, "gamma must lie in (0, 1]")
        need(self.batch_size >= 1 and self.n_step >= 1, "batch_size and n_step must be >= 1")
        need(0 <= self.eps_end <= self.eps_start <= 1, "need 0 <= eps_end <= eps_start <= 1")
        need(0 < self.eps_decay_fraction <= 1, "eps_decay_fraction must lie in (0, 1]")
        need(self.clip_norm is None or self.clip_norm > 0, "clip_norm must be positive or null")
        need(0 < self.tau <= 1, "tau must lie in (0, 1]")
        need(self.optimizer in ("sgd", "adam"), "optimizer must be sgd or adam")
        need(self.buffer_capacity >= self.batch_size, "buffer_capacity must hold one batch")
        need(self.update_every >= 1, "update_every must be >= 1")
        need(self.reward_scale > 0, "reward_scale must be positive")
        need(self.split_noise >= 0, "split_noise must be non-negative")
        need(self.lambda_p > 0, "lambda_p must be positive")
        need(0 < self.phi < 1, "phi must lie in (0, 1)")
        need(self.g_min > 0 and self.yellow >= 0, "g_min must be positive and yellow non-negative")
        need(min(CYCLE_SET) >= 4 * (self.g_min + self.yellow), "shortest cycle must hold minimum greens and yellows")
        need(self.horizon >= 1 and self.episodes >= 1, "horizon and episodes must be >= 1")
        need(0 <= self.advance_time < self.g_min + self.yellow, "advance_time must fall inside the last phase")
        need(self.transmission_delay >= 0, "transmission_delay must be non-negative")
        need(self.checkpoint_every >= 1, "checkpoint_every must be >= 1")
        return self

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {"schema": CONFIG_SCHEMA, "schema_version": CONFIG_VERSION, **d}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if data.pop("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
            raise ConfigError(f"not a {CONFIG_SCHEMA} document")
        version = data.pop("schema_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config schema_version {version} (expected {CONFIG_VERSION})")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    def echo(self) -> tuple:
        """``(lr_q, lr_actor, gamma, batch, n_step, lambda_p, phi, g_min, yellow)``."""
        return (
            self.lr_q,
            self.lr_actor,
            self.gamma,
            self.batch_size,
            self.n_step,
            self.lambda_p,
            self.phi,
            self.g_min,
            self.yellow,
        )


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def schema_help() -> str:
    lines = [f"config schema {CONFIG_SCHEMA} v{CONFIG_VERSION} (JSON object; all keys optional):"]
    defaults = ExperimentConfig()
    for f in dataclasses.fields(ExperimentConfig):
        lines.append(f"  {f.name:<20} default {getattr(defaults, f.name)!r}")
    return "\n".join(lines)
