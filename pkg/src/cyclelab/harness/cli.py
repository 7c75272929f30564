"""Command-line entry point: ``cyclelab train|eval|baseline|grad-check|replay``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..grid import load_scenario
from ..sim import finalize_episode
from .config import ConfigError, ExperimentConfig, load_config, save_config, schema_help
from .export import export_metrics
from .report import render_report
from .runner import (
    LEARNING_CONTROLLERS,
    ArchitectureMismatchError,
    Learners,
    RunLedger,
    default_out_dir,
    make_controller,
    run_baseline,
    run_episode,
    run_evaluation,
    run_training,
)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="learner seed override")
    common.add_argument("--out", help="output directory (default: $CYCLELAB_OUT or ./runs)")
    common.add_argument("--advance-time", type=int, help="seconds before cycle end at which observations are taken")
    common.add_argument("--transmission-delay", type=int, help="seconds of lag on neighbour information and plan delivery")
    common.add_argument("--episodes", type=int, help="episode count override")

    p = argparse.ArgumentParser(prog="cyclelab", description="Cycle-level signal control laboratory")
    sub = p.add_subparsers(dest="command", required=True, metavar="{train,eval,baseline,grad-check,replay}")

    t = sub.add_parser("train", parents=[common], help="train a learning controller")
    t.add_argument("config")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint with a frozen greedy policy")
    e.add_argument("config")
    e.add_argument("checkpoint")
    e.add_argument("--workers", type=int, default=1)

    b = sub.add_parser("baseline", parents=[common], help="run a classical controller")
    b.add_argument("config")
    b.add_argument("--controller", choices=("fixed", "backpressure", "webster"))

    g = sub.add_parser("grad-check", help="finite-difference check of network gradients")
    g.add_argument("--seeds", type=int, default=100)

    r = sub.add_parser("replay", parents=[common], help="re-run a saved scenario file")
    r.add_argument("scenario")
    r.add_argument("--config", help="config for controller and timing (default: fixed time)")
    r.add_argument("--checkpoint", help="checkpoint for a learning controller")
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if getattr(args, "advance_time", None) is not None:
        changes["advance_time"] = args.advance_time
    if getattr(args, "transmission_delay", None) is not None:
        changes["transmission_delay"] = args.transmission_delay
    if getattr(args, "episodes", None) is not None:
        changes["episodes"] = args.episodes
    if getattr(args, "controller", None):
        changes["controller"] = args.controller
    return cfg.replace(**changes) if changes else cfg.validate()


def _write_outputs(ledger: RunLedger, out: Path, center: int | None) -> None:
    export_metrics(ledger, out, formats=("csv", "jsonl", "attention", "updates", "ledger"))
    render_report(ledger, out, center=center)


def _center(cfg: ExperimentConfig) -> int:
    return (cfg.rows // 2) * cfg.cols + cfg.cols // 2


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if args.command == "grad-check":
        from ..gradcheck import TOLERANCE, run_grad_check

        ok, worst, _ = run_grad_check(range(args.seeds))
        print(f"grad-check: {args.seeds} seeds, worst relative error {worst:.3e} (tolerance {TOLERANCE:g}) -> {'PASS' if ok else 'FAIL'}")
        return 0 if ok else 1

    try:
        if args.command == "replay":
            return _replay(args)
        cfg = _apply_overrides(load_config(args.config), args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}\n\n{schema_help()}", file=sys.stderr)
        return 1

    out = default_out_dir(cfg) / args.command
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    if args.command == "train":
        if cfg.controller not in LEARNING_CONTROLLERS:
            print(f"error: controller {cfg.controller!r} does not train; use `baseline`", file=sys.stderr)
            return 1

        def progress(res):
            print(f"episode {res.episode:4d} seed {res.seed} avg_wait {res.avg_wait:8.2f} s throughput {res.throughput} eps {res.epsilon:.3f}")

        ledger, _ = run_training(cfg, out, progress=progress)
    elif args.command == "eval":
        try:
            ledger = run_evaluation(cfg, args.checkpoint, cfg.episodes, workers=args.workers)
        except ArchitectureMismatchError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    else:
        if cfg.controller in LEARNING_CONTROLLERS:
            print("error: choose --controller fixed|backpressure|webster or set it in the config", file=sys.stderr)
            return 1
        ledger = run_baseline(cfg)
    _write_outputs(ledger, out, _center(cfg))
    print(json.dumps(ledger.aggregate(), sort_keys=True))
    return 0


def _replay(args) -> int:
    net, schedule = load_scenario(args.scenario)
    cfg = load_config(args.config) if args.config else ExperimentConfig(controller="fixed")
    cfg = _apply_overrides(cfg, args)
    cfg = cfg.replace(
        rows=net.rows,
        cols=net.cols,
        link_length=net.link_length,
        lanes=net.lanes_per_direction,
        speed_limit=net.speed_limit,
        horizon=int(schedule.horizon),
    )
    out = default_out_dir(cfg) / "replay"
    out.mkdir(parents=True, exist_ok=True)
    captured = {}
    kwargs = {}
    if cfg.controller in LEARNING_CONTROLLERS:
        if not args.checkpoint:
            print("error: a learning controller needs --checkpoint", file=sys.stderr)
            return 1
        learners = Learners(cfg, net.n_interior)
        learners.load(Path(args.checkpoint))
        kwargs["learners"] = learners
    else:
        kwargs["controller"] = make_controller(cfg, net.n_interior)

    def hook(sim):
        sim.events = []
        captured["sim"] = sim

    res, _ = run_episode(cfg, net, 0, schedule.episode_seed, schedule=schedule, sim_hook=hook, **kwargs)
    captured["sim"].write_event_log(out / "events.jsonl")
    ledger = RunLedger(cfg.to_dict(), "replay", [res])
    _write_outputs(ledger, out, _center(cfg))
    m = finalize_episode(captured["sim"])
    print(json.dumps({"avg_wait_s": m.average_waiting, "throughput": m.throughput}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
