import csv
import json

import pytest

from cyclelab.grid import generate_demand_schedule, save_scenario, default_flow_groups
from cyclelab.harness import cli
from cyclelab.harness.config import ConfigError, ExperimentConfig, load_config, save_config
from cyclelab.harness.export import export_metrics
from cyclelab.harness.report import render_report
from cyclelab.harness.runner import (
    ArchitectureMismatchError,
    Learners,
    build_network,
    run_baseline,
    run_episode,
    run_evaluation,
    run_training,
)


def tiny(**kw):
    base = dict(rows=2, cols=2, horizon=400, episodes=1, batch_size=8, buffer_capacity=200, checkpoint_every=1)
    base.update(kw)
    return ExperimentConfig(**base).validate()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    cfg = tiny(episodes=2)
    ledger, learners = run_training(cfg, out)
    return cfg, out, ledger, learners


# -- configuration -----------------------------------------------------------


def test_defaults_echo_learning_and_decision_parameters():
    cfg = ExperimentConfig()
    assert cfg.echo() == (0.001, 0.001, 0.99, 128, 4, 10, 0.9, 12, 3)
    assert (cfg.eps_start, cfg.eps_end, cfg.tau, cfg.clip_norm) == (1.0, 0.05, 0.01, 10.0)
    full = ExperimentConfig.full_scale()
    assert (full.rows, full.cols, full.horizon, full.episodes) == (5, 5, 3000, 700)
    assert full.demand_bounds == {"F1": 300, "F2": 350, "f1": 200, "f2": 250}
    assert (full.optimizer, full.update_every, full.split_noise, full.bootstrap_horizon) == ("sgd", 1, 0.0, False)
    assert full.echo() == cfg.echo()
    assert (cfg.rows, cfg.cols, cfg.horizon, cfg.episodes) == (3, 3, 1500, 150)
    assert cfg.demand_bounds == {k: v / 2 for k, v in full.demand_bounds.items()}


def test_config_round_trip_and_rejections(tmp_path):
    cfg = ExperimentConfig(seed=7, advance_time=5)
    p = tmp_path / "c.json"
    save_config(cfg, p)
    assert load_config(p) == cfg
    bad = json.loads(p.read_text())
    bad["mystery"] = 1
    p.write_text(json.dumps(bad))
    with pytest.raises(ConfigError, match="unknown"):
        load_config(p)
    with pytest.raises(ConfigError):
        ExperimentConfig(advance_time=20).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(controller="magic").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 99})


# -- training and evaluation -----------------------------------------------


def test_training_smoke(trained):
    cfg, out, ledger, learners = trained
    assert [e.episode for e in ledger.episodes] == [0, 1]
    assert [e.seed for e in ledger.episodes] == [cfg.train_seed_base, cfg.train_seed_base + 1]
    assert len(learners.agents[0].buffer) > 0
    assert ledger.updates and learners.agents[0].updates > 0
    assert (out / "checkpoints" / "episode_0001.cylb").exists()
    assert (out / "checkpoints" / "latest.cylb").exists() and (out / "checkpoints" / "best.cylb").exists()
    assert ledger.echo() == cfg.echo()


def test_training_is_deterministic(trained):
    cfg, _, ledger, learners = trained
    again, l2 = run_training(cfg)
    assert [e.summary() for e in again.episodes] == [e.summary() for e in ledger.episodes]
    assert l2.param_hash() == learners.param_hash()


def test_transitions_chain_within_an_episode():
    cfg = tiny(share_params=False)
    net = build_network(cfg)
    learners = Learners(cfg, net.n_interior)
    res, _ = run_episode(cfg, net, 0, 3, learners=learners, train=False)
    by_node = {}
    for rec in res.cycles:
        by_node.setdefault(rec["intersection"], []).append(rec)
    for recs in by_node.values():
        # each decision is what the next cycle executes
        for a, b in zip(recs, recs[1:]):
            assert b["cycle"] == a["cycle"] + 1
            assert a["next_k"] == b["k"]
            assert a["next_splits"] == b["splits"]


def test_evaluation_is_frozen_and_repeatable(trained):
    cfg, out, _, learners = trained
    ckpt = out / "checkpoints" / "latest.cylb"
    before = learners.param_hash()
    a = run_evaluation(cfg, ckpt, 2)
    b = run_evaluation(cfg, ckpt, 2, workers=2)
    assert [e.summary() for e in a.episodes] == [e.summary() for e in b.episodes]
    assert [e.seed for e in a.episodes] == [cfg.eval_seed_base, cfg.eval_seed_base + 1]
    assert all(e.epsilon == 0.0 for e in a.episodes)
    c = run_evaluation(cfg, learners, 1)
    assert learners.param_hash() == before
    assert c.episodes[0].summary() == a.episodes[0].summary()


def test_checkpoint_reload_reproduces_parameters_and_rng(trained):
    cfg, out, _, learners = trained
    other = Learners(cfg, 4)
    meta = other.load(out / "checkpoints" / "latest.cylb")
    assert other.param_hash() == learners.param_hash()
    assert meta["episode"] == 1 and "rng_state" in meta
    # restored generators continue the saved streams
    assert other.explore_rng.bit_generator.state == meta["rng_state"]["explore"]
    assert [a.rng.bit_generator.state for a in other.agents] == meta["rng_state"]["agents"]


def test_architecture_mismatch(trained):
    cfg, out, _, _ = trained
    with pytest.raises(ArchitectureMismatchError):
        run_evaluation(cfg.replace(per_k_splits=True), out / "checkpoints" / "latest.cylb", 1)
    with pytest.raises(ArchitectureMismatchError):
        run_evaluation(cfg.replace(share_params=False), out / "checkpoints" / "latest.cylb", 1)


def test_single_pdqn_sees_no_neighbours():
    cfg = tiny(controller="single-pdqn")
    net = build_network(cfg)
    res, _ = run_episode(cfg, net, 0, 5, learners=Learners(cfg, 4), train=False)
    assert res.attention == {}
    assert all(rec["reward"] == rec["local_reward"] for rec in res.cycles)


def test_advance_observation_uses_same_loop():
    cfg = tiny(advance_time=5, transmission_delay=5)
    net = build_network(cfg)
    res, _ = run_episode(cfg, net, 0, 5, learners=Learners(cfg, 4), train=False)
    # observations land 5 s before every cycle boundary: 84 - 5 for the default first cycle
    assert {rec["time"] for rec in res.cycles if rec["cycle"] == 0} == {79}
    for rec in res.cycles:
        assert rec["next_k"] in (60, 72, 84, 96, 108, 120)


def test_baselines_run_on_evaluation_seeds():
    for name in ("fixed", "backpressure", "webster"):
        led = run_baseline(tiny(controller=name), episodes=2)
        assert [e.seed for e in led.episodes] == [100000, 100001]
        assert all(e.controller == name for e in led.episodes)
    with pytest.raises(ValueError):
        run_baseline(tiny())


# -- exports -----------------------------------------------------------------


def test_exports(trained, tmp_path):
    cfg, _, ledger, _ = trained
    one = type(ledger)(ledger.config, "train", ledger.episodes[:1])
    paths = export_metrics(one, tmp_path / "a")
    lines = paths["csv"].read_text().splitlines()
    assert lines[0] == "episode,seed,avg_wait_s,throughput,controller" and len(lines) == 2
    again = export_metrics(one, tmp_path / "b")
    for k in paths:
        assert paths[k].read_bytes() == again[k].read_bytes()
    with open(paths["attention"]) as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    for r in rows:
        assert abs(sum(float(r[s]) for s in "NESW") - 1.0) < 1e-9
    recs = [json.loads(line) for line in paths["jsonl"].read_text().splitlines()]
    assert recs and {"k", "splits", "local_reward", "next_k"} <= set(recs[0])
    with pytest.raises(ValueError):
        export_metrics(type(ledger)(ledger.config, "train"), tmp_path / "c")


def test_report_renders_figures(trained, tmp_path):
    _, _, ledger, _ = trained
    paths = render_report(ledger, tmp_path, center=0)
    assert [p.name for p in paths] == ["waiting.png", "throughput.png", "attention.png"]
    assert all(p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for p in paths)


# -- command line ------------------------------------------------------------


def _write(tmp_path, **kw):
    p = tmp_path / "cfg.json"
    save_config(tiny(out_dir=str(tmp_path / "runs"), **kw), p)
    return p


def test_cli_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_cli_bad_config_exits_1_with_schema_help(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"rows": 1}))
    assert cli.main(["baseline", str(p)]) == 1
    err = capsys.readouterr().err
    assert "rows" in err and "schema" in err.lower()
    assert cli.main(["baseline", str(tmp_path / "missing.json")]) == 1


def test_cli_grad_check_passes():
    assert cli.main(["grad-check", "--seeds", "3"]) == 0


def test_cli_train_eval_baseline_replay(tmp_path):
    cfg_path = _write(tmp_path)
    assert cli.main(["train", str(cfg_path), "--seed", "3"]) == 0
    train_dir = tmp_path / "runs" / "train"
    for name in ("episodes.csv", "cycles.jsonl", "attention.csv", "updates.jsonl", "ledger.json", "waiting.png", "config.json"):
        assert (train_dir / name).exists(), name
    assert load_config(train_dir / "config.json").seed == 3
    ckpt = train_dir / "checkpoints" / "latest.cylb"
    assert cli.main(["eval", str(cfg_path), str(ckpt), "--seed", "3", "--episodes", "1"]) == 0
    assert (tmp_path / "runs" / "eval" / "episodes.csv").exists()
    assert cli.main(["eval", str(cfg_path), str(ckpt)]) == 0  # same shapes, other seed
    assert cli.main(["baseline", str(cfg_path), "--controller", "webster"]) == 0
    assert cli.main(["train", str(cfg_path), "--advance-time", "50"]) == 1

    cfg = tiny()
    net = build_network(cfg)
    scen = tmp_path / "scenario.json"
    save_scenario(scen, net, generate_demand_schedule(net, default_flow_groups(net, cfg.demand_bounds), 9, 300))
    assert cli.main(["replay", str(scen), "--out", str(tmp_path / "rp")]) == 0
    events = (tmp_path / "rp" / "replay" / "events.jsonl").read_text().splitlines()
    assert len(events) == 300 * 4
    assert cli.main(["replay", str(scen), "--out", str(tmp_path / "rp2")]) == 0
    assert (tmp_path / "rp2" / "replay" / "events.jsonl").read_text().splitlines() == events
