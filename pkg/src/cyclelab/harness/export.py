"""Delimited exports of run ledgers: episode CSV, per-cycle JSONL, attention series."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .runner import RunLedger

EPISODE_HEADER = ("episode", "seed", "avg_wait_s", "throughput", "controller")
ATTENTION_HEADER = ("episode", "intersection", "N", "E", "S", "W")


def _num(x) -> str:
    return repr(float(x))


def write_episode_csv(ledger: RunLedger, path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPISODE_HEADER)
        for e in ledger.episodes:
            w.writerow([e.episode, e.seed, _num(e.avg_wait), e.throughput, e.controller])
    return path


def write_cycle_jsonl(ledger: RunLedger, path: Path) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for e in ledger.episodes:
            for rec in e.cycles:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def write_attention_csv(ledger: RunLedger, path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTENTION_HEADER)
        for e in ledger.episodes:
            for n in sorted(e.attention):
                w.writerow([e.episode, n, *(_num(a) for a in e.attention[n])])
    return path


def write_updates_jsonl(ledger: RunLedger, path: Path) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for d in ledger.updates:
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    return path


def write_ledger_json(ledger: RunLedger, path: Path) -> Path:
    payload = {
        "mode": ledger.mode,
        "config": ledger.config,
        "aggregate": ledger.aggregate(),
        "episodes": [e.summary() for e in ledger.episodes],
        "checkpoints": ledger.checkpoints,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def export_metrics(ledger: RunLedger, out_dir: str | Path, formats=("csv", "jsonl", "attention")) -> dict[str, Path]:
    """Write the requested formats into ``out_dir``; returns format -> path."""
    if not ledger.episodes:
        raise ValueError("nothing to export: ledger has no episodes")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for fmt in formats:
        if fmt == "csv":
            written[fmt] = write_episode_csv(ledger, out / "episodes.csv")
        elif fmt == "jsonl":
            written[fmt] = write_cycle_jsonl(ledger, out / "cycles.jsonl")
        elif fmt == "attention":
            written[fmt] = write_attention_csv(ledger, out / "attention.csv")
        elif fmt == "updates":
            written[fmt] = write_updates_jsonl(ledger, out / "updates.jsonl")
        elif fmt == "ledger":
            written[fmt] = write_ledger_json(ledger, out / "ledger.json")
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    return written
