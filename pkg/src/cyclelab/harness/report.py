"""Figures rendered next to the delimited exports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .runner import RunLedger  # noqa: E402

SIDES = ("N", "E", "S", "W")


def plot_waiting_curve(ledgers: dict[str, RunLedger], path: Path, smooth: int = 1) -> Path:
    """Average waiting per episode, one line per labelled ledger."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, led in ledgers.items():
        w = led.waits()
        if smooth > 1 and len(w) >= smooth:
            w = np.convolve(w, np.ones(smooth) / smooth, mode="valid")
        ax.plot(np.arange(len(w)), w, label=label)
    ax.set_xlabel("episode")
    ax.set_ylabel("average waiting (s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_throughput(ledgers: dict[str, RunLedger], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, led in ledgers.items():
        ax.plot(led.throughputs(), label=label)
    ax.set_xlabel("episode")
    ax.set_ylabel("completed trips")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_attention(ledger: RunLedger, intersection: int, path: Path) -> Path:
    """Episode-mean attention of ``intersection`` toward its four neighbour slots."""
    rows = [(e.episode, e.attention[intersection]) for e in ledger.episodes if intersection in e.attention]
    fig, ax = plt.subplots(figsize=(7, 4))
    if rows:
        eps = [r[0] for r in rows]
        a = np.array([r[1] for r in rows])
        for j, side in enumerate(SIDES):
            ax.plot(eps, a[:, j], label=side)
    ax.set_xlabel("episode")
    ax.set_ylabel("attention score")
    ax.set_title(f"intersection {intersection}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(ledger: RunLedger, out_dir: str | Path, label: str | None = None, center: int | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label = label or ledger.config.get("controller", "run")
    paths = [
        plot_waiting_curve({label: ledger}, out / "waiting.png"),
        plot_throughput({label: ledger}, out / "throughput.png"),
    ]
    if center is not None and any(center in e.attention for e in ledger.episodes):
        paths.append(plot_attention(ledger, center, out / "attention.png"))
    return paths
