"""Matplotlib figures written next to the CSV/text reports."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .orchestrator import Measurement  # noqa: E402
from .reporting import LatencySeries  # noqa: E402

RC = {
    "figure.figsize": (6.4, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 10,
}


def _save(fig, path: str | os.PathLike) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


def plot_latency_curves(series: Sequence[LatencySeries], path: str | os.PathLike) -> None:
    """Mean throughput per RTT bucket, one line per adapter/stream series."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for s in series:
            xs = [p[0] for p in s.points]
            ys = [p[1] for p in s.points]
            ax.plot(xs, ys, marker="o", label=f"{s.adapter}, {s.stream_count} stream{'s' if s.stream_count > 1 else ''}")
        ax.set_xlabel("RTT bucket (ms)")
        ax.set_ylabel("Throughput (Gbps)")
        ax.set_ylim(bottom=0)
        if series:
            ax.legend()
        else:
            ax.text(0.5, 0.5, "no data", transform=ax.transAxes, ha="center")
        _save(fig, path)


def plot_stream_comparison(measurements: Sequence[Measurement], adapter: str, path: str | os.PathLike) -> None:
    """Throughput against RTT for single- and multi-stream runs of one adapter."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for label, pick, marker in (
            ("single stream", lambda m: m.stream_count == 1, "o"),
            ("multi-stream", lambda m: m.stream_count > 1, "s"),
        ):
            pts = [(m.rtt_ms, m.throughput_gbps) for m in measurements
                   if m.adapter == adapter and pick(m) and m.rtt_ms is not None]
            if pts:
                ax.scatter(*zip(*pts), marker=marker, alpha=0.7, label=label)
        ax.set_xlabel("RTT (ms)")
        ax.set_ylabel("Throughput (Gbps)")
        ax.set_title(adapter)
        ax.set_ylim(bottom=0)
        ax.legend()
        _save(fig, path)


def plot_concurrency_sweep(points: Sequence[tuple[int, float]], path: str | os.PathLike, label: str = "copy") -> None:
    """Aggregate throughput against number of concurrent copies."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        xs, ys = zip(*points) if points else ((), ())
        ax.plot(xs, ys, marker="o", label=label)
        ax.set_xlabel("Concurrent transfers")
        ax.set_ylabel("Throughput (Gbps)")
        ax.set_ylim(bottom=0)
        ax.legend()
        _save(fig, path)
