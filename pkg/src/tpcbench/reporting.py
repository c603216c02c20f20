"""Static reports over stored measurements.

Nothing here does its own averaging: grid cells, latency points and stream
summaries are all read out of :func:`tpcbench.orchestrator.aggregate`, so a
number in a report can always be traced back to the raw store.
"""

from __future__ import annotations

import datetime as dt
import html
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from .orchestrator import Measurement, aggregate

__all__ = [
    "AdapterComparison",
    "GridCell",
    "GridReport",
    "LatencySeries",
    "StreamComparison",
    "Thresholds",
    "build_grid",
    "compare_adapters",
    "compare_streams",
    "latency_curve",
    "render_grid",
]

GOOD, WARN, BAD, MISSING = "good", "warn", "bad", "missing"
COLORS = {GOOD: "#3a9a4a", WARN: "#f0b429", BAD: "#cf3b3b", MISSING: "#e3e3e3"}
CELL = 64
LABEL_W = 140
LABEL_H = 120


@dataclass(frozen=True)
class Thresholds:
    good_gbps: float = 20.0
    warn_gbps: float = 5.0

    def __post_init__(self):
        if self.warn_gbps > self.good_gbps:
            raise ValueError("warn threshold must not exceed good threshold")

    def classify(self, gbps: float | None) -> str:
        if gbps is None:
            return MISSING
        if gbps >= self.good_gbps:
            return GOOD
        if gbps >= self.warn_gbps:
            return WARN
        return BAD


@dataclass(frozen=True)
class GridCell:
    throughput_gbps: float | None
    color_class: str
    timestamp: str | None = None


@dataclass(frozen=True)
class GridReport:
    row_labels: tuple[str, ...]
    column_labels: tuple[str, ...]
    cells: tuple[tuple[GridCell, ...], ...]
    thresholds: Thresholds
    title: str = ""

    def cell(self, row: str, col: str) -> GridCell:
        return self.cells[self.row_labels.index(row)][self.column_labels.index(col)]

    @property
    def populated(self) -> int:
        return sum(c.throughput_gbps is not None for row in self.cells for c in row)


def _select(
    measurements: Iterable[Measurement],
    adapter: str | None = None,
    stream_count: int | None = None,
    since: dt.datetime | None = None,
    until: dt.datetime | None = None,
) -> list[Measurement]:
    out = []
    for m in measurements:
        if adapter is not None and m.adapter != adapter:
            continue
        if stream_count is not None and m.stream_count != stream_count:
            continue
        if since is not None and m.time < since:
            continue
        if until is not None and m.time > until:
            continue
        out.append(m)
    return out


def build_grid(
    measurements: Sequence[Measurement],
    thresholds: Thresholds = Thresholds(),
    adapter: str | None = None,
    stream_count: int | None = None,
    since: dt.datetime | None = None,
    until: dt.datetime | None = None,
) -> GridReport:
    """Source x destination matrix of the latest throughput in the window."""
    measurements = list(measurements)
    labels = tuple(sorted({m.source for m in measurements} | {m.destination for m in measurements}))
    selected = _select(measurements, adapter, stream_count, since, until)
    latest: dict[tuple[str, str], Measurement] = {}
    for m in selected:
        key = (m.source, m.destination)
        if key not in latest or m.time >= latest[key].time:
            latest[key] = m
    values = (
        aggregate(list(latest.values()), ("source", "destination")) if latest else {}
    )
    rows = []
    for src in labels:
        row = []
        for dst in labels:
            stats = values.get((src, dst)) if src != dst else None
            gbps = stats.mean if stats is not None else None
            stamp = latest[(src, dst)].timestamp if stats is not None else None
            row.append(GridCell(gbps, thresholds.classify(gbps), stamp))
        rows.append(tuple(row))
    parts = [p for p in (adapter, f"{stream_count} streams" if stream_count else None) if p]
    return GridReport(labels, labels, tuple(rows), thresholds, " / ".join(parts))


def _svg(report: GridReport) -> str:
    n_rows, n_cols = len(report.row_labels), len(report.column_labels)
    width = LABEL_W + n_cols * CELL + 10
    height = LABEL_H + n_rows * CELL + 10
    esc = html.escape
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">'
    ]
    for j, col in enumerate(report.column_labels):
        x = LABEL_W + j * CELL + CELL // 2
        out.append(
            f'<text x="{x}" y="{LABEL_H - 6}" transform="rotate(-45 {x} {LABEL_H - 6})">{esc(col)}</text>'
        )
    for i, row in enumerate(report.row_labels):
        y = LABEL_H + i * CELL
        out.append(f'<text x="{LABEL_W - 6}" y="{y + CELL // 2 + 4}" text-anchor="end">{esc(row)}</text>')
        for j, col in enumerate(report.column_labels):
            cell = report.cells[i][j]
            x = LABEL_W + j * CELL
            if cell.throughput_gbps is None:
                title = f"{row} to {col}: no data"
                data = ""
                text = ""
            else:
                title = f"{row} to {col}: {cell.throughput_gbps!r} Gbps at {cell.timestamp}"
                data = f' data-gbps="{cell.throughput_gbps!r}"'
                text = (
                    f'<text x="{x + CELL // 2}" y="{y + CELL // 2 + 4}" text-anchor="middle">'
                    f"{cell.throughput_gbps:.1f}</text>"
                )
            out.append(
                f'<g class="cell {cell.color_class}" data-source="{esc(row)}" data-destination="{esc(col)}"{data}>'
                f'<rect x="{x}" y="{y}" width="{CELL - 2}" height="{CELL - 2}" fill="{COLORS[cell.color_class]}">'
                f"<title>{esc(title)}</title></rect>{text}</g>"
            )
    out.append("</svg>")
    return "\n".join(out)


def render_grid(
    measurements: Sequence[Measurement],
    thresholds: Thresholds = Thresholds(),
    adapter: str | None = None,
    stream_count: int | None = None,
    since: dt.datetime | None = None,
    until: dt.datetime | None = None,
) -> str:
    """Self-contained HTML page with the throughput grid as inline SVG.

    Output depends only on the inputs, so identical stores give identical
    bytes. An empty selection yields a page that says "no data".
    """
    report = build_grid(measurements, thresholds, adapter, stream_count, since, until)
    title = "TPC throughput" + (f" ({report.title})" if report.title else "")
    t = thresholds
    head = (
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n"
        f"<title>{html.escape(title)}</title>\n"
        "<style>body{font-family:sans-serif;margin:2em}"
        ".legend span{display:inline-block;padding:2px 8px;margin-right:6px}</style>\n"
        "</head>\n<body>\n"
        f"<h1>{html.escape(title)}</h1>\n"
        "<p>Rows are sources, columns are destinations. Each cell holds the latest measurement "
        "in the selected window, in Gbps.</p>\n"
        '<p class="legend">'
        f'<span style="background:{COLORS[GOOD]}">&#8805; {t.good_gbps:g} Gbps</span>'
        f'<span style="background:{COLORS[WARN]}">&#8805; {t.warn_gbps:g} Gbps</span>'
        f'<span style="background:{COLORS[BAD]}">&lt; {t.warn_gbps:g} Gbps</span>'
        f'<span style="background:{COLORS[MISSING]}">no data</span></p>\n'
    )
    if report.populated == 0:
        body = '<p class="no-data">no data</p>\n'
    else:
        body = _svg(report) + "\n"
    return head + body + "</body>\n</html>\n"


@dataclass(frozen=True)
class LatencySeries:
    label: str
    adapter: str
    stream_count: int
    points: tuple[tuple[float, float, int], ...]  # (bucket_ms, mean_gbps, count)


def _bucket_ms(bucket: int, width: float) -> float | int:
    value = bucket * width
    return int(value) if float(value).is_integer() else value


def series_label(adapter: str, stream_count: int) -> str:
    return f"{adapter}:{stream_count}"


def latency_curve(
    measurements: Sequence[Measurement],
    bucket_width_ms: float = 10.0,
    adapter: str | None = None,
    stream_count: int | None = None,
) -> tuple[list[LatencySeries], str]:
    """Throughput against RTT bucket per (adapter, stream count), plus CSV text."""
    selected = [m for m in _select(measurements, adapter, stream_count) if m.rtt_ms is not None]
    buf = io.StringIO()
    buf.write("series,bucket_ms,mean_gbps,count\n")
    if not selected:
        return [], buf.getvalue()
    stats = aggregate(selected, ("adapter", "stream_count", "latency_bucket"), bucket_width_ms)
    grouped: dict[tuple[str, int], list[tuple[float, float, int]]] = {}
    for (adp, streams, bucket), s in stats.items():
        grouped.setdefault((adp, streams), []).append((_bucket_ms(bucket, bucket_width_ms), s.mean, s.count))
    series = []
    for (adp, streams) in sorted(grouped):
        points = tuple(sorted(grouped[(adp, streams)]))
        label = series_label(adp, streams)
        series.append(LatencySeries(label, adp, streams, points))
        for bucket_ms, mean, count in points:
            buf.write(f"{label},{bucket_ms},{mean!r},{count}\n")
    return series, buf.getvalue()


@dataclass(frozen=True)
class StreamComparison:
    adapter: str
    mean_single_gbps: float
    mean_multi_gbps: float
    advantage_percent: float
    single_count: int
    multi_count: int


def compare_streams(measurements: Sequence[Measurement], adapter: str) -> StreamComparison:
    """Single-stream versus multi-stream mean throughput for one adapter.

    ``advantage_percent`` is positive when single-stream transfers are faster.
    """
    selected = [m for m in measurements if m.adapter == adapter]
    if not selected:
        raise ValueError(f"no measurements for adapter {adapter!r}")
    tagged = [(m, "single" if m.stream_count == 1 else "multi") for m in selected]
    classes = {}
    for cls in ("single", "multi"):
        group = [m for m, c in tagged if c == cls]
        if not group:
            raise ValueError(f"no {cls}-stream measurements for adapter {adapter!r}")
        classes[cls] = aggregate(group, ("adapter",))[(adapter,)]
    single, multi = classes["single"], classes["multi"]
    adv = 100.0 * (single.mean - multi.mean) / multi.mean
    return StreamComparison(adapter, single.mean, multi.mean, adv, single.count, multi.count)


@dataclass(frozen=True)
class AdapterComparison:
    adapter: str
    baseline: str
    mean_gbps: float
    baseline_mean_gbps: float
    difference_gbps: float
    advantage_percent: float


def compare_adapters(
    measurements: Sequence[Measurement], adapter: str, baseline: str, stream_count: int | None = None
) -> AdapterComparison:
    """Mean throughput of ``adapter`` relative to ``baseline``."""
    selected = _select(measurements, stream_count=stream_count)
    stats = aggregate(selected, ("adapter",)) if selected else {}
    for name in (adapter, baseline):
        if (name,) not in stats:
            raise ValueError(f"no measurements for adapter {name!r}")
    a, b = stats[(adapter,)].mean, stats[(baseline,)].mean
    return AdapterComparison(adapter, baseline, a, b, a - b, 100.0 * (a - b) / b)
