"""Measurement mesh: scheduled sweeps over every endpoint pair.

One measurement launches ``concurrency`` transfers at once between a
source/destination pair and reports

    throughput_gbps = n_ok * file_size_bytes * 8 / mean(duration of ok transfers) / 1e9

Defaults follow the reference campaign: 11 concurrent 1 GB transfers per pair,
once with 8 streams and once with 1, every 12 hours.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
import os
import socket
import ssl
import statistics
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence
from urllib.parse import urlsplit

from .storage import generate_bytes
from .transfer import (
    ProtocolAdapter,
    TransferResult,
    TransferSpec,
    head_object,
    make_adapter,
    measure_rtt,
    put_object,
)

__all__ = [
    "AllTransfersFailed",
    "CampaignStore",
    "GroupStats",
    "Measurement",
    "MeshConfig",
    "MeshEndpoint",
    "NoReachableEndpoints",
    "Orchestrator",
    "aggregate",
    "compute_throughput_gbps",
    "load_mesh_config",
]

log = logging.getLogger(__name__)

DEFAULT_CONCURRENCY = 11
DEFAULT_FILE_SIZE = 1_000_000_000
DEFAULT_STREAMS = (8, 1)
DEFAULT_INTERVAL_HOURS = 12.0
RTT_SAMPLES = 5
STORE_FORMAT = "tpcbench-measurements/1"
GROUP_KEYS = ("adapter", "stream_count", "latency_bucket", "source", "destination")


class AllTransfersFailed(RuntimeError):
    pass


class NoReachableEndpoints(RuntimeError):
    pass


@dataclass(frozen=True)
class MeshEndpoint:
    name: str
    base_url: str
    probe_address: str | None = None


@dataclass
class MeshConfig:
    endpoints: list[MeshEndpoint]
    results_path: str = "results.jsonl"
    adapters: list[str] = field(default_factory=lambda: ["https-tpc"])
    stream_settings: list[int] = field(default_factory=lambda: list(DEFAULT_STREAMS))
    concurrency: int = DEFAULT_CONCURRENCY
    file_size_bytes: int = DEFAULT_FILE_SIZE
    interval_hours: float = DEFAULT_INTERVAL_HOURS
    ca_file: str | None = None
    cert_file: str | None = None
    key_file: str | None = None
    transfer_timeout: float = 300.0
    seed: int = 0

    def __post_init__(self):
        self.endpoints = [e if isinstance(e, MeshEndpoint) else MeshEndpoint(**e) for e in self.endpoints]
        if len(self.endpoints) < 2:
            raise ValueError("a mesh needs at least 2 endpoints")
        names = [e.name for e in self.endpoints]
        if len(set(names)) != len(names):
            raise ValueError("endpoint names must be unique")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if not self.stream_settings or any(s < 1 for s in self.stream_settings):
            raise ValueError("stream_settings must be a nonempty list of positive integers")
        if not self.adapters:
            raise ValueError("at least one adapter is required")
        if self.file_size_bytes < 1:
            raise ValueError("file_size_bytes must be >= 1")
        if self.interval_hours <= 0:
            raise ValueError("interval_hours must be > 0")

    def ssl_context(self) -> ssl.SSLContext:
        ctx = ssl.create_default_context(cafile=self.ca_file)
        if self.cert_file and self.key_file:
            ctx.load_cert_chain(self.cert_file, self.key_file)
        return ctx


def load_mesh_config(path: str | os.PathLike) -> MeshConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    base = Path(path).parent
    for key in ("ca_file", "cert_file", "key_file", "results_path"):
        if raw.get(key) and not os.path.isabs(raw[key]):
            raw[key] = str(base / raw[key])
    return MeshConfig(**raw)


def _tcp_reachable(endpoint: MeshEndpoint, timeout: float = 3.0) -> bool:
    parts = urlsplit(endpoint.base_url)
    try:
        socket.create_connection((parts.hostname, parts.port or 443), timeout=timeout).close()
    except (OSError, TypeError):
        return False
    return True


def _utcnow() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="microseconds")


def compute_throughput_gbps(durations: Sequence[float], file_size_bytes: int) -> float:
    """Total bytes over the mean single-transfer duration, in decimal Gbps."""
    if not durations:
        raise ValueError("no durations")
    mean = math.fsum(durations) / len(durations)
    return len(durations) * file_size_bytes * 8 / mean / 1e9


@dataclass
class Measurement:
    source: str
    destination: str
    adapter: str
    stream_count: int
    concurrency: int
    file_size_bytes: int
    throughput_gbps: float
    rtt_ms: float | None
    transfer_durations_s: list[float]
    failures: int
    timestamp: str
    wallclock_gbps: float | None = None

    def __post_init__(self):
        if self.source == self.destination:
            raise ValueError("source and destination must differ")
        if not 0 <= self.failures <= self.concurrency:
            raise ValueError("failures must be within [0, concurrency]")
        if not self.throughput_gbps > 0:
            raise ValueError("throughput_gbps must be > 0")
        if self.rtt_ms is not None and self.rtt_ms < 0:
            raise ValueError("rtt_ms must be >= 0")

    @property
    def time(self) -> dt.datetime:
        stamp = self.timestamp
        if stamp.endswith("Z"):
            stamp = stamp[:-1] + "+00:00"
        t = dt.datetime.fromisoformat(stamp)
        return t if t.tzinfo else t.replace(tzinfo=dt.timezone.utc)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Measurement":
        return cls(**d)


class CampaignStore:
    """Append-only JSON-lines file of Measurement records.

    The first line is a metadata header (``{"_meta": ...}``) describing how
    records were produced; every later line is one Measurement.
    """

    def __init__(self, path: str | os.PathLike, meta: dict | None = None):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._meta = meta or {}

    def _ensure_header(self) -> None:
        if self.path.exists() and self.path.stat().st_size > 0:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        header = {"_meta": {"format": STORE_FORMAT, **self._meta}}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")

    def append(self, m: Measurement) -> None:
        with self._lock:
            self._ensure_header()
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(m.to_json() + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def meta(self) -> dict:
        if not self.path.exists():
            return {}
        with open(self.path, encoding="utf-8") as fh:
            first = fh.readline()
        try:
            return json.loads(first).get("_meta", {})
        except (json.JSONDecodeError, AttributeError):
            return {}

    def load(self) -> list[Measurement]:
        if not self.path.exists():
            return []
        out = []
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{self.path}:{lineno}: {exc}") from exc
                if "_meta" in obj:
                    continue
                out.append(Measurement.from_dict(obj))
        return out

    def __iter__(self):
        return iter(self.load())


@dataclass(frozen=True)
class GroupStats:
    mean: float
    count: int
    stddev: float


def _group_value(m: Measurement, key: str, bucket_width_ms: float) -> object:
    if key == "latency_bucket":
        if m.rtt_ms is None:
            return None
        return int(math.floor(m.rtt_ms / bucket_width_ms))
    return getattr(m, key)


def aggregate(
    store: CampaignStore | Iterable[Measurement],
    group_keys: Sequence[str] = ("adapter", "stream_count"),
    bucket_width_ms: float = 10.0,
) -> dict[tuple, GroupStats]:
    """Mean, count and population stddev of throughput per group.

    Keys are tuples in ``group_keys`` order; ``latency_bucket`` is
    ``floor(rtt_ms / bucket_width_ms)`` and records without an RTT are left
    out of any grouping that uses it.
    """
    records = store.load() if isinstance(store, CampaignStore) else list(store)
    if not records:
        raise ValueError("no measurements to aggregate")
    bad = [k for k in group_keys if k not in GROUP_KEYS]
    if bad:
        raise ValueError(f"unknown group keys {bad}; allowed {GROUP_KEYS}")
    if bucket_width_ms <= 0:
        raise ValueError("bucket_width_ms must be > 0")
    groups: dict[tuple, list[float]] = {}
    for m in records:
        key = tuple(_group_value(m, k, bucket_width_ms) for k in group_keys)
        if "latency_bucket" in group_keys and m.rtt_ms is None:
            continue
        groups.setdefault(key, []).append(m.throughput_gbps)
    return {
        k: GroupStats(statistics.fmean(v), len(v), statistics.pstdev(v))
        for k, v in sorted(groups.items(), key=lambda kv: repr(kv[0]))
    }


class Orchestrator:
    """Runs measurements for a mesh and persists them.

    ``adapters`` maps names to adapter instances; by default they are built
    from ``config.adapters`` with the config's TLS context. ``rtt_probe``
    replaces :func:`measure_rtt` (tests use it to avoid the network).
    """

    def __init__(
        self,
        config: MeshConfig,
        adapters: dict[str, ProtocolAdapter] | None = None,
        store: CampaignStore | None = None,
        ssl_context: ssl.SSLContext | None = None,
        rtt_probe: Callable[[str], float | None] | None = None,
        reachable: Callable[[MeshEndpoint], bool] | None = None,
    ):
        self.config = config
        self.ssl_context = ssl_context
        if adapters is None:
            if self.ssl_context is None:
                self.ssl_context = config.ssl_context()
            adapters = {name: make_adapter(name, self.ssl_context) for name in config.adapters}
        self.adapters = adapters
        self.store = store or CampaignStore(
            config.results_path,
            meta={"source_objects": "distinct", "throughput": "n*size*8/mean(duration)/1e9"},
        )
        self.rtt_probe = rtt_probe or self._probe_rtt
        self.reachable = reachable or _tcp_reachable
        self._staged: set[tuple[str, int, int]] = set()
        self._run_id = uuid.uuid4().hex[:8]

    # -- staging --------------------------------------------------------

    @staticmethod
    def source_path(index: int, size: int) -> str:
        return f"/tpcbench/source/{size}/file-{index:03d}"

    def stage_sources(self, endpoint: MeshEndpoint, count: int, size: int) -> None:
        """Make sure ``count`` distinct generated objects exist on ``endpoint``."""
        for i in range(count):
            key = (endpoint.name, i, size)
            if key in self._staged:
                continue
            url = endpoint.base_url.rstrip("/") + self.source_path(i, size)
            info = head_object(url, self.ssl_context, want_digest=False)
            if info is None or info["size"] != size:
                put_object(url, generate_bytes(size, self.config.seed + i), size, self.ssl_context)
            self._staged.add(key)

    def reset_staging(self) -> None:
        self._staged.clear()

    def _probe_rtt(self, address: str | None) -> float | None:
        if not address:
            return None
        try:
            return measure_rtt(address, RTT_SAMPLES)
        except (OSError, ValueError) as exc:
            log.warning("RTT probe to %s failed: %s", address, exc)
            return None

    # -- measurement ----------------------------------------------------

    def _endpoint(self, ref: MeshEndpoint | str) -> MeshEndpoint:
        if isinstance(ref, MeshEndpoint):
            return ref
        for e in self.config.endpoints:
            if e.name == ref:
                return e
        raise KeyError(f"unknown endpoint {ref!r}")

    def run_measurement(
        self,
        source: MeshEndpoint | str,
        destination: MeshEndpoint | str,
        adapter: str,
        stream_count: int,
        concurrency: int | None = None,
        file_size_bytes: int | None = None,
    ) -> Measurement:
        src, dst = self._endpoint(source), self._endpoint(destination)
        if src.name == dst.name:
            raise ValueError("source and destination must differ")
        concurrency = concurrency or self.config.concurrency
        size = file_size_bytes or self.config.file_size_bytes
        impl = self.adapters[adapter]
        if impl.requires_staging:
            self.stage_sources(src, concurrency, size)
        tag = f"{self._run_id}-{uuid.uuid4().hex[:8]}"
        specs = []
        for i in range(concurrency):
            dest_path = f"/tpcbench/dest/{src.name}/{adapter}/{stream_count}/{tag}-{i:03d}"
            specs.append(
                TransferSpec(
                    source_url=impl.source_url(src.base_url, src.probe_address, self.source_path(i, size)),
                    dest_url=impl.dest_url(dst.base_url, dst.probe_address, dest_path),
                    stream_count=stream_count,
                    file_size_bytes=size,
                    timeout=self.config.transfer_timeout,
                )
            )
        results = self._run_concurrently(impl, specs)
        for spec in specs:
            impl.cleanup(spec)
        ok = [r for r in results if r.succeeded]
        failures = len(results) - len(ok)
        for r in results:
            if not r.succeeded:
                log.warning("%s -> %s transfer failed: %s", src.name, dst.name, r.reason)
        if not ok:
            raise AllTransfersFailed(
                f"all {len(results)} transfers {src.name} -> {dst.name} failed: {results[0].reason}"
            )
        durations = [r.duration_s for r in ok]
        wall = max(r.ended_at for r in ok) - min(r.started_at for r in ok)
        m = Measurement(
            source=src.name,
            destination=dst.name,
            adapter=adapter,
            stream_count=stream_count,
            concurrency=concurrency,
            file_size_bytes=size,
            throughput_gbps=compute_throughput_gbps(durations, size),
            rtt_ms=self.rtt_probe(src.probe_address),
            transfer_durations_s=durations,
            failures=failures,
            timestamp=_utcnow(),
            wallclock_gbps=len(ok) * size * 8 / wall / 1e9 if wall > 0 else None,
        )
        self.store.append(m)
        return m

    @staticmethod
    def _run_concurrently(impl: ProtocolAdapter, specs: list[TransferSpec]) -> list[TransferResult]:
        results: list[TransferResult | None] = [None] * len(specs)
        barrier = threading.Barrier(len(specs))

        def run(i: int) -> None:
            barrier.wait()
            try:
                results[i] = impl.transfer(specs[i])
            except Exception as exc:  # adapters should not raise; record it anyway
                now = time.monotonic()
                results[i] = TransferResult(specs[i], "failed", now, now, 0, f"adapter error: {exc}")

        threads = [threading.Thread(target=run, args=(i,), daemon=True) for i in range(len(specs))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return [r for r in results if r is not None]

    def run_mesh_sweep(self) -> list[Measurement]:
        """One measurement per ordered pair, adapter and stream setting, in order."""
        self.reset_staging()
        up = [e for e in self.config.endpoints if self.reachable(e)]
        for e in self.config.endpoints:
            if e not in up:
                log.error("endpoint %s (%s) is unreachable", e.name, e.base_url)
        if not up:
            raise NoReachableEndpoints("no endpoint in the mesh is reachable")
        out: list[Measurement] = []
        attempted = 0
        for src in self.config.endpoints:
            for dst in self.config.endpoints:
                if src.name == dst.name:
                    continue
                for adapter in self.config.adapters:
                    for streams in self.config.stream_settings:
                        attempted += 1
                        try:
                            out.append(self.run_measurement(src, dst, adapter, streams))
                        except Exception as exc:
                            log.error(
                                "measurement %s -> %s (%s, %d streams) failed: %s",
                                src.name, dst.name, adapter, streams, exc,
                            )
        log.info("sweep finished: %d of %d measurements recorded", len(out), attempted)
        if attempted and not out:
            log.error("no endpoint pair produced a measurement")
        return out

    def schedule_campaign(
        self,
        once: bool = False,
        stop: threading.Event | None = None,
        clock: Callable[[], float] = time.monotonic,
        sweep: Callable[[], object] | None = None,
        max_sweeps: int | None = None,
    ) -> dict:
        """Sweep now and then every ``interval_hours`` until ``stop`` is set.

        A sweep that runs past one or more scheduled start times causes those
        occurrences to be skipped, never overlapped. Returns counters.
        """
        stop = stop or threading.Event()
        sweep = sweep or self.run_mesh_sweep
        interval = self.config.interval_hours * 3600.0
        self._check_store_writable()
        stats = {"sweeps": 0, "skipped": 0, "starts": []}
        next_start = clock()
        while not stop.is_set():
            wait = next_start - clock()
            if wait > 0 and stop.wait(wait):
                break
            started = clock()
            stats["starts"].append(started)
            sweep()
            stats["sweeps"] += 1
            if once or (max_sweeps is not None and stats["sweeps"] >= max_sweeps):
                break
            next_start += interval
            now = clock()
            if now > next_start:
                missed = int((now - next_start) // interval) + 1
                stats["skipped"] += missed
                log.warning("sweep overran its interval; skipping %d scheduled run(s)", missed)
                next_start += missed * interval
        return stats

    def _check_store_writable(self) -> None:
        path = self.store.path
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "a", encoding="utf-8"):
                pass
        except OSError as exc:
            raise RuntimeError(f"results store {path} is not writable: {exc}") from exc
