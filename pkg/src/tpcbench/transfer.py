"""Client side of third-party copy and the supporting network probes.

The :class:`HttpsTpcAdapter` plays the lightweight third party: it asks the
destination endpoint to COPY from the source and only ever sees performance
markers, never payload bytes. :class:`RawStreamAdapter` pushes generated
bytes straight over TCP as a protocol-free baseline. Both time transfers with
the client's monotonic clock.
"""

from __future__ import annotations

import http.client
import logging
import os
import socket
import socketserver
import ssl
import statistics
import struct
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable
from urllib.parse import urlsplit

from .endpoint import partition_ranges
from .markers import MarkerParser, PerfMarker, PerfMarkerParseError
from .storage import DiskStorage, MemoryStorage, StorageBackend, generate_test_file

__all__ = [
    "ADAPTERS",
    "HttpsTpcAdapter",
    "ProbeResponder",
    "ProtocolAdapter",
    "RawStreamAdapter",
    "TransferResult",
    "TransferSpec",
    "delete_object",
    "get_object",
    "head_object",
    "local_copy_benchmark",
    "make_adapter",
    "measure_rtt",
    "parse_address",
    "put_object",
    "raw_throughput_probe",
    "tpc_transfer",
]

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0
DEFAULT_STREAMS = 8
_FRAME = struct.Struct("!I")
_TOTAL = struct.Struct("!Q")
_PAYLOAD = os.urandom(64 * 1024)


@dataclass(frozen=True)
class TransferSpec:
    source_url: str
    dest_url: str
    stream_count: int = DEFAULT_STREAMS
    file_size_bytes: int | None = None
    verify_digest: bool = False
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if self.stream_count < 1:
            raise ValueError("stream_count must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


@dataclass
class TransferResult:
    spec: TransferSpec
    status: str
    started_at: float
    ended_at: float
    bytes_transferred: int = 0
    reason: str = ""
    markers: list[PerfMarker] = field(default_factory=list)
    adapter: str = ""

    @property
    def duration_s(self) -> float:
        return self.ended_at - self.started_at

    @property
    def succeeded(self) -> bool:
        return self.status == "succeeded"


def parse_address(addr: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    text = addr.split("://", 1)[-1].rstrip("/")
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host.strip("[]") or "127.0.0.1", int(port)


def final_stripe_totals(markers: Iterable[PerfMarker]) -> dict[int, int]:
    totals: dict[int, int] = {}
    for m in markers:
        totals[m.stripe_index] = max(totals.get(m.stripe_index, 0), m.stripe_bytes_transferred)
    return totals


class ProtocolAdapter:
    """A transfer protocol the orchestrator can benchmark."""

    name = "abstract"
    multi_stream = False
    third_party = False
    requires_staging = False

    def transfer(self, spec: TransferSpec) -> TransferResult:
        raise NotImplementedError

    def source_url(self, base_url: str, probe_address: str | None, path: str) -> str:
        return base_url.rstrip("/") + "/" + path.lstrip("/")

    def dest_url(self, base_url: str, probe_address: str | None, path: str) -> str:
        return base_url.rstrip("/") + "/" + path.lstrip("/")

    def cleanup(self, spec: TransferSpec) -> None:
        """Remove whatever a transfer left at the destination."""

    def _failed(self, spec, started, reason, markers=()) -> TransferResult:
        return TransferResult(
            spec, "failed", started, time.monotonic(), 0, reason, list(markers), self.name
        )


class HttpsTpcAdapter(ProtocolAdapter):
    name = "https-tpc"
    multi_stream = True
    third_party = True
    requires_staging = True

    def __init__(self, context: ssl.SSLContext | None = None):
        self.context = context or ssl.create_default_context()

    def _connect(self, url: str, timeout: float) -> http.client.HTTPSConnection:
        parts = urlsplit(url)
        if parts.scheme != "https":
            raise ValueError(f"expected an https URL, got {url!r}")
        return http.client.HTTPSConnection(
            parts.hostname, parts.port or 443, context=self.context, timeout=timeout
        )

    def transfer(self, spec: TransferSpec) -> TransferResult:
        started = time.monotonic()
        deadline = started + spec.timeout
        try:
            conn = self._connect(spec.dest_url, spec.timeout)
        except ValueError as exc:
            return self._failed(spec, started, str(exc))
        parser = MarkerParser()
        try:
            headers = {
                "Source": spec.source_url,
                "X-Number-Of-Streams": str(spec.stream_count),
            }
            if spec.verify_digest:
                headers["Want-Digest"] = "adler32"
            path = urlsplit(spec.dest_url).path or "/"
            try:
                conn.request("COPY", path, headers=headers)
                resp = conn.getresponse()
            except (OSError, http.client.HTTPException) as exc:
                return self._failed(spec, started, f"cannot reach destination: {exc}")
            if resp.status != 201:
                body = resp.read(4096).decode("utf-8", "replace").strip()
                return self._failed(spec, started, f"destination answered HTTP {resp.status}: {body}")
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise socket.timeout()
                conn.sock.settimeout(remaining)
                data = resp.read1(65536)
                if not data:
                    break
                parser.feed(data)
            markers, terminal = parser.close()
        except (socket.timeout, TimeoutError):
            return self._failed(spec, started, f"timed out after {spec.timeout:g}s", parser.markers)
        except PerfMarkerParseError as exc:
            return self._failed(spec, started, f"bad marker stream: {exc}", parser.markers)
        except (OSError, http.client.HTTPException) as exc:
            return self._failed(spec, started, f"connection lost: {exc}", parser.markers)
        finally:
            conn.close()
        ended = time.monotonic()
        if not terminal.success:
            return TransferResult(spec, "failed", started, ended, 0, terminal.reason, markers, self.name)
        moved = sum(final_stripe_totals(markers).values())
        if spec.file_size_bytes is not None and moved != spec.file_size_bytes:
            return TransferResult(
                spec, "failed", started, ended, moved,
                f"moved {moved} bytes, expected {spec.file_size_bytes}", markers, self.name,
            )
        return TransferResult(spec, "succeeded", started, ended, moved, "", markers, self.name)

    def cleanup(self, spec: TransferSpec) -> None:
        try:
            delete_object(spec.dest_url, self.context)
        except (OSError, http.client.HTTPException) as exc:
            log.warning("could not delete %s: %s", spec.dest_url, exc)


class RawStreamAdapter(ProtocolAdapter):
    """Push generated bytes to a probe responder; no third party, no storage."""

    name = "raw-stream"
    multi_stream = True

    def source_url(self, base_url, probe_address, path):
        return "generated:" + path

    def dest_url(self, base_url, probe_address, path):
        if not probe_address:
            raise ValueError("raw-stream needs a probe address on the destination")
        return "tcp://" + probe_address

    def transfer(self, spec: TransferSpec) -> TransferResult:
        started = time.monotonic()
        size = spec.file_size_bytes or 0
        try:
            addr = parse_address(spec.dest_url)
        except ValueError as exc:
            return self._failed(spec, started, str(exc))
        results: list[int] = []
        errors: list[str] = []
        lock = threading.Lock()

        def push(n: int) -> None:
            try:
                got = _push_bytes(addr, n, started + spec.timeout)
                with lock:
                    results.append(got)
            except OSError as exc:
                with lock:
                    errors.append(str(exc))

        threads = [
            threading.Thread(target=push, args=(b - a,), daemon=True)
            for a, b in partition_ranges(size, spec.stream_count)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        ended = time.monotonic()
        moved = sum(results)
        if errors:
            return TransferResult(spec, "failed", started, ended, moved, errors[0], [], self.name)
        if moved != size:
            return TransferResult(
                spec, "failed", started, ended, moved, f"peer acknowledged {moved} of {size} bytes",
                [], self.name,
            )
        return TransferResult(spec, "succeeded", started, ended, moved, "", [], self.name)


ADAPTERS: dict[str, type[ProtocolAdapter]] = {
    HttpsTpcAdapter.name: HttpsTpcAdapter,
    RawStreamAdapter.name: RawStreamAdapter,
}


def make_adapter(name: str, context: ssl.SSLContext | None = None) -> ProtocolAdapter:
    try:
        cls = ADAPTERS[name]
    except KeyError:
        raise ValueError(f"unknown adapter {name!r}; known: {sorted(ADAPTERS)}") from None
    return cls(context) if cls is HttpsTpcAdapter else cls()


def tpc_transfer(adapter: ProtocolAdapter, spec: TransferSpec) -> TransferResult:
    """Run one transfer through ``adapter``; failures come back as results."""
    return adapter.transfer(spec)


# -- plain HTTPS object helpers used for staging and cleanup ---------------


def _https(url: str, context: ssl.SSLContext, timeout: float = 60.0):
    parts = urlsplit(url)
    conn = http.client.HTTPSConnection(parts.hostname, parts.port or 443, context=context, timeout=timeout)
    return conn, parts.path or "/"


def head_object(url: str, context: ssl.SSLContext, want_digest: bool = False) -> dict | None:
    """Size and digest of a remote object, or None when absent."""
    conn, path = _https(url, context)
    try:
        conn.request("HEAD", path, headers={"Want-Digest": "adler32"} if want_digest else {})
        resp = conn.getresponse()
        resp.read()
        if resp.status == 404:
            return None
        if resp.status != 200:
            raise http.client.HTTPException(f"HEAD {url}: HTTP {resp.status}")
        digest = (resp.getheader("Digest") or "").partition("=")[2] or None
        return {"size": int(resp.getheader("Content-Length", "0")), "digest": digest}
    finally:
        conn.close()


def put_object(
    url: str, chunks: Iterable[bytes], size: int, context: ssl.SSLContext, timeout: float = 300.0
) -> str | None:
    """Upload ``size`` bytes; returns the adler32 digest the server computed."""
    conn, path = _https(url, context, timeout)
    try:
        conn.putrequest("PUT", path)
        conn.putheader("Content-Length", str(size))
        conn.putheader("Want-Digest", "adler32")
        conn.endheaders()
        for chunk in chunks:
            conn.send(chunk)
        resp = conn.getresponse()
        body = resp.read()
        if resp.status not in (200, 201, 204):
            raise http.client.HTTPException(f"PUT {url}: HTTP {resp.status} {body[:200]!r}")
        return (resp.getheader("Digest") or "").partition("=")[2] or None
    finally:
        conn.close()


def get_object(url: str, context: ssl.SSLContext, byte_range: tuple[int, int] | None = None) -> bytes:
    conn, path = _https(url, context)
    try:
        headers = {"Range": f"bytes={byte_range[0]}-{byte_range[1]}"} if byte_range else {}
        conn.request("GET", path, headers=headers)
        resp = conn.getresponse()
        body = resp.read()
        if resp.status not in (200, 206):
            raise http.client.HTTPException(f"GET {url}: HTTP {resp.status}")
        return body
    finally:
        conn.close()


def delete_object(url: str, context: ssl.SSLContext) -> bool:
    conn, path = _https(url, context)
    try:
        conn.request("DELETE", path)
        resp = conn.getresponse()
        resp.read()
        return resp.status in (200, 204)
    finally:
        conn.close()


# -- probe responder: echo for RTT, sink for bulk throughput ---------------


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return bytes(buf)


class _ProbeHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            mode = sock.recv(1)
            if mode == b"E":
                while True:
                    data = sock.recv(64)
                    if not data:
                        return
                    sock.sendall(data)
            elif mode == b"T":
                total = 0
                buf = bytearray(256 * 1024)
                view = memoryview(buf)
                while True:
                    (length,) = _FRAME.unpack(_recv_exact(sock, _FRAME.size))
                    if length == 0:
                        sock.sendall(_TOTAL.pack(total))
                        return
                    remaining = length
                    while remaining:
                        n = sock.recv_into(view[: min(remaining, len(buf))])
                        if not n:
                            return
                        remaining -= n
                        total += n
        except OSError:
            return


class _ProbeServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    block_on_close = False


class ProbeResponder:
    """Peer side of :func:`measure_rtt` and :func:`raw_throughput_probe`."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._server = _ProbeServer((host, port), _ProbeHandler)
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.1}, daemon=True)

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "ProbeResponder":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "ProbeResponder":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def _open(addr: tuple[str, int], timeout: float) -> socket.socket:
    sock = socket.create_connection(addr, timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def _push_bytes(addr: tuple[str, int], nbytes: int, deadline: float) -> int:
    with _open(addr, max(0.1, deadline - time.monotonic())) as sock:
        sock.sendall(b"T")
        remaining = nbytes
        while remaining:
            n = min(remaining, len(_PAYLOAD))
            sock.sendall(_FRAME.pack(n) + _PAYLOAD[:n])
            remaining -= n
        sock.sendall(_FRAME.pack(0))
        sock.settimeout(max(0.1, deadline - time.monotonic()))
        (total,) = _TOTAL.unpack(_recv_exact(sock, _TOTAL.size))
        return total


def raw_throughput_probe(peer_address, stream_count: int = 8, duration_s: float = 2.0) -> float:
    """Bulk TCP throughput to a probe responder in Gbps.

    Each of ``stream_count`` connections pushes for ``duration_s``; the rate is
    bytes acknowledged by the peer over the time until the last acknowledgement.
    """
    if stream_count < 1:
        raise ValueError("stream_count must be >= 1")
    if duration_s <= 0:
        raise ValueError("duration_s must be > 0")
    addr = parse_address(peer_address)
    socks = [_open(addr, 10.0) for _ in range(stream_count)]
    totals: list[int] = [0] * stream_count
    errors: list[BaseException] = []
    barrier = threading.Barrier(stream_count + 1)
    frame = _FRAME.pack(len(_PAYLOAD)) + _PAYLOAD

    def run(i: int, sock: socket.socket) -> None:
        try:
            sock.sendall(b"T")
            barrier.wait()
            stop = time.monotonic() + duration_s
            while time.monotonic() < stop:
                sock.sendall(frame)
            sock.sendall(_FRAME.pack(0))
            sock.settimeout(60 + duration_s)
            (totals[i],) = _TOTAL.unpack(_recv_exact(sock, _TOTAL.size))
        except (OSError, threading.BrokenBarrierError) as exc:
            errors.append(exc)
        finally:
            sock.close()

    threads = [threading.Thread(target=run, args=(i, s), daemon=True) for i, s in enumerate(socks)]
    for t in threads:
        t.start()
    barrier.wait()
    start = time.monotonic()
    for t in threads:
        t.join()
    elapsed = time.monotonic() - start
    if errors:
        raise ConnectionError(f"throughput probe failed: {errors[0]}")
    return sum(totals) * 8 / elapsed / 1e9


def measure_rtt(peer_address, samples: int = 5, timeout: float = 10.0) -> float:
    """Median application-level echo round trip in milliseconds."""
    if samples < 3:
        raise ValueError("samples must be >= 3")
    addr = parse_address(peer_address)
    rtts = []
    with _open(addr, timeout) as sock:
        sock.sendall(b"E")
        for i in range(samples):
            payload = struct.pack("!Q", i)
            t0 = time.perf_counter()
            sock.sendall(payload)
            if _recv_exact(sock, len(payload)) != payload:
                raise ConnectionError("echo mismatch")
            rtts.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(rtts)


# -- local copy benchmark (no network) --------------------------------------


def _available_memory() -> int | None:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def _copy_object(src: StorageBackend, dst: StorageBackend, path: str) -> None:
    writer = dst.open_writer(path, src.size(path))
    pos = 0
    for chunk in src.read(path):
        writer.write_at(pos, chunk)
        pos += len(chunk)
    writer.commit()


def local_copy_benchmark(concurrency: int, file_size_bytes: int, backend: str = "memory", root=None) -> float:
    """Aggregate Gbps of ``concurrency`` simultaneous copies between two storage areas."""
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    if file_size_bytes < 1:
        raise ValueError("file_size_bytes must be >= 1")
    if backend == "memory":
        need = 2 * concurrency * file_size_bytes
        avail = _available_memory()
        if avail is not None and need > 0.8 * avail:
            raise MemoryError(f"need {need} bytes of memory, {avail} available")
    tmp = None
    if backend == "memory":
        src, dst = MemoryStorage(), MemoryStorage()
    elif backend == "disk":
        if root is None:
            tmp = tempfile.TemporaryDirectory(prefix="tpcbench-local-")
            root = tmp.name
        src, dst = DiskStorage(os.path.join(root, "a")), DiskStorage(os.path.join(root, "b"))
    else:
        raise ValueError(f"backend must be memory or disk, got {backend!r}")
    try:
        names = [f"/bench/{i}" for i in range(concurrency)]
        for i, name in enumerate(names):
            generate_test_file(src, name, file_size_bytes, seed=i)
        barrier = threading.Barrier(concurrency + 1)
        errors: list[BaseException] = []

        def run(name: str) -> None:
            barrier.wait()
            try:
                _copy_object(src, dst, name)
            except BaseException as exc:  # reported below
                errors.append(exc)

        threads = [threading.Thread(target=run, args=(n,), daemon=True) for n in names]
        for t in threads:
            t.start()
        barrier.wait()
        start = time.perf_counter()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - start
        if errors:
            raise errors[0]
        return concurrency * file_size_bytes * 8 / elapsed / 1e9
    finally:
        if tmp is not None:
            tmp.cleanup()
