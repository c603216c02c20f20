"""HTTPS storage endpoint with GET/PUT/HEAD/DELETE and pull-mode COPY.

A COPY request names the destination path in the request line and the
source in a ``Source`` header. The endpoint answers ``201 Created`` at once
and then streams performance markers while it pulls the object from the
source, one ranged GET per stream, before finishing with a single
``success: Created`` or ``failure: <reason>`` line.
"""

from __future__ import annotations

import http.client
import logging
import os
import re
import socket
import ssl
import threading
import time
import uuid
import zlib
from collections import deque
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import unquote, urlsplit

from .ca import CertAuthority, HostCredential
from .markers import PerfMarker, format_failure, format_marker, format_success
from .storage import (
    CapacityError,
    NotFound,
    PathEscape,
    StorageBackend,
    StorageError,
    format_adler32,
    normalize_path,
)
from .tls import client_context, server_context

__all__ = [
    "AccessRecord",
    "EndpointConfig",
    "EndpointError",
    "EndpointHandle",
    "TransferSession",
    "partition_ranges",
    "serve",
]

log = logging.getLogger(__name__)

STRIPE_RETRIES = 2
IO_CHUNK = 256 * 1024
MARKER_CONTENT_TYPE = "text/perf-marker-stream"
_RANGE_RE = re.compile(r"bytes=(\d*)-(\d*)")


class EndpointError(RuntimeError):
    """Endpoint could not start."""


def partition_ranges(size: int, streams: int) -> list[tuple[int, int]]:
    """Split ``[0, size)`` into ``streams`` contiguous half-open ranges.

    The first ``size % streams`` ranges are one byte longer. Ranges may be
    empty when ``size < streams``.
    """
    if streams < 1:
        raise ValueError("streams must be >= 1")
    if size < 0:
        raise ValueError("size must be >= 0")
    base, extra = divmod(size, streams)
    out = []
    start = 0
    for i in range(streams):
        length = base + (1 if i < extra else 0)
        out.append((start, start + length))
        start += length
    return out


@dataclass
class EndpointConfig:
    storage: StorageBackend
    credential: HostCredential
    trust: CertAuthority | None = None
    listen_port: int = 0
    listen_host: str = "127.0.0.1"
    require_client_cert: bool = False
    marker_period: float = 5.0
    max_sessions: int = 64
    source_timeout: float = 60.0

    def __post_init__(self):
        if self.marker_period <= 0:
            raise ValueError("marker_period must be > 0")
        if self.max_sessions < 1:
            raise ValueError("max_sessions must be >= 1")


@dataclass
class TransferSession:
    session_id: str
    source_url: str
    dest_path: str
    stream_count: int
    direction: str = "pull"
    stripe_bytes: list[int] = field(default_factory=list)
    state: str = "running"
    reason: str = ""
    size: int | None = None
    started_at: float = field(default_factory=time.time)
    ended_at: float | None = None

    def __post_init__(self):
        if not self.stripe_bytes:
            self.stripe_bytes = [0] * self.stream_count


@dataclass(frozen=True)
class AccessRecord:
    method: str
    path: str
    status: int
    byte_range: tuple[int, int] | None  # inclusive, as served
    timestamp: float
    peer: str


class _StripeFailed(Exception):
    pass


class _CopySession:
    """One pull transfer run on behalf of a COPY request."""

    def __init__(self, endpoint: "_Server", record: TransferSession, want_digest: bool):
        self.endpoint = endpoint
        self.record = record
        self.want_digest = want_digest
        self.done = threading.Event()
        self.cancelled = threading.Event()
        self.digest: str | None = None
        self._thread = threading.Thread(target=self._run, daemon=True, name=f"copy-{record.session_id}")

    def start(self) -> None:
        self._thread.start()

    def cancel(self) -> None:
        self.cancelled.set()

    def markers(self) -> list[PerfMarker]:
        now = int(time.time())
        k = self.record.stream_count
        return [PerfMarker(now, i, b, k) for i, b in enumerate(list(self.record.stripe_bytes))]

    def _connect(self) -> http.client.HTTPSConnection:
        url = urlsplit(self.record.source_url)
        return http.client.HTTPSConnection(
            url.hostname,
            url.port or 443,
            context=self.endpoint.client_ssl,
            timeout=self.endpoint.config.source_timeout,
        )

    def _source_target(self) -> str:
        url = urlsplit(self.record.source_url)
        return url.path + (f"?{url.query}" if url.query else "")

    def _probe(self) -> tuple[int, str | None]:
        conn = self._connect()
        try:
            headers = {"Want-Digest": "adler32"} if self.want_digest else {}
            try:
                conn.request("HEAD", self._source_target(), headers=headers)
                resp = conn.getresponse()
                resp.read()
            except (OSError, http.client.HTTPException) as exc:
                raise _StripeFailed(f"source unreachable: {exc}") from exc
            if resp.status == 404:
                raise _StripeFailed("source object not found")
            if resp.status != 200:
                raise _StripeFailed(f"source size probe failed: HTTP {resp.status}")
            length = resp.getheader("Content-Length")
            if length is None or not length.isdigit():
                raise _StripeFailed("source did not report a content length")
            digest = None
            for part in (resp.getheader("Digest") or "").split(","):
                name, _, value = part.strip().partition("=")
                if name.lower() == "adler32" and value:
                    digest = value.lower()
            return int(length), digest
        finally:
            conn.close()

    def _fetch_stripe(self, index: int, start: int, end: int, writer, ranged: bool) -> None:
        counters = self.record.stripe_bytes
        attempts = 0
        buf = bytearray(IO_CHUNK)
        view = memoryview(buf)
        while True:
            if self.cancelled.is_set():
                raise _StripeFailed("transfer cancelled")
            pos = start + counters[index]
            if pos >= end:
                return
            conn = self._connect()
            try:
                headers = {"Range": f"bytes={pos}-{end - 1}"} if (ranged or pos > start) else {}
                conn.request("GET", self._source_target(), headers=headers)
                resp = conn.getresponse()
                expected = 206 if headers else 200
                if resp.status != expected:
                    raise _StripeFailed(f"stripe {index}: source answered HTTP {resp.status}")
                while pos < end:
                    if self.cancelled.is_set():
                        raise _StripeFailed("transfer cancelled")
                    want = min(IO_CHUNK, end - pos)
                    n = resp.readinto(view[:want])
                    if not n:
                        raise _StripeFailed(f"stripe {index}: source closed connection early")
                    writer.write_at(pos, view[:n])
                    pos += n
                    counters[index] += n
                return
            except (OSError, http.client.HTTPException, _StripeFailed) as exc:
                if self.cancelled.is_set():
                    raise _StripeFailed("transfer cancelled") from exc
                attempts += 1
                if attempts > STRIPE_RETRIES:
                    raise _StripeFailed(f"stripe {index} failed after {STRIPE_RETRIES} retries: {exc}") from exc
                log.info("stripe %d retry %d: %s", index, attempts, exc)
                time.sleep(0.1 * attempts)
            finally:
                conn.close()

    def _run(self) -> None:
        rec = self.record
        writer = None
        try:
            size, source_digest = self._probe()
            rec.size = size
            writer = self.endpoint.storage.open_writer(rec.dest_path, size)
            ranges = partition_ranges(size, rec.stream_count)
            errors: list[str] = []
            ranged = rec.stream_count > 1

            def work(i: int, a: int, b: int) -> None:
                try:
                    self._fetch_stripe(i, a, b, writer, ranged)
                except _StripeFailed as exc:
                    errors.append(str(exc))
                    self.cancelled.set()
                except Exception as exc:  # keep the session alive to report it
                    errors.append(f"stripe {i}: {exc}")
                    self.cancelled.set()

            threads = [
                threading.Thread(target=work, args=(i, a, b), daemon=True)
                for i, (a, b) in enumerate(ranges)
                if b > a
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            if errors:
                raise _StripeFailed(errors[0])
            if sum(rec.stripe_bytes) != size:
                raise _StripeFailed("received byte count does not match source size")
            if self.want_digest:
                self.digest = self._digest_of(writer, size)
                if source_digest is not None and source_digest != self.digest:
                    raise _StripeFailed(
                        f"digest mismatch: source adler32={source_digest}, received {self.digest}"
                    )
            writer.commit()
            writer = None
            rec.state = "succeeded"
        except _StripeFailed as exc:
            rec.state, rec.reason = "failed", str(exc)
        except CapacityError as exc:
            rec.state, rec.reason = "failed", str(exc)
        except Exception as exc:
            log.exception("copy session %s crashed", rec.session_id)
            rec.state, rec.reason = "failed", f"internal error: {exc}"
        finally:
            if writer is not None:
                writer.abort()
            rec.ended_at = time.time()
            self.done.set()

    @staticmethod
    def _digest_of(writer, size: int) -> str:
        buf = getattr(writer, "buf", None)
        if buf is not None:
            return format_adler32(zlib.adler32(buf))
        value = 1
        pos = 0
        while pos < size:
            chunk = os.pread(writer.fd, min(IO_CHUNK * 4, size - pos), pos)
            if not chunk:
                break
            value = zlib.adler32(chunk, value)
            pos += len(chunk)
        return format_adler32(value)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "tpcbench"
    sys_version = ""
    timeout = 300
    server: "_Server"

    def log_message(self, format, *args):  # noqa: A002
        log.debug("%s %s", self.address_string(), format % args)

    def _peer(self) -> str:
        return f"{self.client_address[0]}:{self.client_address[1]}"

    def _record(self, status: int, path: str, byte_range=None) -> None:
        self.server.log_access(
            AccessRecord(self.command, path, status, byte_range, time.time(), self._peer())
        )

    def _target(self) -> str:
        return unquote(urlsplit(self.path).path)

    def _plain(self, status: int, message: str, headers: dict | None = None) -> None:
        body = (message + "\n").encode()
        self.send_response(status)
        self.send_header("Content-Type", "text/plain; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)
        self._record(status, self._target())

    def _wants_digest(self) -> bool:
        want = self.headers.get("Want-Digest", "")
        return any(p.split(";")[0].strip().lower() == "adler32" for p in want.split(","))

    def _drain_body(self, limit: int | None = None) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        if limit is not None and length > limit:
            return
        while length > 0:
            chunk = self.rfile.read(min(length, IO_CHUNK))
            if not chunk:
                break
            length -= len(chunk)

    # GET / HEAD

    def do_HEAD(self):
        self._get(body=False)

    def do_GET(self):
        self._get(body=True)

    def _get(self, body: bool) -> None:
        storage = self.server.storage
        try:
            path = normalize_path(self._target())
            size = storage.size(path)
        except PathEscape as exc:
            return self._plain(403, str(exc))
        except NotFound:
            return self._plain(404, "not found")
        headers = {"Accept-Ranges": "bytes"}
        if self._wants_digest():
            headers["Digest"] = f"adler32={storage.digest(path)}"
        rng = self.headers.get("Range")
        start, end, status = 0, size, 200
        if rng is not None:
            parsed = _parse_range(rng, size)
            if parsed is None:
                return self._plain(416, "range not satisfiable", {"Content-Range": f"bytes */{size}"})
            start, end = parsed
            status = 206
            headers["Content-Range"] = f"bytes {start}-{end - 1}/{size}"
        self.send_response(status)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(end - start))
        for k, v in headers.items():
            self.send_header(k, v)
        self.end_headers()
        self._record(status, path, (start, end - 1) if end > start else None)
        if body:
            try:
                for chunk in storage.read(path, start, end):
                    self.wfile.write(chunk)
            except NotFound:
                self.close_connection = True

    # PUT / DELETE

    def do_PUT(self):
        storage = self.server.storage
        try:
            path = normalize_path(self._target())
        except PathEscape as exc:
            self._drain_body(limit=1 << 20)
            self.close_connection = True
            return self._plain(403, str(exc))
        chunked = "chunked" in self.headers.get("Transfer-Encoding", "").lower()
        length = self.headers.get("Content-Length")
        if not chunked and (length is None or not length.isdigit()):
            self.close_connection = True
            return self._plain(411, "Content-Length required")
        try:
            writer = storage.open_writer(path, None if chunked else int(length))
        except CapacityError as exc:
            self._drain_body(limit=1 << 20)
            self.close_connection = True
            return self._plain(507, str(exc))
        digest = 1
        try:
            chunks = _read_chunked(self.rfile) if chunked else _read_exact(self.rfile, int(length))
            pos = 0
            for chunk in chunks:
                if chunked:
                    writer.append(chunk)
                else:
                    writer.write_at(pos, chunk)
                pos += len(chunk)
                digest = zlib.adler32(chunk, digest)
        except CapacityError as exc:
            writer.abort()
            self.close_connection = True
            return self._plain(507, str(exc))
        except (OSError, ValueError, StorageError) as exc:
            writer.abort()
            self.close_connection = True
            return self._plain(400, f"incomplete body: {exc}")
        writer.commit()
        headers = {}
        if self._wants_digest():
            headers["Digest"] = f"adler32={format_adler32(digest)}"
        self._plain(201, "Created", headers)

    def do_DELETE(self):
        try:
            path = normalize_path(self._target())
        except PathEscape as exc:
            return self._plain(403, str(exc))
        if self.server.storage.delete(path):
            return self._plain(204, "")
        return self._plain(404, "not found")

    # COPY

    def do_COPY(self):
        self._drain_body()
        source = self.headers.get("Source")
        if not source:
            return self._plain(400, "missing Source header")
        if urlsplit(source).scheme != "https" or not urlsplit(source).hostname:
            return self._plain(400, "Source must be an https URL")
        streams_hdr = self.headers.get("X-Number-Of-Streams", "1").strip()
        if not streams_hdr.isdigit() or int(streams_hdr) < 1:
            return self._plain(400, "X-Number-Of-Streams must be a positive integer")
        try:
            dest = normalize_path(self._target())
        except PathEscape as exc:
            return self._plain(403, str(exc))
        if not self.server.session_slots.acquire(blocking=False):
            self.close_connection = True
            return self._plain(503, "too many transfers", {"Retry-After": "5"})
        try:
            self._run_copy(dest, source, int(streams_hdr))
        finally:
            self.server.session_slots.release()

    def _chunk(self, data: bytes) -> None:
        self.wfile.write(b"%x\r\n%s\r\n" % (len(data), data))

    def _run_copy(self, dest: str, source: str, streams: int) -> None:
        record = TransferSession(uuid.uuid4().hex, source, dest, streams)
        session = _CopySession(self.server, record, self._wants_digest())
        self.server.add_session(record)
        self.send_response(201)
        self.send_header("Content-Type", MARKER_CONTENT_TYPE)
        self.send_header("Transfer-Encoding", "chunked")
        if session.want_digest:
            self.send_header("Trailer", "Digest")
        self.end_headers()
        self._record(201, dest)
        session.start()
        period = self.server.config.marker_period
        try:
            while not session.done.wait(period):
                self._chunk(b"".join(format_marker(m) for m in session.markers()))
            if record.state == "succeeded":
                tail = b"".join(format_marker(m) for m in session.markers()) + format_success()
            else:
                tail = format_failure(record.reason)
            self._chunk(tail)
            trailer = b""
            if session.digest is not None:
                trailer = f"Digest: adler32={session.digest}\r\n".encode()
            self.wfile.write(b"0\r\n" + trailer + b"\r\n")
        except (OSError, ssl.SSLError):
            # client went away; stop pulling and drop the partial object
            session.cancel()
            session.done.wait()
            self.close_connection = True


def _parse_range(header: str, size: int) -> tuple[int, int] | None:
    """Half-open ``[start, end)`` for a single-range header, or None if unsatisfiable."""
    m = _RANGE_RE.fullmatch(header.strip())
    if m is None:
        return None
    a, b = m.groups()
    if not a and not b:
        return None
    if not a:
        n = int(b)
        if n == 0 or size == 0:
            return None
        return max(0, size - n), size
    start = int(a)
    end = size - 1 if not b else min(int(b), size - 1)
    if start >= size or end < start:
        return None
    return start, end + 1


def _read_exact(rfile, length: int):
    remaining = length
    while remaining > 0:
        chunk = rfile.read(min(IO_CHUNK, remaining))
        if not chunk:
            raise ValueError(f"body ended {remaining} bytes early")
        remaining -= len(chunk)
        yield chunk


def _read_chunked(rfile):
    while True:
        line = rfile.readline(1024)
        if not line:
            raise ValueError("truncated chunked body")
        size = int(line.split(b";")[0].strip(), 16)
        if size == 0:
            while rfile.readline(1024) not in (b"\r\n", b"\n", b""):
                pass
            return
        yield from _read_exact(rfile, size)
        rfile.readline(1024)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    block_on_close = False
    allow_reuse_address = True

    def __init__(self, config: EndpointConfig):
        self.config = config
        self.storage = config.storage
        self.ssl = server_context(config.credential, config.trust, config.require_client_cert)
        self.client_ssl = client_context(config.trust, config.credential)
        self.session_slots = threading.BoundedSemaphore(config.max_sessions)
        self.sessions: deque[TransferSession] = deque(maxlen=100_000)
        self.access_log: deque[AccessRecord] = deque(maxlen=1_000_000)
        self._log_lock = threading.Lock()
        try:
            super().__init__((config.listen_host, config.listen_port), _Handler)
        except OSError as exc:
            raise EndpointError(
                f"cannot listen on {config.listen_host}:{config.listen_port}: {exc}"
            ) from exc

    def log_access(self, rec: AccessRecord) -> None:
        with self._log_lock:
            self.access_log.append(rec)

    def add_session(self, rec: TransferSession) -> None:
        with self._log_lock:
            self.sessions.append(rec)

    def finish_request(self, request, client_address):
        request.settimeout(30)
        try:
            tls = self.ssl.wrap_socket(request, server_side=True)
        except (ssl.SSLError, OSError) as exc:
            log.info("TLS handshake with %s failed: %s", client_address, exc)
            request.close()
            return
        tls.settimeout(None)
        try:
            self.RequestHandlerClass(tls, client_address, self)
        finally:
            try:
                tls.close()
            except OSError:
                pass

    def handle_error(self, request, client_address):
        log.debug("connection from %s ended with an error", client_address, exc_info=True)


class EndpointHandle:
    """A running endpoint; use as a context manager or call :meth:`stop`."""

    def __init__(self, server: _Server):
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.1}, daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def host(self) -> str:
        return self._server.config.listen_host

    @property
    def base_url(self) -> str:
        return f"https://{self.host}:{self.port}"

    def url(self, path: str) -> str:
        return self.base_url + "/" + path.lstrip("/")

    @property
    def storage(self) -> StorageBackend:
        return self._server.storage

    @property
    def config(self) -> EndpointConfig:
        return self._server.config

    @property
    def sessions(self) -> list[TransferSession]:
        return list(self._server.sessions)

    @property
    def access_log(self) -> list[AccessRecord]:
        return list(self._server.access_log)

    def clear_logs(self) -> None:
        self._server.sessions.clear()
        self._server.access_log.clear()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "EndpointHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(config: EndpointConfig) -> EndpointHandle:
    """Start an endpoint in background threads and return its handle."""
    host = config.listen_host
    if host not in ("", "0.0.0.0", "::") and host not in config.credential.hostnames:
        raise EndpointError(
            f"credential for {list(config.credential.hostnames)} does not cover listen host {host!r}"
        )
    try:
        server = _Server(config)
    except ssl.SSLError as exc:
        raise EndpointError(f"bad credential: {exc}") from exc
    return EndpointHandle(server)


def wait_for_port(host: str, port: int, timeout: float = 5.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            socket.create_connection((host, port), timeout=0.5).close()
            return
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
