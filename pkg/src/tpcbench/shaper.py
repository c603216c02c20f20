"""TCP relay that adds propagation delay and bandwidth caps.

Each direction of a relayed connection is a reader thread feeding a queue of
64 KiB chunks stamped with a release time, and a writer thread that sends
each chunk once its release time has passed. A token bucket (per connection
or shared) caps the forwarding rate. When ``window_bytes`` is set, each
direction also limits unacknowledged bytes the way a TCP receive window
does: a chunk's credit returns one full RTT after it was read.
"""

from __future__ import annotations

import logging
import math
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

from .transfer import parse_address

__all__ = [
    "RelayHandle",
    "ShaperConfig",
    "TokenBucket",
    "predict_throughput",
    "start_relay",
]

log = logging.getLogger(__name__)

CHUNK = 64 * 1024
REFILL_GRANULARITY_S = 0.010
DEFAULT_BUFFER = 4 * 1024 * 1024
_EOF = object()


@dataclass
class ShaperConfig:
    forward_address: str
    listen_address: str = "127.0.0.1:0"
    rtt_ms: float = 0.0
    bandwidth_cap_bps: float | None = None
    per_connection: bool = False
    window_bytes: int | None = None

    def __post_init__(self):
        if self.rtt_ms < 0:
            raise ValueError("rtt_ms must be >= 0")
        if self.bandwidth_cap_bps is not None and self.bandwidth_cap_bps <= 0:
            raise ValueError("bandwidth_cap_bps must be > 0 when set")
        if self.window_bytes is not None and self.window_bytes <= 0:
            raise ValueError("window_bytes must be > 0 when set")


def predict_throughput(
    stream_count: int, rtt_ms: float, window_bytes: float, cap_bps: float | None = None
) -> float:
    """Window-limited TCP throughput in Gbps: ``min(cap, n * w * 8 / rtt)``."""
    if stream_count < 1:
        raise ValueError("stream_count must be >= 1")
    if window_bytes <= 0:
        raise ValueError("window_bytes must be > 0")
    cap = math.inf if cap_bps is None else float(cap_bps)
    if rtt_ms <= 0:
        return cap / 1e9
    window_bps = stream_count * window_bytes * 8 / (rtt_ms / 1000.0)
    return min(cap, window_bps) / 1e9


class TokenBucket:
    """Thread-safe byte-rate limiter.

    Consumers may overdraw by one request; the debt is paid by sleeping, so
    over any interval ``T`` no more than ``burst + rate * T`` plus one chunk
    passes.
    """

    def __init__(self, rate_bps: float, burst_bytes: float | None = None):
        self.rate = rate_bps / 8.0
        self.burst = burst_bytes if burst_bytes is not None else max(1.0, self.rate * REFILL_GRANULARITY_S)
        self.tokens = self.burst
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def consume(self, n: int, stop: threading.Event | None = None) -> None:
        with self._lock:
            now = time.monotonic()
            self.tokens = min(self.burst, self.tokens + (now - self._stamp) * self.rate)
            self._stamp = now
            self.tokens -= n
            wait = -self.tokens / self.rate if self.tokens < 0 else 0.0
        if wait > 0:
            if stop is not None:
                stop.wait(wait)
            else:
                time.sleep(wait)


def _abort(sock: socket.socket) -> None:
    """Close with RST so the peer sees a reset rather than EOF."""
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
    except OSError:
        pass
    try:
        # wakes a thread blocked in recv(); close() alone would not, and the
        # socket would stay open until that call returned
        sock.shutdown(socket.SHUT_RD)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


class _Pipe:
    def __init__(self, conn: "_Connection", src: socket.socket, dst: socket.socket, bucket: TokenBucket | None):
        self.conn, self.src, self.dst, self.bucket = conn, src, dst, bucket
        cfg = conn.config
        self.delay = cfg.rtt_ms / 2000.0
        self.limit = cfg.window_bytes or DEFAULT_BUFFER
        # with a window, credit comes back a full RTT after the read
        self.ack_delay = self.delay if cfg.window_bytes else 0.0
        self.queue: deque = deque()
        self.acks: deque = deque()
        self.inflight = 0
        self.cond = threading.Condition()
        self.bytes = 0
        self.threads = [
            threading.Thread(target=self._read, daemon=True),
            threading.Thread(target=self._write, daemon=True),
        ]

    def start(self) -> None:
        for t in self.threads:
            t.start()

    def _credit(self) -> int:
        """Bytes that may be read now; blocks until at least one is free."""
        stop = self.conn.stop
        with self.cond:
            while not stop.is_set():
                now = time.monotonic()
                while self.acks and self.acks[0][0] <= now:
                    self.inflight -= self.acks.popleft()[1]
                free = self.limit - self.inflight
                if free > 0:
                    return min(CHUNK, free)
                timeout = self.acks[0][0] - now if self.acks else 0.05
                self.cond.wait(max(timeout, 0.0005))
        return 0

    def _read(self) -> None:
        try:
            while True:
                want = self._credit()
                if not want:
                    return
                data = self.src.recv(want)
                if not data:
                    break
                if self.bucket is not None:
                    self.bucket.consume(len(data), self.conn.stop)
                with self.cond:
                    self.inflight += len(data)
                    self.queue.append((time.monotonic() + self.delay, data))
                    self.cond.notify_all()
        except OSError:
            self.conn.fail()
            return
        with self.cond:
            self.queue.append((time.monotonic() + self.delay, _EOF))
            self.cond.notify_all()

    def _write(self) -> None:
        stop = self.conn.stop
        try:
            while not stop.is_set():
                with self.cond:
                    while not self.queue and not stop.is_set():
                        self.cond.wait(0.1)
                    if stop.is_set():
                        return
                    release, data = self.queue.popleft()
                wait = release - time.monotonic()
                if wait > 0 and stop.wait(wait):
                    return
                if data is _EOF:
                    try:
                        self.dst.shutdown(socket.SHUT_WR)
                    except OSError:
                        pass
                    self.conn.pipe_done()
                    return
                self.dst.sendall(data)
                self.bytes += len(data)
                with self.cond:
                    self.acks.append((time.monotonic() + self.ack_delay, len(data)))
                    self.cond.notify_all()
        except OSError:
            self.conn.fail()


class _Connection:
    def __init__(self, relay: "RelayHandle", client: socket.socket, upstream: socket.socket):
        self.relay = relay
        self.config = relay.config
        self.client, self.upstream = client, upstream
        self.stop = threading.Event()
        self._done = 0
        self._lock = threading.Lock()
        cap = self.config.bandwidth_cap_bps
        if cap is None:
            up = down = None
        elif self.config.per_connection:
            up, down = TokenBucket(cap), TokenBucket(cap)
        else:
            up, down = relay.buckets
        self.pipes = [_Pipe(self, client, upstream, up), _Pipe(self, upstream, client, down)]

    def start(self) -> None:
        for p in self.pipes:
            p.start()

    def pipe_done(self) -> None:
        with self._lock:
            self._done += 1
            finished = self._done == 2
        if finished:
            self.close()

    def close(self) -> None:
        self.stop.set()
        for s in (self.client, self.upstream):
            try:
                s.close()
            except OSError:
                pass
        self.relay._forget(self)

    def fail(self) -> None:
        self.kill()

    def kill(self) -> None:
        if self.stop.is_set():
            return
        self.stop.set()
        for p in self.pipes:
            with p.cond:
                p.cond.notify_all()
        _abort(self.client)
        _abort(self.upstream)
        self.relay._forget(self)


class RelayHandle:
    """A running relay. Fault-injection helpers act on live connections."""

    def __init__(self, config: ShaperConfig):
        self.config = config
        self.forward = parse_address(config.forward_address)
        host, port = parse_address(config.listen_address)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as exc:
            self._sock.close()
            raise OSError(exc.errno, f"cannot listen on {host}:{port}: {exc.strerror}") from exc
        self._sock.listen(128)
        self._sock.settimeout(0.1)
        cap = config.bandwidth_cap_bps
        self.buckets = (TokenBucket(cap), TokenBucket(cap)) if cap is not None else (None, None)
        self._conns: list[_Connection] = []
        self._lock = threading.Lock()
        self._refuse = 0
        self._blocked = False
        self._closed = threading.Event()
        self.accepted = 0
        self.refused = 0
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    @property
    def address(self) -> str:
        host, port = self._sock.getsockname()[:2]
        return f"{host}:{port}"

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    @property
    def active_connections(self) -> int:
        with self._lock:
            return len(self._conns)

    def _forget(self, conn: _Connection) -> None:
        with self._lock:
            if conn in self._conns:
                self._conns.remove(conn)

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                client, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            client.settimeout(None)
            with self._lock:
                refuse = self._blocked or self._refuse > 0
                if self._refuse > 0:
                    self._refuse -= 1
            if refuse:
                self.refused += 1
                _abort(client)
                continue
            threading.Thread(target=self._open, args=(client,), daemon=True).start()

    def _open(self, client: socket.socket) -> None:
        try:
            upstream = socket.create_connection(self.forward, timeout=10)
        except OSError as exc:
            log.info("relay cannot reach %s: %s", self.forward, exc)
            _abort(client)
            return
        upstream.settimeout(None)
        for s in (client, upstream):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = _Connection(self, client, upstream)
        with self._lock:
            if self._closed.is_set():
                _abort(client)
                _abort(upstream)
                return
            self._conns.append(conn)
            self.accepted += 1
        conn.start()

    def kill_connections(self, count: int | None = None) -> int:
        """Reset up to ``count`` live connections (all when None), oldest first."""
        with self._lock:
            victims = list(self._conns) if count is None else list(self._conns[:count])
        for c in victims:
            c.kill()
        return len(victims)

    def refuse_next(self, n: int) -> None:
        """Reset the next ``n`` incoming connections."""
        with self._lock:
            self._refuse += n

    def block(self) -> None:
        with self._lock:
            self._blocked = True

    def unblock(self) -> None:
        with self._lock:
            self._blocked = False
            self._refuse = 0

    def inject_fault(self, kill: int | None = None, refuse: int = 0) -> int:
        """Refuse the next ``refuse`` connections, then kill ``kill`` live ones."""
        self.refuse_next(refuse)
        return self.kill_connections(kill)

    def sever(self) -> int:
        """Act as if the forward target died: reset everything, accept nothing."""
        self.block()
        return self.kill_connections()

    def stop(self) -> None:
        self._closed.set()
        self._sock.close()
        self.kill_connections()
        self._thread.join(timeout=2)

    def __enter__(self) -> "RelayHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def start_relay(config: ShaperConfig) -> RelayHandle:
    return RelayHandle(config)
