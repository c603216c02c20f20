"""Performance-marker stream emitted by a destination endpoint during COPY.

Grammar (one block per stripe progress report, then exactly one terminal)::

    Perf Marker
    Timestamp: <unix-seconds>
    Stripe Index: <i>
    Stripe Bytes Transferred: <b>
    Total Stripe Count: <k>
    End
    ...
    success: Created        | failure: <reason>
"""

from __future__ import annotations

import re
from dataclasses import dataclass

__all__ = [
    "PerfMarker",
    "MarkerParser",
    "PerfMarkerParseError",
    "Terminal",
    "format_failure",
    "format_marker",
    "format_success",
    "parse_perf_markers",
]

SUCCESS_LINE = "success: Created"
_FIELDS = (
    ("Timestamp", "timestamp"),
    ("Stripe Index", "stripe_index"),
    ("Stripe Bytes Transferred", "stripe_bytes_transferred"),
    ("Total Stripe Count", "total_stripe_count"),
)
_FIELD_RE = re.compile(r"([A-Za-z ]+): ([0-9]{1,20})")


@dataclass(frozen=True)
class PerfMarker:
    timestamp: int
    stripe_index: int
    stripe_bytes_transferred: int
    total_stripe_count: int

    def __post_init__(self):
        if self.total_stripe_count < 1:
            raise ValueError("total_stripe_count must be >= 1")
        if not 0 <= self.stripe_index < self.total_stripe_count:
            raise ValueError("stripe_index out of range")
        if self.stripe_bytes_transferred < 0:
            raise ValueError("stripe_bytes_transferred must be >= 0")


@dataclass(frozen=True)
class Terminal:
    success: bool
    reason: str = ""

    def __str__(self) -> str:
        return "success" if self.success else f"failure({self.reason})"


class PerfMarkerParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


def format_marker(m: PerfMarker) -> bytes:
    return (
        "Perf Marker\n"
        f"Timestamp: {m.timestamp}\n"
        f"Stripe Index: {m.stripe_index}\n"
        f"Stripe Bytes Transferred: {m.stripe_bytes_transferred}\n"
        f"Total Stripe Count: {m.total_stripe_count}\n"
        "End\n"
    ).encode("ascii")


def format_success() -> bytes:
    return (SUCCESS_LINE + "\n").encode("ascii")


def format_failure(reason: str) -> bytes:
    # the terminal must stay a single line
    clean = " ".join(str(reason).split()) or "unknown error"
    return f"failure: {clean}\n".encode("utf-8", "replace")


class MarkerParser:
    """Incremental parser; feed bytes as they arrive, then :meth:`close`."""

    def __init__(self):
        self.markers: list[PerfMarker] = []
        self.terminal: Terminal | None = None
        self._buf = b""
        self._offset = 0  # offset of _buf[0] in the stream
        self._block: dict[str, int] | None = None
        self._block_start = 0

    def feed(self, data: bytes) -> list[PerfMarker]:
        """Consume ``data``; return markers completed by it."""
        if not data:
            return []
        if self.terminal is not None:
            raise PerfMarkerParseError("data after terminal line", self._offset)
        self._buf += data
        new: list[PerfMarker] = []
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                break
            raw, self._buf = self._buf[:nl], self._buf[nl + 1:]
            line_offset = self._offset
            self._offset += nl + 1
            marker = self._line(raw, line_offset)
            if marker is not None:
                new.append(marker)
            if self.terminal is not None and self._buf:
                raise PerfMarkerParseError("data after terminal line", self._offset)
        self.markers.extend(new)
        return new

    def _line(self, raw: bytes, offset: int) -> PerfMarker | None:
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise PerfMarkerParseError("invalid UTF-8", offset) from None
        if line.endswith("\r"):
            line = line[:-1]
        if self._block is None:
            if line == "Perf Marker":
                self._block = {}
                self._block_start = offset
                return None
            if line == SUCCESS_LINE:
                self.terminal = Terminal(True)
                return None
            if line.startswith("failure:"):
                self.terminal = Terminal(False, line[len("failure:"):].strip())
                return None
            raise PerfMarkerParseError(f"unexpected line {line[:40]!r}", offset)
        got = len(self._block)
        if got == len(_FIELDS):
            if line != "End":
                raise PerfMarkerParseError("expected 'End'", offset)
            block, self._block = self._block, None
            try:
                return PerfMarker(**block)
            except ValueError as exc:
                raise PerfMarkerParseError(f"invalid marker: {exc}", self._block_start) from None
        label, attr = _FIELDS[got]
        m = _FIELD_RE.fullmatch(line)
        if m is None or m.group(1) != label:
            raise PerfMarkerParseError(f"expected '{label}: <integer>'", offset)
        self._block[attr] = int(m.group(2))
        return None

    def close(self) -> tuple[list[PerfMarker], Terminal]:
        if self._buf:
            raise PerfMarkerParseError("truncated line", self._offset)
        if self._block is not None:
            raise PerfMarkerParseError("truncated marker block", self._block_start)
        if self.terminal is None:
            raise PerfMarkerParseError("missing terminal line", self._offset)
        return self.markers, self.terminal


def parse_perf_markers(data: bytes | str) -> tuple[list[PerfMarker], Terminal]:
    """Parse a complete marker stream into ``(markers, terminal)``."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    parser = MarkerParser()
    parser.feed(data)
    return parser.close()
