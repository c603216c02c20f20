"""Object storage behind an endpoint: in-memory or confined to a disk root.

Writes go through a :class:`Writer` that is committed atomically, so a reader
always sees either the previous object or the complete new one. Writers
accept out-of-order ``write_at`` calls from several threads, which is how
multi-stream pulls assemble their stripes without a shared lock.
"""

from __future__ import annotations

import itertools
import os
import posixpath
import threading
import uuid
import zlib
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

__all__ = [
    "CapacityError",
    "DiskStorage",
    "MemoryStorage",
    "NotFound",
    "PathEscape",
    "StorageBackend",
    "StorageError",
    "compute_digest",
    "format_adler32",
    "generate_bytes",
    "generate_test_file",
    "make_storage",
]

READ_CHUNK = 256 * 1024
GEN_BLOCK = 1 << 20
_TMP_PREFIX = ".tpcbench-tmp-"


class StorageError(Exception):
    pass


class NotFound(StorageError, KeyError):
    def __str__(self) -> str:
        return f"not found: {self.args[0]}"


class PathEscape(StorageError, ValueError):
    pass


class CapacityError(StorageError):
    pass


def normalize_path(path: str) -> str:
    """Canonical ``/a/b`` key; any ``..`` component is rejected outright."""
    if not path or "\x00" in path:
        raise PathEscape(f"invalid path {path!r}")
    parts = path.replace("\\", "/").split("/")
    if ".." in parts:
        raise PathEscape(f"path escapes storage root: {path!r}")
    norm = posixpath.normpath("/" + path.lstrip("/"))
    if norm == "/":
        raise PathEscape("path must name an object")
    if any(p.startswith(_TMP_PREFIX) for p in norm.split("/")):
        raise PathEscape(f"reserved path component in {path!r}")
    return norm


def format_adler32(value: int) -> str:
    return f"{value & 0xFFFFFFFF:08x}"


def generate_bytes(size_bytes: int, seed: int, block: int = GEN_BLOCK) -> Iterator[bytes]:
    """Seeded pseudo-random content in ``block``-sized chunks.

    Block ``i`` comes from its own generator keyed by ``(seed, i)``, so the
    stream is identical however it is consumed.
    """
    if size_bytes < 0:
        raise ValueError("size_bytes must be >= 0")
    remaining = size_bytes
    index = 0
    while remaining > 0:
        n = min(block, remaining)
        yield np.random.default_rng([seed, index]).bytes(n)
        remaining -= n
        index += 1


class Writer:
    """Pending object; invisible until :meth:`commit`."""

    size: int | None

    def write_at(self, offset: int, data) -> None:
        raise NotImplementedError

    def append(self, data) -> None:
        raise NotImplementedError

    def commit(self) -> None:
        raise NotImplementedError

    def abort(self) -> None:
        raise NotImplementedError

    def __enter__(self) -> "Writer":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.commit()
        else:
            self.abort()


class StorageBackend:
    kind = "abstract"

    def __init__(self, capacity_bytes: int | None = None):
        if capacity_bytes is not None and capacity_bytes < 0:
            raise ValueError("capacity_bytes must be >= 0")
        self.capacity_bytes = capacity_bytes
        self._lock = threading.Lock()
        self._reserved = 0
        self._digests: dict[str, tuple[object, str]] = {}

    # subclasses implement these
    def size(self, path: str) -> int:
        raise NotImplementedError

    def exists(self, path: str) -> bool:
        try:
            self.size(path)
        except NotFound:
            return False
        return True

    def read(self, path: str, start: int = 0, end: int | None = None) -> Iterator[bytes]:
        """Yield bytes ``[start, end)`` of an object in chunks."""
        raise NotImplementedError

    def open_writer(self, path: str, size: int | None = None) -> Writer:
        raise NotImplementedError

    def delete(self, path: str) -> bool:
        raise NotImplementedError

    def used_bytes(self) -> int:
        raise NotImplementedError

    def _version(self, path: str) -> object:
        raise NotImplementedError

    def read_all(self, path: str) -> bytes:
        return b"".join(self.read(path))

    def put(self, path: str, data: bytes | Iterable[bytes]) -> None:
        if isinstance(data, (bytes, bytearray, memoryview)):
            w = self.open_writer(path, len(data))
            try:
                w.write_at(0, data)
            except BaseException:
                w.abort()
                raise
            w.commit()
            return
        w = self.open_writer(path)
        try:
            for chunk in data:
                w.append(chunk)
        except BaseException:
            w.abort()
            raise
        w.commit()

    def digest(self, path: str) -> str:
        """adler32 of an object, cached per object version."""
        norm = normalize_path(path)
        version = self._version(norm)
        cached = self._digests.get(norm)
        if cached is not None and cached[0] == version:
            return cached[1]
        value = 1
        for chunk in self.read(norm):
            value = zlib.adler32(chunk, value)
        hexd = format_adler32(value)
        self._digests[norm] = (version, hexd)
        return hexd

    def _reserve(self, n: int) -> None:
        if self.capacity_bytes is None:
            return
        with self._lock:
            if self.used_bytes() + self._reserved + n > self.capacity_bytes:
                raise CapacityError(
                    f"capacity exceeded: need {n} bytes, "
                    f"{self.capacity_bytes - self.used_bytes() - self._reserved} available"
                )
            self._reserved += n

    def _release(self, n: int) -> None:
        if self.capacity_bytes is None:
            return
        with self._lock:
            self._reserved -= n


class _MemoryWriter(Writer):
    def __init__(self, store: "MemoryStorage", path: str, size: int | None):
        self.store, self.path, self.size = store, path, size
        self.buf = bytearray(size) if size is not None else bytearray()
        self._reserved = size or 0
        self._done = False

    def write_at(self, offset: int, data) -> None:
        n = len(data)
        if self.size is not None and offset + n > self.size:
            raise StorageError("write past declared object size")
        if self.size is None and offset + n > len(self.buf):
            extra = offset + n - len(self.buf)
            self._grow(extra)
            self.buf.extend(bytes(extra))
        self.buf[offset:offset + n] = data

    def append(self, data) -> None:
        if self.size is not None:
            raise StorageError("append requires an unsized writer")
        self._grow(len(data))
        self.buf += data

    def _grow(self, n: int) -> None:
        self.store._reserve(n)
        self._reserved += n

    def commit(self) -> None:
        if self._done:
            return
        self._done = True
        self.store._release(self._reserved)
        self.store._swap(self.path, self.buf)

    def abort(self) -> None:
        if self._done:
            return
        self._done = True
        self.store._release(self._reserved)
        self.buf = bytearray()


class MemoryStorage(StorageBackend):
    """Objects held in process memory; nothing touches the filesystem."""

    kind = "memory"

    def __init__(self, capacity_bytes: int | None = None):
        super().__init__(capacity_bytes)
        self._objects: dict[str, tuple[int, bytearray]] = {}
        self._generation = itertools.count()

    def _entry(self, path: str) -> tuple[int, bytearray]:
        norm = normalize_path(path)
        try:
            return self._objects[norm]
        except KeyError:
            raise NotFound(norm) from None

    def _get(self, path: str) -> bytearray:
        return self._entry(path)[1]

    def _version(self, path: str) -> object:
        return self._entry(path)[0]

    def _swap(self, path: str, buf: bytearray) -> None:
        # committed buffers are never mutated again; a dict store is atomic
        self._objects[path] = (next(self._generation), buf)

    def size(self, path: str) -> int:
        return len(self._get(path))

    def read(self, path: str, start: int = 0, end: int | None = None) -> Iterator[bytes]:
        obj = self._get(path)
        view = memoryview(obj)
        stop = len(obj) if end is None else min(end, len(obj))
        pos = start
        while pos < stop:
            nxt = min(pos + READ_CHUNK, stop)
            yield view[pos:nxt]
            pos = nxt

    def open_writer(self, path: str, size: int | None = None) -> Writer:
        norm = normalize_path(path)
        if size is not None:
            self._reserve(size)
        return _MemoryWriter(self, norm, size)

    def delete(self, path: str) -> bool:
        norm = normalize_path(path)
        return self._objects.pop(norm, None) is not None

    def used_bytes(self) -> int:
        return sum(len(v) for _, v in list(self._objects.values()))

    def list(self) -> list[str]:
        return sorted(self._objects)


class _DiskWriter(Writer):
    def __init__(self, store: "DiskStorage", final: Path, size: int | None):
        self.store, self.final, self.size = store, final, size
        final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = final.parent / f"{_TMP_PREFIX}{uuid.uuid4().hex}"
        self.fd = os.open(self.tmp, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o644)
        self._reserved = size or 0
        self._pos = 0
        self._done = False
        if size:
            os.ftruncate(self.fd, size)

    def write_at(self, offset: int, data) -> None:
        if self.size is not None and offset + len(data) > self.size:
            raise StorageError("write past declared object size")
        view = memoryview(data)
        while view:
            n = os.pwrite(self.fd, view, offset)
            view = view[n:]
            offset += n

    def append(self, data) -> None:
        if self.size is not None:
            raise StorageError("append requires an unsized writer")
        self.store._reserve(len(data))
        self._reserved += len(data)
        self.write_at(self._pos, data)
        self._pos += len(data)

    def commit(self) -> None:
        if self._done:
            return
        self._done = True
        os.close(self.fd)
        os.replace(self.tmp, self.final)
        self.store._release(self._reserved)

    def abort(self) -> None:
        if self._done:
            return
        self._done = True
        os.close(self.fd)
        try:
            os.unlink(self.tmp)
        except FileNotFoundError:
            pass
        self.store._release(self._reserved)


class DiskStorage(StorageBackend):
    """Objects stored as files confined under ``root``."""

    kind = "disk"

    def __init__(self, root: str | os.PathLike, capacity_bytes: int | None = None):
        super().__init__(capacity_bytes)
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def _file(self, path: str) -> Path:
        norm = normalize_path(path)
        target = (self.root / norm.lstrip("/")).resolve()
        if target != self.root and self.root not in target.parents:
            raise PathEscape(f"path escapes storage root: {path!r}")
        return target

    def _stat(self, path: str) -> os.stat_result:
        f = self._file(path)
        try:
            st = f.stat()
        except (FileNotFoundError, NotADirectoryError):
            raise NotFound(normalize_path(path)) from None
        if not f.is_file():
            raise NotFound(normalize_path(path))
        return st

    def _version(self, path: str) -> object:
        st = self._stat(path)
        return (st.st_ino, st.st_mtime_ns, st.st_size)

    def size(self, path: str) -> int:
        return self._stat(path).st_size

    def read(self, path: str, start: int = 0, end: int | None = None) -> Iterator[bytes]:
        f = self._file(path)
        try:
            fh = open(f, "rb")
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError):
            raise NotFound(normalize_path(path)) from None
        return self._iter_file(fh, start, end)

    @staticmethod
    def _iter_file(fh, start: int, end: int | None) -> Iterator[bytes]:
        with fh:
            size = os.fstat(fh.fileno()).st_size
            stop = size if end is None else min(end, size)
            fh.seek(start)
            pos = start
            while pos < stop:
                chunk = fh.read(min(READ_CHUNK, stop - pos))
                if not chunk:
                    break
                pos += len(chunk)
                yield chunk

    def open_writer(self, path: str, size: int | None = None) -> Writer:
        final = self._file(path)
        if size is not None:
            self._reserve(size)
        try:
            return _DiskWriter(self, final, size)
        except BaseException:
            if size is not None:
                self._release(size)
            raise

    def delete(self, path: str) -> bool:
        try:
            self._file(path).unlink()
        except FileNotFoundError:
            return False
        return True

    def used_bytes(self) -> int:
        total = 0
        for dirpath, _dirs, files in os.walk(self.root):
            for name in files:
                if not name.startswith(_TMP_PREFIX):
                    try:
                        total += os.stat(os.path.join(dirpath, name)).st_size
                    except FileNotFoundError:
                        pass
        return total

    def list(self) -> list[str]:
        out = []
        for dirpath, _dirs, files in os.walk(self.root):
            for name in files:
                if not name.startswith(_TMP_PREFIX):
                    rel = os.path.relpath(os.path.join(dirpath, name), self.root)
                    out.append("/" + rel.replace(os.sep, "/"))
        return sorted(out)


def make_storage(spec: str, capacity_bytes: int | None = None) -> StorageBackend:
    """Build a backend from ``memory`` or ``disk:<root>``."""
    if spec == "memory":
        return MemoryStorage(capacity_bytes)
    if spec.startswith("disk:") and len(spec) > 5:
        return DiskStorage(spec[5:], capacity_bytes)
    raise ValueError(f"storage must be 'memory' or 'disk:<root>', got {spec!r}")


def compute_digest(storage: StorageBackend, path: str, algorithm: str = "adler32") -> str:
    """Lowercase 8-hex-digit adler32 of a stored object."""
    if algorithm.lower() != "adler32":
        raise ValueError(f"unsupported digest algorithm {algorithm!r}")
    return storage.digest(path)


def generate_test_file(storage: StorageBackend, path: str, size_bytes: int, seed: int = 0) -> str:
    """Store ``size_bytes`` of seeded content at ``path`` and return its digest."""
    if size_bytes < 1:
        raise ValueError("size_bytes must be >= 1")
    writer = storage.open_writer(path, size_bytes)
    value = 1
    offset = 0
    try:
        for chunk in generate_bytes(size_bytes, seed):
            writer.write_at(offset, chunk)
            value = zlib.adler32(chunk, value)
            offset += len(chunk)
    except BaseException:
        writer.abort()
        raise
    writer.commit()
    return format_adler32(value)
