"""Client access interface: the file API applications (and the workflow engine) use.

Stands in for a FUSE mount with the same call vocabulary: open, read, write,
close, set/get extended attribute. A handle snapshots the file's xattrs once,
at open, and tags every request it sends with that snapshot.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from typing import Callable, Mapping

from woss import hints as H
from woss.errors import (
    AllReplicasUnreachable,
    ChecksumMismatch,
    ChunkNotFound,
    FileExists,
    FileStateError,
    NodeUnavailable,
    ReadRangeError,
)
from woss.hints import HintSet, parse_hint
from woss.model import FileMetadata, FileState, NodeId, normalize_path
from woss.storage import get_request, put_request

log = logging.getLogger(__name__)

DEFAULT_CACHE_SIZE = 64 << 20


class ChunkCache:
    """Byte-bounded LRU cache of chunk payloads."""

    def __init__(self, capacity: int):
        self.capacity = max(0, capacity)
        self.nbytes = 0
        self.peak = 0
        self._items: OrderedDict[int, bytes] = OrderedDict()

    def get(self, index: int) -> bytes | None:
        data = self._items.get(index)
        if data is not None:
            self._items.move_to_end(index)
        return data

    def put(self, index: int, data: bytes) -> None:
        if len(data) > self.capacity:
            return
        old = self._items.pop(index, None)
        if old is not None:
            self.nbytes -= len(old)
        while self._items and self.nbytes + len(data) > self.capacity:
            _, evicted = self._items.popitem(last=False)
            self.nbytes -= len(evicted)
        self._items[index] = data
        self.nbytes += len(data)
        self.peak = max(self.peak, self.nbytes)

    def clear(self) -> None:
        self._items.clear()
        self.nbytes = 0

    def __len__(self):
        return len(self._items)


@dataclass
class ClientStats:
    manager_calls: int = 0
    set_xattr: int = 0
    get_xattr: int = 0
    local_reads: int = 0
    remote_reads: int = 0
    cache_hits: int = 0
    local_writes: int = 0
    remote_writes: int = 0
    bytes_read: int = 0
    bytes_written: int = 0

    @property
    def network_reads(self) -> int:
        return self.local_reads + self.remote_reads

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class OpenHandle:
    file: str
    mode: str
    hints: HintSet
    cache: ChunkCache
    meta: FileMetadata
    position: int = 0
    buffer: bytearray = field(default_factory=bytearray)
    written: int = 0
    closed: bool = False
    tags_seen: set = field(default_factory=set)
    final: FileMetadata | None = None


class Client:
    """One client process. ``manager`` and the nodes returned by ``resolve``
    may be in-process objects or network proxies with the same methods."""

    def __init__(
        self,
        manager,
        resolve: Callable[[NodeId], object],
        colocated: NodeId | None = None,
        rng: random.Random | None = None,
        seed: int | None = 0,
        cache_size: int = DEFAULT_CACHE_SIZE,
        retries: int = 2,
        remote_delay: float = 0.0,
        chunk_size_override: int | None = None,
    ):
        self.manager = manager
        self.resolve = resolve
        self.colocated = colocated
        self.rng = rng if rng is not None else random.Random(seed)
        self.cache_size = cache_size
        self.retries = retries
        self.remote_delay = remote_delay
        self.chunk_size_override = chunk_size_override
        self.stats = ClientStats()
        self._next_request = 0
        self._lock = threading.Lock()

    def _request_id(self) -> int:
        with self._lock:
            self._next_request += 1
            return self._next_request

    def _mgr(self):
        self.stats.manager_calls += 1
        return self.manager

    # -- file API ---------------------------------------------------------------

    def create(self, path: str, hints: Mapping[str, str] | None = None) -> FileMetadata:
        """Create an empty file without opening it (tags can then be added)."""
        return self._mgr().create_file(path, self.colocated, dict(hints or {}), self.chunk_size_override)

    def open(
        self, path: str, mode: str = "r", hints: Mapping[str, str] | None = None, create: bool = True
    ) -> OpenHandle:
        """``mode="w", create=False`` attaches to a file made earlier with :meth:`create`."""
        path = normalize_path(path)
        if mode == "r":
            meta = self._mgr().open_file(path)
            if meta.state is not FileState.COMMITTED:
                raise FileStateError(f"{path} is still being written")
        elif mode == "w" and not create:
            meta = self._mgr().open_file(path)
            if meta.state is not FileState.CREATING or meta.chunks:
                raise FileStateError(f"{path} is not an empty file being created")
        elif mode == "w":
            try:
                meta = self.create(path, hints)
            except FileExists:
                meta = self._mgr().open_file(path)
                if hints or meta.state is not FileState.CREATING or meta.chunks:
                    raise
        else:
            raise ValueError("mode must be 'r' or 'w'")
        cap = meta.xattrs.cache_size()
        cache = ChunkCache(self.cache_size if cap is None else cap)
        return OpenHandle(path, mode, meta.xattrs, cache, meta)

    def write(self, handle: OpenHandle, data: bytes) -> int:
        if handle.closed or handle.mode != "w":
            raise FileStateError(f"{handle.file} is not open for writing")
        handle.buffer += data
        chunk = handle.meta.chunk_size
        full = len(handle.buffer) // chunk
        if full:
            pieces = [bytes(handle.buffer[i * chunk:(i + 1) * chunk]) for i in range(full)]
            del handle.buffer[: full * chunk]
            self._flush(handle, pieces)
        handle.written += len(data)
        handle.position = handle.written
        return len(data)

    def _flush(self, handle: OpenHandle, pieces: list[bytes]) -> None:
        decision = self._mgr().allocate_chunks(
            handle.file, len(pieces), handle.hints, self.colocated, [len(p) for p in pieces]
        )
        for a, data in zip(decision.assignments, pieces):
            req = put_request(handle.file, a.index, data, handle.hints, a.replicas, self.colocated, self._request_id())
            handle.tags_seen.add(req.hints)
            self._call(lambda: self.resolve(a.node).put_chunk(req))
            self._count_transfer(a.node, write=True, nbytes=len(data))

    def _call(self, fn):
        for attempt in range(self.retries + 1):
            try:
                return fn()
            except (ConnectionError, OSError) as exc:
                if attempt == self.retries:
                    raise NodeUnavailable(str(exc)) from exc

    def _count_transfer(self, node: NodeId, write: bool, nbytes: int) -> None:
        local = node == self.colocated
        s = self.stats
        if write:
            s.bytes_written += nbytes
            if local:
                s.local_writes += 1
            else:
                s.remote_writes += 1
        else:
            s.bytes_read += nbytes
            if local:
                s.local_reads += 1
            else:
                s.remote_reads += 1
        if not local and self.remote_delay:
            time.sleep(self.remote_delay)

    def read(self, handle: OpenHandle, offset: int | None = None, length: int | None = None) -> bytes:
        if handle.closed or handle.mode != "r":
            raise FileStateError(f"{handle.file} is not open for reading")
        size = handle.meta.size
        offset = handle.position if offset is None else offset
        length = size - offset if length is None else length
        if offset < 0 or length < 0 or offset + length > size:
            raise ReadRangeError(f"range [{offset}, {offset + length}) outside {handle.file} of {size} bytes")
        if length == 0:
            return b""
        chunk = handle.meta.chunk_size
        first, last = offset // chunk, (offset + length - 1) // chunk
        out = bytearray()
        for idx in range(first, last + 1):
            data = self._chunk(handle, idx)
            lo = offset - idx * chunk if idx == first else 0
            hi = offset + length - idx * chunk if idx == last else len(data)
            out += data[lo:hi]
        handle.position = offset + length
        return bytes(out)

    def _replica_order(self, replicas: list[NodeId]) -> list[NodeId]:
        if self.colocated in replicas:
            first = self.colocated
        else:
            first = self.rng.choice(replicas)
        return [first] + [n for n in replicas if n != first]

    def _chunk(self, handle: OpenHandle, idx: int) -> bytes:
        cached = handle.cache.get(idx)
        if cached is not None:
            self.stats.cache_hits += 1
            return cached
        desc = handle.meta.chunks[idx]
        errors = []
        for node in self._replica_order(desc.sorted_replicas()):
            req = get_request(handle.file, idx, handle.hints, self.colocated, self._request_id())
            handle.tags_seen.add(req.hints)
            try:
                data = self._call(lambda: self.resolve(node).get_chunk(req))
            except (NodeUnavailable, ChecksumMismatch, ChunkNotFound) as exc:
                errors.append(f"{node}: {type(exc).__name__}")
                continue
            self._count_transfer(node, write=False, nbytes=len(data))
            handle.cache.put(idx, data)
            return data
        raise AllReplicasUnreachable(f"{handle.file}#{idx}: " + ", ".join(errors))

    def close(self, handle: OpenHandle) -> FileMetadata:
        if handle.closed:
            return handle.final or handle.meta
        if handle.mode == "w":
            if handle.buffer:
                piece = bytes(handle.buffer)
                handle.buffer.clear()
                self._flush(handle, [piece])
            handle.final = self._mgr().commit_file(handle.file)
        else:
            handle.cache.clear()
            handle.final = handle.meta
        handle.closed = True
        return handle.final

    # -- whole-file conveniences -----------------------------------------------------

    def write_file(self, path: str, data: bytes, hints: Mapping[str, str] | None = None) -> FileMetadata:
        h = self.open(path, "w", hints)
        self.write(h, data)
        return self.close(h)

    def read_file(self, path: str) -> bytes:
        h = self.open(path, "r")
        try:
            return self.read(h)
        finally:
            self.close(h)

    def delete(self, path: str) -> None:
        self._mgr().delete_file(path)

    # -- extended attributes -----------------------------------------------------------

    def set_xattr(self, path: str, key: str, value: str) -> None:
        hint = parse_hint(key, value)
        self.stats.set_xattr += 1
        self._mgr().set_xattr(path, hint)

    def get_xattr(self, path: str, key: str):
        self.stats.get_xattr += 1
        return self._mgr().get_xattr(path, key)

    def stat(self, path: str) -> FileMetadata:
        return self._mgr().stat(path)

    def location(self, path: str) -> list[NodeId]:
        return self.get_xattr(path, H.LOCATION)

    def chunk_locations(self, path: str) -> list[list[NodeId]]:
        return self.get_xattr(path, H.LOCATION_CHUNKS)
