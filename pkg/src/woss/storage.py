"""Storage nodes: chunk persistence plus the two replication policies.

A node stores chunks in a pluggable backing store (``mem`` emulates a RAM
disk, ``dir`` keeps one file per chunk) and verifies a 64-bit digest on every
read. When a written chunk's hint snapshot asks for ``Replication r`` the node
pushes copies to the ``r - 1`` targets the manager picked at allocation time:

* eager parallel -- push to every target at once, as each chunk is written;
* lazy chained -- hand the chunk to the first target, which commits and
  forwards to the next; runs on the low-priority background queue.

``RepSmntc optimistic`` acks after the local commit, ``pessimistic`` only
once every replica has committed.
"""

from __future__ import annotations

import enum
import itertools
import logging
import os
import queue
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable
from urllib.parse import quote, unquote

from woss import hints as H
from woss.errors import (
    ChainBroken,
    ChecksumMismatch,
    ChunkNotFound,
    NodeUnavailable,
    OutOfSpace,
    ReplicationDegraded,
    WossError,
)
from woss.hints import HintSet
from woss.kernels import chunk_digest
from woss.model import ChunkDescriptor, NodeId, Opcode, StorageNodeStatus, TaggedRequest
from woss.protocol import pack_payload, unpack_payload

log = logging.getLogger(__name__)

_commit_seq = itertools.count(1)
_seq_lock = threading.Lock()


def _next_seq() -> int:
    with _seq_lock:
        return next(_commit_seq)


class ReplicationMode(enum.Enum):
    EAGER_PARALLEL = "eager"
    LAZY_CHAINED = "lazy"


class Completion(enum.Enum):
    OPTIMISTIC = H.OPTIMISTIC
    PESSIMISTIC = H.PESSIMISTIC


# -- backing stores -----------------------------------------------------------


class MemStore:
    """In-memory chunk store (the RAM-disk variant)."""

    kind = "mem"

    def __init__(self):
        self._chunks: dict[tuple[str, int], tuple[bytes, int]] = {}
        self._lock = threading.Lock()

    def put(self, file: str, index: int, data: bytes, digest: int) -> None:
        with self._lock:
            self._chunks[(file, index)] = (bytes(data), digest)

    def get(self, file: str, index: int) -> tuple[bytes, int]:
        with self._lock:
            try:
                return self._chunks[(file, index)]
            except KeyError:
                raise ChunkNotFound(f"{file}#{index}") from None

    def size_of(self, file: str, index: int) -> int | None:
        with self._lock:
            got = self._chunks.get((file, index))
        return None if got is None else len(got[0])

    def delete(self, file: str, index: int) -> None:
        with self._lock:
            self._chunks.pop((file, index), None)

    def keys(self) -> list[tuple[str, int]]:
        with self._lock:
            return sorted(self._chunks)

    def corrupt(self, file: str, index: int) -> None:
        with self._lock:
            data, digest = self._chunks[(file, index)]
            flipped = bytes([data[0] ^ 0xFF]) + data[1:] if data else b"\x00"
            self._chunks[(file, index)] = (flipped, digest)


class DirStore:
    """One file per chunk under ``root``: 8-byte little-endian digest, then data."""

    kind = "dir"

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, file: str, index: int) -> Path:
        return self.root / f"{quote(file, safe='')}.{index}"

    def put(self, file: str, index: int, data: bytes, digest: int) -> None:
        p = self._path(file, index)
        tmp = p.with_suffix(p.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(digest.to_bytes(8, "little"))
            f.write(data)
        os.replace(tmp, p)

    def get(self, file: str, index: int) -> tuple[bytes, int]:
        try:
            raw = self._path(file, index).read_bytes()
        except FileNotFoundError:
            raise ChunkNotFound(f"{file}#{index}") from None
        return raw[8:], int.from_bytes(raw[:8], "little")

    def size_of(self, file: str, index: int) -> int | None:
        try:
            return self._path(file, index).stat().st_size - 8
        except FileNotFoundError:
            return None

    def delete(self, file: str, index: int) -> None:
        try:
            self._path(file, index).unlink()
        except FileNotFoundError:
            pass

    def keys(self) -> list[tuple[str, int]]:
        out = []
        for p in self.root.iterdir():
            if p.suffix == ".tmp":
                continue
            name, _, idx = p.name.rpartition(".")
            out.append((unquote(name), int(idx)))
        return sorted(out)

    def corrupt(self, file: str, index: int) -> None:
        p = self._path(file, index)
        raw = bytearray(p.read_bytes())
        if len(raw) > 8:
            raw[8] ^= 0xFF
        else:
            raw.append(0)
        p.write_bytes(bytes(raw))


def open_store(spec: str):
    """``mem`` or ``dir:<path>``."""
    if spec == "mem":
        return MemStore()
    if spec.startswith("dir:"):
        return DirStore(spec[4:])
    raise ValueError(f"unknown store {spec!r}; expected mem or dir:<path>")


# -- replication ---------------------------------------------------------------


@dataclass(frozen=True)
class ReplicationJob:
    file: str
    index: int
    data: bytes
    targets: tuple[NodeId, ...]
    mode: ReplicationMode = ReplicationMode.EAGER_PARALLEL
    completion: Completion = Completion.OPTIMISTIC
    hints: HintSet = field(default_factory=HintSet)

    def __post_init__(self):
        if len(set(self.targets)) != len(self.targets):
            raise ValueError("replication targets must be distinct")


@dataclass(frozen=True)
class ReplicaReport:
    node: NodeId
    ok: bool
    committed_at: int = 0  # process-wide commit sequence number
    error: str = ""


class _BackgroundQueue:
    """Replication executor: one shared queue, eager jobs before lazy ones.

    Lazy jobs also wait (bounded) while the node has foreground traffic.
    """

    EAGER, LAZY = 0, 1

    def __init__(self, node: "StorageNode", workers: int = 2, max_defer: float = 0.5):
        self._node = node
        self._q: queue.PriorityQueue = queue.PriorityQueue()
        self._seq = itertools.count()
        self._workers = workers
        self._threads: list[threading.Thread] = []
        self._start_lock = threading.Lock()
        self.max_defer = max_defer

    def submit(self, priority: int, fn: Callable[[], None]) -> None:
        self._ensure_started()
        self._q.put((priority, next(self._seq), fn))

    def _ensure_started(self):
        with self._start_lock:
            if self._threads:
                return
            for i in range(self._workers):
                t = threading.Thread(target=self._run, name=f"{self._node.node_id}-repl-{i}", daemon=True)
                t.start()
                self._threads.append(t)

    def _run(self):
        while True:
            priority, _, fn = self._q.get()
            try:
                if priority == self.LAZY:
                    self._node._wait_for_quiet(self.max_defer)
                fn()
            except Exception:
                log.exception("background replication job failed")
            finally:
                self._q.task_done()

    def drain(self):
        self._q.join()


class StorageNode:
    def __init__(
        self,
        node_id: NodeId,
        capacity: int,
        store=None,
        manager=None,
        resolve: Callable[[NodeId], object] | None = None,
        replication_mode: ReplicationMode | str = ReplicationMode.EAGER_PARALLEL,
        sync_replication: bool = False,
        retries: int = 3,
        retry_backoff: float = 0.01,
        address: str = "",
        max_chunk_size: int | None = None,
    ):
        self.node_id = node_id
        self.capacity = capacity
        self.store = store if store is not None else MemStore()
        self.manager = manager
        self.resolve = resolve
        self.replication_mode = ReplicationMode(replication_mode)
        self.sync_replication = sync_replication
        self.retries = retries
        self.retry_backoff = retry_backoff
        self.address = address
        self.max_chunk_size = max_chunk_size

        self.alive = True
        self.write_delay = 0.0
        self.served_local = 0
        self.served_remote = 0
        self.served_by_chunk: Counter = Counter()
        self.commit_log: list[tuple[str, int, int]] = []  # (file, index, commit seq)
        self.degraded: list[ReplicationDegraded] = []

        self._used = sum(self.store.size_of(f, i) or 0 for f, i in self.store.keys())
        self._lock = threading.Lock()
        self._chunk_locks: dict[tuple[str, int], threading.Lock] = {}
        self._foreground = 0
        self._quiet = threading.Condition(self._lock)
        self._background = _BackgroundQueue(self)
        self._fanout = ThreadPoolExecutor(max_workers=8, thread_name_prefix=f"{node_id}-push")
        self._hb_stop = threading.Event()

    # -- lifecycle / fault injection --------------------------------------------

    def status(self) -> StorageNodeStatus:
        with self._lock:
            return StorageNodeStatus(self.node_id, self.capacity, max(0, self.capacity - self._used), self.address)

    def register(self) -> None:
        self.manager.node_register(self.status())

    def heartbeat(self) -> None:
        if self.alive:
            self.manager.node_heartbeat(self.status())

    def start_heartbeats(self, interval: float) -> threading.Thread:
        def loop():
            while not self._hb_stop.wait(interval):
                try:
                    self.heartbeat()
                except Exception as exc:
                    log.warning("%s heartbeat failed: %s", self.node_id, exc)

        t = threading.Thread(target=loop, name=f"{self.node_id}-heartbeat", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self._hb_stop.set()
        self._fanout.shutdown(wait=False)

    def kill(self) -> None:
        self.alive = False

    def revive(self) -> None:
        self.alive = True

    def corrupt(self, file: str, index: int) -> None:
        self.store.corrupt(file, index)

    def drain(self) -> None:
        self._background.drain()

    def _check_alive(self):
        if not self.alive:
            raise NodeUnavailable(f"storage node {self.node_id} is down")

    def reset_counters(self) -> None:
        with self._lock:
            self.served_local = 0
            self.served_remote = 0
            self.served_by_chunk.clear()

    # -- foreground accounting ----------------------------------------------------

    def _enter(self):
        with self._lock:
            self._foreground += 1

    def _leave(self):
        with self._lock:
            self._foreground -= 1
            if self._foreground == 0:
                self._quiet.notify_all()

    def _wait_for_quiet(self, max_wait: float):
        deadline = time.monotonic() + max_wait
        with self._lock:
            while self._foreground > 0:
                left = deadline - time.monotonic()
                if left <= 0:
                    return
                self._quiet.wait(left)

    def _chunk_lock(self, key):
        with self._lock:
            lk = self._chunk_locks.get(key)
            if lk is None:
                lk = self._chunk_locks[key] = threading.Lock()
            return lk

    # -- local persistence ---------------------------------------------------------

    def _store_local(self, file: str, index: int, data: bytes, digest: int | None = None) -> int:
        """Write one chunk, then register the replica with the manager."""
        if self.write_delay:
            time.sleep(self.write_delay)
        self._check_alive()
        if self.max_chunk_size is not None and len(data) > self.max_chunk_size:
            raise OutOfSpace(f"chunk of {len(data)} bytes exceeds {self.max_chunk_size}")
        actual = chunk_digest(data)
        if digest is not None and digest != actual:
            raise ChecksumMismatch(f"{file}#{index} arrived corrupted at {self.node_id}")
        with self._chunk_lock((file, index)):
            old = self.store.size_of(file, index) or 0
            with self._lock:
                if self._used - old + len(data) > self.capacity:
                    raise OutOfSpace(f"{self.node_id}: {self.capacity - self._used} bytes free, need {len(data)}")
                self._used += len(data) - old
            self.store.put(file, index, data, actual)
            seq = _next_seq()
            with self._lock:
                self.commit_log.append((file, index, seq))
        if self.manager is not None:
            self.manager.commit_chunk(file, ChunkDescriptor(index, len(data), frozenset({self.node_id})))
        return seq

    # -- request handlers -----------------------------------------------------------

    def put_chunk(self, req: TaggedRequest) -> dict:
        """Store a client chunk and start replication; ack per ``RepSmntc``.

        Payload header: ``index``, ``targets`` (extra replica nodes from the
        allocation), optional ``requester``.
        """
        self._check_alive()
        header, data = unpack_payload(req.payload)
        index = header["index"]
        targets = tuple(t for t in header.get("targets", ()) if t != self.node_id)
        self._enter()
        try:
            seq = self._store_local(req.file, index, data)
        finally:
            self._leave()
        ack = {"node": self.node_id, "index": index, "committed_at": seq, "replicas": [self.node_id]}
        if not targets:
            return ack
        job = ReplicationJob(
            req.file,
            index,
            bytes(data),
            targets,
            self.replication_mode,
            Completion(req.hints.semantics()),
            req.hints,
        )
        if job.completion is Completion.PESSIMISTIC:
            reports = self.run_job(job)
            ack["replicas"] += [r.node for r in reports if r.ok]
        elif self.sync_replication:
            self._run_background(job)
        else:
            prio = _BackgroundQueue.EAGER if job.mode is ReplicationMode.EAGER_PARALLEL else _BackgroundQueue.LAZY
            self._background.submit(prio, lambda: self._run_background(job))
            ack["pending"] = list(targets)
        return ack

    def get_chunk(self, req: TaggedRequest) -> bytes:
        header, _ = unpack_payload(req.payload)
        return self.read_chunk(req.file, header["index"], header.get("requester"))

    def read_chunk(self, file: str, index: int, requester: NodeId | None = None) -> bytes:
        self._check_alive()
        self._enter()
        try:
            data, digest = self.store.get(file, index)
            if chunk_digest(data) != digest:
                raise ChecksumMismatch(f"{file}#{index} on {self.node_id} fails its checksum")
            with self._lock:
                if requester == self.node_id:
                    self.served_local += 1
                else:
                    self.served_remote += 1
                self.served_by_chunk[(file, index)] += 1
            return data
        finally:
            self._leave()

    def has_chunk(self, file: str, index: int) -> bool:
        return self.store.size_of(file, index) is not None

    def receive_replica(
        self, file: str, index: int, data: bytes, digest: int, chain: list[NodeId] | tuple = ()
    ) -> list[dict]:
        """Commit a pushed replica; in a chain, forward to the next hop after committing.

        Returns one report per hop reached, in commit order.
        """
        self._check_alive()
        seq = self._store_local(file, index, data, digest)
        reports = [{"node": self.node_id, "ok": True, "committed_at": seq}]
        if chain:
            reports += self._forward(file, index, data, digest, list(chain))
        return reports

    def _forward(self, file, index, data, digest, chain) -> list[dict]:
        nxt, rest = chain[0], chain[1:]
        try:
            return self._with_retries(lambda: self.resolve(nxt).receive_replica(file, index, data, digest, rest))
        except WossError as exc:
            return [{"node": nxt, "ok": False, "error": f"{type(exc).__name__}: {exc}"}]

    def reclaim(self, file: str, indices: list[int]) -> None:
        for i in indices:
            with self._chunk_lock((file, i)):
                size = self.store.size_of(file, i)
                if size is None:
                    continue
                self.store.delete(file, i)
                with self._lock:
                    self._used -= size

    # -- replication ---------------------------------------------------------------

    def _with_retries(self, call):
        delay = self.retry_backoff
        for attempt in range(self.retries + 1):
            try:
                return call()
            except (NodeUnavailable, ConnectionError, OSError) as exc:
                if attempt == self.retries:
                    raise NodeUnavailable(str(exc)) from exc
                if delay:
                    time.sleep(delay)
                    delay *= 2

    def run_job(self, job: ReplicationJob) -> list[ReplicaReport]:
        if job.mode is ReplicationMode.EAGER_PARALLEL:
            return self.replicate_eager_parallel(job)
        return self.replicate_lazy_chained(job)

    def _run_background(self, job: ReplicationJob) -> None:
        try:
            self.run_job(job)
        except ReplicationDegraded as exc:
            log.warning("%s: %s", self.node_id, exc)
            with self._lock:
                self.degraded.append(exc)

    def _push(self, job: ReplicationJob, target: NodeId, digest: int) -> ReplicaReport:
        try:
            hops = self._with_retries(
                lambda: self.resolve(target).receive_replica(job.file, job.index, job.data, digest, ())
            )
            return ReplicaReport(target, True, hops[0]["committed_at"])
        except WossError as exc:
            return ReplicaReport(target, False, error=f"{type(exc).__name__}: {exc}")

    def replicate_eager_parallel(self, job: ReplicationJob) -> list[ReplicaReport]:
        """Push to every target concurrently; raise ReplicationDegraded if any stays failed."""
        if not job.targets:
            return []
        digest = chunk_digest(job.data)
        if self.sync_replication or len(job.targets) == 1:
            reports = [self._push(job, t, digest) for t in job.targets]
        else:
            futures = [self._fanout.submit(self._push, job, t, digest) for t in job.targets]
            reports = [f.result() for f in futures]
        self._raise_if_degraded(job, reports)
        return reports

    def replicate_lazy_chained(self, job: ReplicationJob) -> list[ReplicaReport]:
        """Send to ``targets[0]``; each hop commits then forwards to the next."""
        if not job.targets:
            return []
        digest = chunk_digest(job.data)
        hops = self._forward(job.file, job.index, job.data, digest, list(job.targets))
        reports = [ReplicaReport(h["node"], h["ok"], h.get("committed_at", 0), h.get("error", "")) for h in hops]
        failed = [r for r in reports if not r.ok]
        if failed:
            hop = job.targets.index(failed[0].node)
            raise ChainBroken(
                f"chain for {job.file}#{job.index} broke at hop {hop} ({failed[0].node}): {failed[0].error}",
                replicas=[self.node_id] + [r.node for r in reports if r.ok],
                failed=[failed[0].node],
                hop=hop,
            )
        return reports

    def _raise_if_degraded(self, job, reports):
        failed = [r for r in reports if not r.ok]
        if failed:
            raise ReplicationDegraded(
                f"{job.file}#{job.index}: {len(failed)} of {len(job.targets)} targets failed "
                + "; ".join(f"{r.node}: {r.error}" for r in failed),
                replicas=[self.node_id] + [r.node for r in reports if r.ok],
                failed=[r.node for r in failed],
            )

    # -- wire dispatch ----------------------------------------------------------

    def handle(self, req: TaggedRequest) -> tuple[dict, bytes]:
        """Serve one decoded frame; used by the TCP server."""
        if req.opcode is Opcode.PUT_CHUNK:
            return self.put_chunk(req), b""
        if req.opcode is Opcode.GET_CHUNK:
            return {}, self.get_chunk(req)
        header, data = unpack_payload(req.payload)
        if req.opcode is Opcode.REPLICATE:
            return {"hops": self.receive_replica(req.file, header["index"], data, header["digest"], header["chain"])}, b""
        if req.opcode is Opcode.RECLAIM:
            self.reclaim(req.file, header["indices"])
            return {}, b""
        if req.opcode is Opcode.NODE_STATUS:
            return self.status().to_dict(), b""
        raise ValueError(f"storage node cannot handle {req.opcode.name}")


def put_request(file: str, index: int, data: bytes, hints: HintSet, targets=(), requester=None, request_id=0) -> TaggedRequest:
    header = {"index": index, "targets": list(targets)}
    if requester is not None:
        header["requester"] = requester
    return TaggedRequest(Opcode.PUT_CHUNK, file, hints, pack_payload(header, data), request_id)


def get_request(file: str, index: int, hints: HintSet, requester=None, request_id=0) -> TaggedRequest:
    header = {"index": index}
    if requester is not None:
        header["requester"] = requester
    return TaggedRequest(Opcode.GET_CHUNK, file, hints, pack_payload(header), request_id)
