"""Centralized metadata manager.

Holds every file's block map and extended attributes, tracks storage-node
membership and free space, and routes chunk allocation through a dispatcher:
each registered policy is keyed on a hint, and a request whose hint snapshot
triggers no policy takes the default round-robin path.

Locking: one lock per file for metadata mutations (xattrs, block map, state);
a single short allocation lock guards node free space, the round-robin cursor
and the collocation group table so a placement decision sees one consistent
membership snapshot.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from woss import hints as H
from woss.errors import (
    FileExists,
    FileStateError,
    NoCapacity,
    ReadOnlyAttribute,
    UnknownAllocation,
    UnknownAttribute,
    UnknownFile,
)
from woss.hints import Hint, HintSet, parse_hint
from woss.kernels import scatter_slots
from woss.model import (
    DEFAULT_CHUNK_SIZE,
    ChunkAssignment,
    ChunkDescriptor,
    FileMetadata,
    FileState,
    NodeId,
    StorageNodeStatus,
    normalize_path,
)

log = logging.getLogger(__name__)

DEFAULT = "Default"
LOCAL = "Local"
COLLOCATION = "Collocation"
SCATTER = "Scatter"

ALLOCATE = "allocate"
REPLICA_TARGETS = "replica_targets"


@dataclass(frozen=True)
class PlacementDecision:
    file: str
    policy: str
    assignments: tuple[ChunkAssignment, ...]
    live_nodes: tuple[NodeId, ...]

    def nodes(self) -> dict[int, NodeId]:
        return {a.index: a.node for a in self.assignments}

    @property
    def spilled(self) -> list[int]:
        return [a.index for a in self.assignments if a.policy != self.policy]

    def log_lines(self) -> list[str]:
        return [
            f"{self.file} {a.index} {a.size} {a.node} {','.join(a.replicas) or '-'} {a.policy}"
            for a in self.assignments
        ]

    def to_dict(self) -> dict:
        return {
            "file": self.file,
            "policy": self.policy,
            "live_nodes": list(self.live_nodes),
            "assignments": [
                [a.index, a.node, a.size, a.policy, list(a.replicas)] for a in self.assignments
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlacementDecision":
        return cls(
            d["file"],
            d["policy"],
            tuple(ChunkAssignment(i, n, s, p, tuple(r)) for i, n, s, p, r in d["assignments"]),
            tuple(d["live_nodes"]),
        )


class GroupTable:
    """Collocation group name -> anchor node. Anchors never move."""

    def __init__(self):
        self._anchors: dict[str, NodeId] = {}

    def get(self, group: str) -> NodeId | None:
        return self._anchors.get(group)

    def anchor_for(self, group: str, live: tuple[NodeId, ...], free: Mapping[NodeId, int]) -> NodeId:
        anchor = self._anchors.get(group)
        if anchor is None:
            # most free space first, then NodeId order
            anchor = min(live, key=lambda n: (-free[n], n))
            self._anchors[group] = anchor
        return anchor

    def items(self):
        return sorted(self._anchors.items())


@dataclass
class AllocationContext:
    file: str
    hints: HintSet
    requester: NodeId | None
    live: tuple[NodeId, ...]
    free: dict[NodeId, int]
    groups: GroupTable
    placement: H.Placement | None


@dataclass(frozen=True)
class RegisteredPolicy:
    """A hint-triggered optimization module plugged into the dispatcher.

    ``callback`` for :data:`ALLOCATE` returns the preferred node for one chunk
    (``None`` = no preference); for :data:`REPLICA_TARGETS` it returns the
    extra replica nodes for a chunk whose primary is already chosen.
    """

    name: str
    operation: str
    trigger_key: str
    predicate: Callable[[str], bool]
    callback: Callable

    def matches(self, operation: str, hints: HintSet) -> bool:
        if operation != self.operation or self.trigger_key not in hints:
            return False
        try:
            return bool(self.predicate(hints[self.trigger_key]))
        except Exception:
            return False


def _dp_kind(kind: str) -> Callable[[str], bool]:
    def pred(value: str) -> bool:
        return H.parse_placement(value).kind == kind

    return pred


def _local(ctx: AllocationContext, index: int, size: int) -> NodeId | None:
    return ctx.requester


def _collocation(ctx: AllocationContext, index: int, size: int) -> NodeId | None:
    return ctx.groups.anchor_for(ctx.placement.group, ctx.live, ctx.free)


def _scatter(ctx: AllocationContext, index: int, size: int) -> NodeId | None:
    (slot,) = scatter_slots(index, 1, ctx.placement.scatter_size, len(ctx.live))
    return ctx.live[slot]


def _replica_targets(ctx: AllocationContext, primary: NodeId, size: int) -> list[NodeId]:
    """``r - 1`` distinct nodes following the primary in NodeId order."""
    want = min(ctx.hints.replication(), len(ctx.live)) - 1
    if want <= 0:
        return []
    start = ctx.live.index(primary)
    out = []
    for step in range(1, len(ctx.live)):
        n = ctx.live[(start + step) % len(ctx.live)]
        if ctx.free[n] >= size:
            out.append(n)
            if len(out) == want:
                break
    return out


def _replication_wanted(value: str) -> bool:
    return H.parse_replication(value) > 1


def default_policies() -> list[RegisteredPolicy]:
    return [
        RegisteredPolicy(LOCAL, ALLOCATE, H.DP, _dp_kind("local"), _local),
        RegisteredPolicy(COLLOCATION, ALLOCATE, H.DP, _dp_kind("collocation"), _collocation),
        RegisteredPolicy(SCATTER, ALLOCATE, H.DP, _dp_kind("scatter"), _scatter),
        RegisteredPolicy("Replication", REPLICA_TARGETS, H.REPLICATION, _replication_wanted, _replica_targets),
    ]


def _location(meta: FileMetadata):
    return meta.locations()


def _location_chunks(meta: FileMetadata):
    return meta.chunk_locations()


def default_attribute_providers() -> dict[str, Callable[[FileMetadata], object]]:
    return {H.LOCATION: _location, H.LOCATION_CHUNKS: _location_chunks}


class Dispatcher:
    def __init__(self, policies: Iterable[RegisteredPolicy] = ()):
        self.policies: list[RegisteredPolicy] = list(policies)

    def register(self, policy: RegisteredPolicy) -> None:
        self.policies.append(policy)

    def select(self, operation: str, hints: HintSet) -> RegisteredPolicy | None:
        found = [p for p in self.policies if p.matches(operation, hints)]
        if len(found) > 1:
            raise RuntimeError(f"policies {[p.name for p in found]} all match {operation}")
        return found[0] if found else None


@dataclass
class _Member:
    capacity: int
    free: int
    address: str
    alive: bool = True
    misses: int = 0
    beat: bool = True


@dataclass
class _Entry:
    path: str
    chunk_size: int
    xattrs: dict[str, str]
    state: FileState = FileState.CREATING
    creator: NodeId | None = None
    next_index: int = 0
    allocations: dict[int, ChunkAssignment] = field(default_factory=dict)
    replicas: dict[int, set] = field(default_factory=dict)
    sizes: dict[int, int] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def snapshot(self) -> FileMetadata:
        chunks = tuple(
            ChunkDescriptor(i, self.sizes[i], frozenset(self.replicas[i]))
            for i in sorted(self.replicas)
        )
        return FileMetadata(self.path, self.chunk_size, chunks, HintSet(self.xattrs), self.state)


class _LockGauge:
    """Counts concurrent holders of xattr mutation locks."""

    def __init__(self):
        self._lock = threading.Lock()
        self.active = 0
        self.max_active = 0
        self.acquisitions = 0

    def __enter__(self):
        with self._lock:
            self.active += 1
            self.acquisitions += 1
            self.max_active = max(self.max_active, self.active)

    def __exit__(self, *exc):
        with self._lock:
            self.active -= 1


class MetadataManager:
    def __init__(
        self,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        heartbeat_misses: int = 3,
        policies: Iterable[RegisteredPolicy] | None = None,
        attribute_providers: Mapping[str, Callable] | None = None,
        global_xattr_lock: bool = False,
        xattr_work: float = 0.0,
        reclaim: Callable[[NodeId, str, list[int]], None] | None = None,
    ):
        self.chunk_size = chunk_size
        self.heartbeat_misses = heartbeat_misses
        self.dispatcher = Dispatcher(default_policies() if policies is None else policies)
        self.attribute_providers = dict(
            default_attribute_providers() if attribute_providers is None else attribute_providers
        )
        self.groups = GroupTable()
        self.placement_log: list[PlacementDecision] = []
        self.xattr_gauge = _LockGauge()
        self.reclaim = reclaim
        self.counters = {"set_xattr": 0, "get_xattr": 0, "allocate": 0, "create": 0, "open": 0}

        self._files: dict[str, _Entry] = {}
        self._ns_lock = threading.Lock()
        self._members: dict[NodeId, _Member] = {}
        self._alloc_lock = threading.RLock()
        self._cursor = 0
        self._global_xattr_lock = threading.Lock() if global_xattr_lock else None
        self._xattr_work = xattr_work

    # -- membership ---------------------------------------------------------

    def node_register(self, status: StorageNodeStatus) -> None:
        with self._alloc_lock:
            m = self._members.get(status.node)
            if m is not None and m.alive:
                m.address = status.address or m.address
                m.beat = True
                m.misses = 0
                return
            self._members[status.node] = _Member(status.capacity_bytes, status.free_bytes, status.address)
        log.info("node %s registered (%d bytes free)", status.node, status.free_bytes)

    def node_heartbeat(self, status: StorageNodeStatus) -> None:
        with self._alloc_lock:
            m = self._members.get(status.node)
            if m is None or not m.alive:
                self.node_register(status)
                return
            m.beat = True
            m.misses = 0

    def check_heartbeats(self) -> list[NodeId]:
        """Close one heartbeat interval; returns nodes newly marked dead."""
        died = []
        with self._alloc_lock:
            for node, m in sorted(self._members.items()):
                if not m.alive:
                    continue
                if m.beat:
                    m.beat = False
                    continue
                m.misses += 1
                if m.misses >= self.heartbeat_misses:
                    m.alive = False
                    died.append(node)
        for node in died:
            log.warning("node %s missed %d heartbeats, marked dead", node, self.heartbeat_misses)
        return died

    def mark_dead(self, node: NodeId) -> None:
        with self._alloc_lock:
            if node in self._members:
                self._members[node].alive = False

    def live_nodes(self) -> tuple[NodeId, ...]:
        with self._alloc_lock:
            return tuple(sorted(n for n, m in self._members.items() if m.alive))

    def members(self) -> list[dict]:
        with self._alloc_lock:
            return [
                {
                    "node": n,
                    "capacity_bytes": m.capacity,
                    "free_bytes": m.free,
                    "address": m.address,
                    "alive": m.alive,
                }
                for n, m in sorted(self._members.items())
            ]

    def node_status(self, node: NodeId) -> StorageNodeStatus:
        with self._alloc_lock:
            m = self._members[node]
            return StorageNodeStatus(node, m.capacity, m.free, m.address)

    # -- files --------------------------------------------------------------

    def _entry(self, file: str) -> _Entry:
        path = normalize_path(file)
        with self._ns_lock:
            e = self._files.get(path)
        if e is None:
            raise UnknownFile(path)
        return e

    def create_file(
        self,
        file: str,
        creator: NodeId | None = None,
        initial_hints: Mapping[str, str] | None = None,
        chunk_size: int | None = None,
    ) -> FileMetadata:
        path = normalize_path(file)
        xattrs = {}
        for k, v in (initial_hints or {}).items():
            h = parse_hint(k, v)
            xattrs[h.key] = h.value
        if chunk_size is not None and chunk_size < 1:
            raise ValueError("chunk size must be >= 1")
        entry = _Entry(path, chunk_size or self.chunk_size, xattrs, creator=creator)
        with self._ns_lock:
            if path in self._files:
                raise FileExists(path)
            self._files[path] = entry
            self.counters["create"] += 1
        return entry.snapshot()

    def open_file(self, file: str) -> FileMetadata:
        e = self._entry(file)
        with e.lock:
            self.counters["open"] += 1
            return e.snapshot()

    def stat(self, file: str) -> FileMetadata:
        e = self._entry(file)
        with e.lock:
            return e.snapshot()

    def exists(self, file: str) -> bool:
        with self._ns_lock:
            return normalize_path(file) in self._files

    def files(self) -> list[str]:
        with self._ns_lock:
            return sorted(self._files)

    def allocate_chunks(
        self,
        file: str,
        count: int,
        hint_snapshot: Mapping[str, str] | None = None,
        requester: NodeId | None = None,
        sizes: list[int] | None = None,
    ) -> PlacementDecision:
        if count < 1:
            raise ValueError("count must be >= 1")
        hints = hint_snapshot if isinstance(hint_snapshot, HintSet) else HintSet(hint_snapshot or {})
        e = self._entry(file)
        with e.lock:
            if e.state is not FileState.CREATING:
                raise FileStateError(f"{e.path} is {e.state.value}, not Creating")
            sizes = list(sizes) if sizes is not None else [e.chunk_size] * count
            if len(sizes) != count:
                raise ValueError("len(sizes) must equal count")
            if any(s < 0 or s > e.chunk_size for s in sizes):
                raise ValueError(f"chunk sizes must lie in [0, {e.chunk_size}]")
            with self._alloc_lock:
                decision = self._place(e, hints, requester, sizes)
                self.placement_log.append(decision)
                self.counters["allocate"] += 1
            for a in decision.assignments:
                e.allocations[a.index] = a
            e.next_index += count
        return decision

    def _place(self, e: _Entry, hints: HintSet, requester, sizes) -> PlacementDecision:
        live = tuple(sorted(n for n, m in self._members.items() if m.alive))
        if not live:
            raise NoCapacity("no live storage nodes")
        free = {n: self._members[n].free for n in live}
        ctx = AllocationContext(e.path, hints, requester, live, free, self.groups, hints.placement())
        policy = self.dispatcher.select(ALLOCATE, hints)
        replicator = self.dispatcher.select(REPLICA_TARGETS, hints)
        requested = policy.name if policy else DEFAULT
        cursor = self._cursor
        out = []
        for j, size in enumerate(sizes):
            index = e.next_index + j
            node = policy.callback(ctx, index, size) if policy else None
            used = requested
            if node is None or node not in free or free[node] < size:
                used = DEFAULT
                node, cursor = self._round_robin(live, free, cursor, size, e.path)
            free[node] -= size
            targets = tuple(replicator.callback(ctx, node, size)) if replicator else ()
            for t in targets:
                free[t] -= size
            out.append(ChunkAssignment(index, node, size, used, targets))
        # commit debits only once every chunk found a home
        self._cursor = cursor
        for n in live:
            self._members[n].free = free[n]
        return PlacementDecision(e.path, requested, tuple(out), live)

    @staticmethod
    def _round_robin(live, free, cursor, size, path):
        n = len(live)
        for step in range(n):
            node = live[(cursor + step) % n]
            if free[node] >= size:
                return node, cursor + step + 1
        raise NoCapacity(f"no live node can hold a {size}-byte chunk of {path}")

    def commit_chunk(self, file: str, chunk: ChunkDescriptor) -> FileMetadata:
        e = self._entry(file)
        with e.lock:
            a = e.allocations.get(chunk.index)
            if a is None:
                raise UnknownAllocation(f"{e.path} chunk {chunk.index} was never allocated")
            stray = set(chunk.replicas) - set(a.nodes)
            if stray:
                raise UnknownAllocation(f"{sorted(stray)} not allocated {e.path} chunk {chunk.index}")
            if chunk.size > a.size:
                raise UnknownAllocation(f"{e.path} chunk {chunk.index}: {chunk.size} > allocated {a.size}")
            e.replicas.setdefault(chunk.index, set()).update(chunk.replicas)
            e.sizes[chunk.index] = chunk.size
            return e.snapshot()

    def commit_file(self, file: str) -> FileMetadata:
        e = self._entry(file)
        with e.lock:
            if e.state is FileState.COMMITTED:
                return e.snapshot()
            missing = [i for i in e.allocations if not e.replicas.get(i)]
            if missing:
                raise FileStateError(f"{e.path}: chunks {missing} have no committed replica")
            e.state = FileState.COMMITTED
            return e.snapshot()

    def delete_file(self, file: str) -> None:
        path = normalize_path(file)
        with self._ns_lock:
            e = self._files.pop(path, None)
        if e is None:
            raise UnknownFile(path)
        with e.lock:
            e.state = FileState.DELETED
            by_node: dict[NodeId, list[int]] = {}
            with self._alloc_lock:
                for a in e.allocations.values():
                    for n in a.nodes:
                        m = self._members.get(n)
                        if m is not None:
                            m.free = min(m.capacity, m.free + a.size)
            for i, nodes in e.replicas.items():
                for n in nodes:
                    by_node.setdefault(n, []).append(i)
        if self.reclaim is not None:
            for n, idx in sorted(by_node.items()):
                try:
                    self.reclaim(n, path, sorted(idx))
                except Exception as exc:  # dead node: its space is already credited
                    log.debug("reclaim on %s failed: %s", n, exc)

    # -- extended attributes --------------------------------------------------

    def set_xattr(self, file: str, hint: Hint | tuple[str, str]) -> None:
        key, value = (hint.key, hint.value) if isinstance(hint, Hint) else hint
        if key in H.READ_ONLY:
            raise ReadOnlyAttribute(key)
        h = parse_hint(key, value)
        e = self._entry(file)
        lock = self._global_xattr_lock or e.lock
        with lock, self.xattr_gauge:
            if self._xattr_work:
                time.sleep(self._xattr_work)
            if lock is not e.lock:
                with e.lock:
                    e.xattrs[h.key] = h.value
            else:
                e.xattrs[h.key] = h.value
            self.counters["set_xattr"] += 1

    def get_xattr(self, file: str, key: str):
        e = self._entry(file)
        with e.lock:
            self.counters["get_xattr"] += 1
            provider = self.attribute_providers.get(key)
            if provider is not None:
                return provider(e.snapshot())
            if key in e.xattrs:
                return e.xattrs[key]
        raise UnknownAttribute(f"{e.path} has no attribute {key!r}")

    def list_xattrs(self, file: str) -> HintSet:
        e = self._entry(file)
        with e.lock:
            return HintSet(e.xattrs)

    # -- invariants -----------------------------------------------------------

    def assigned_bytes(self) -> dict[NodeId, int]:
        out: dict[NodeId, int] = {}
        for path in self.files():
            try:
                e = self._entry(path)
            except UnknownFile:
                continue
            with e.lock:
                for a in e.allocations.values():
                    for n in a.nodes:
                        out[n] = out.get(n, 0) + a.size
        return out

    def check_capacity_conservation(self) -> list[str]:
        used = self.assigned_bytes()
        problems = []
        with self._alloc_lock:
            for n, m in sorted(self._members.items()):
                if m.capacity - m.free != used.get(n, 0):
                    problems.append(f"{n}: capacity-free={m.capacity - m.free}, assigned={used.get(n, 0)}")
        return problems

    def check_locations(self) -> list[str]:
        problems = []
        for path in self.files():
            meta = self.stat(path)
            union = sorted(set().union(*[c.replicas for c in meta.chunks])) if meta.chunks else []
            if self.get_xattr(path, H.LOCATION) != union:
                problems.append(f"{path}: location disagrees with block map")
        return problems

