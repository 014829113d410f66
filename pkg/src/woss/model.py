"""Domain values shared by the manager, storage nodes and clients.

All of these are immutable; the manager keeps its own mutable bookkeeping and
hands out snapshots.
"""

from __future__ import annotations

import enum
import posixpath
from dataclasses import dataclass, field

from woss.hints import EMPTY, HintSet

NodeId = str

MiB = 1 << 20
DEFAULT_CHUNK_SIZE = MiB


def normalize_path(path: str) -> str:
    """Return the canonical absolute form of ``path`` (no ``.``, ``..`` or ``//``)."""
    if not path:
        raise ValueError("empty path")
    p = posixpath.normpath("/" + path.lstrip("/"))
    # normpath keeps a leading '//' (POSIX allows it); squash it
    if p.startswith("//"):
        p = "/" + p.lstrip("/")
    if p == "/":
        raise ValueError("the root is not a file")
    return p


def check_node_id(node: NodeId) -> NodeId:
    if not isinstance(node, str) or not node:
        raise ValueError(f"invalid node id {node!r}")
    return node


class FileState(enum.Enum):
    CREATING = "Creating"
    COMMITTED = "Committed"
    DELETED = "Deleted"


@dataclass(frozen=True)
class ChunkDescriptor:
    index: int
    size: int
    replicas: frozenset[NodeId] = frozenset()

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("chunk index must be >= 0")
        if self.size < 0:
            raise ValueError("chunk size must be >= 0")
        object.__setattr__(self, "replicas", frozenset(self.replicas))

    def sorted_replicas(self) -> list[NodeId]:
        return sorted(self.replicas)


@dataclass(frozen=True)
class FileMetadata:
    file: str
    chunk_size: int
    chunks: tuple[ChunkDescriptor, ...] = ()
    xattrs: HintSet = EMPTY
    state: FileState = FileState.CREATING

    @property
    def size(self) -> int:
        return sum(c.size for c in self.chunks)

    def locations(self) -> list[NodeId]:
        nodes: set[NodeId] = set()
        for c in self.chunks:
            nodes |= c.replicas
        return sorted(nodes)

    def chunk_locations(self) -> list[list[NodeId]]:
        return [c.sorted_replicas() for c in self.chunks]

    def to_dict(self) -> dict:
        return {
            "file": self.file,
            "chunk_size": self.chunk_size,
            "chunks": [[c.index, c.size, c.sorted_replicas()] for c in self.chunks],
            "xattrs": [list(kv) for kv in self.xattrs.canonical()],
            "state": self.state.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FileMetadata":
        return cls(
            file=d["file"],
            chunk_size=d["chunk_size"],
            chunks=tuple(ChunkDescriptor(i, s, frozenset(r)) for i, s, r in d["chunks"]),
            xattrs=HintSet((k, v) for k, v in d["xattrs"]),
            state=FileState(d["state"]),
        )


@dataclass(frozen=True)
class StorageNodeStatus:
    node: NodeId
    capacity_bytes: int
    free_bytes: int
    address: str = ""

    def __post_init__(self):
        check_node_id(self.node)
        if not 0 <= self.free_bytes <= self.capacity_bytes:
            raise ValueError("need 0 <= free_bytes <= capacity_bytes")

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "capacity_bytes": self.capacity_bytes,
            "free_bytes": self.free_bytes,
            "address": self.address,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StorageNodeStatus":
        return cls(d["node"], d["capacity_bytes"], d["free_bytes"], d.get("address", ""))


class Opcode(enum.IntEnum):
    # manager
    CREATE_FILE = 1
    OPEN_FILE = 2
    ALLOCATE = 3
    COMMIT_CHUNK = 4
    SET_XATTR = 5
    GET_XATTR = 6
    REGISTER = 7
    HEARTBEAT = 8
    DELETE_FILE = 9
    COMMIT_FILE = 10
    MEMBERS = 11
    # storage node
    PUT_CHUNK = 32
    GET_CHUNK = 33
    REPLICATE = 34
    RECLAIM = 35
    NODE_STATUS = 36
    # replies
    REPLY = 126
    ERROR = 127


@dataclass(frozen=True)
class TaggedRequest:
    opcode: Opcode
    file: str
    hints: HintSet = EMPTY
    payload: bytes = b""
    request_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "opcode", Opcode(self.opcode))
        if not isinstance(self.hints, HintSet):
            object.__setattr__(self, "hints", HintSet(self.hints))
        if not isinstance(self.payload, bytes):
            object.__setattr__(self, "payload", bytes(self.payload))


@dataclass(frozen=True)
class ChunkAssignment:
    """One chunk's slot in a placement decision."""

    index: int
    node: NodeId
    size: int
    policy: str
    replicas: tuple[NodeId, ...] = field(default=())

    @property
    def nodes(self) -> tuple[NodeId, ...]:
        return (self.node, *self.replicas)
