"""TCP transport: frame servers for the manager and storage nodes, plus proxies.

Every request is one frame (see :mod:`woss.protocol`); the server answers with
a ``REPLY`` frame echoing the request id, or an ``ERROR`` frame whose header
names the exception class.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from typing import Mapping

from woss.errors import NodeUnavailable, WossError, error_from_wire
from woss.hints import EMPTY, Hint, HintSet
from woss.manager import MetadataManager, PlacementDecision
from woss.model import ChunkDescriptor, FileMetadata, NodeId, Opcode, StorageNodeStatus, TaggedRequest
from woss.protocol import encode_frame, pack_payload, read_frame, unpack_payload

log = logging.getLogger(__name__)


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


# -- servers ---------------------------------------------------------------------


class ManagerService:
    def __init__(self, manager: MetadataManager):
        self.manager = manager

    def handle(self, req: TaggedRequest) -> tuple[dict, bytes]:
        m = self.manager
        h, _ = unpack_payload(req.payload) if req.payload else ({}, b"")
        op = req.opcode
        if op is Opcode.CREATE_FILE:
            meta = m.create_file(req.file, h.get("creator"), dict(req.hints), h.get("chunk_size"))
            return meta.to_dict(), b""
        if op is Opcode.OPEN_FILE:
            return m.open_file(req.file).to_dict(), b""
        if op is Opcode.ALLOCATE:
            d = m.allocate_chunks(req.file, h["count"], req.hints, h.get("requester"), h.get("sizes"))
            return d.to_dict(), b""
        if op is Opcode.COMMIT_CHUNK:
            c = ChunkDescriptor(h["index"], h["size"], frozenset(h["replicas"]))
            return m.commit_chunk(req.file, c).to_dict(), b""
        if op is Opcode.COMMIT_FILE:
            return m.commit_file(req.file).to_dict(), b""
        if op is Opcode.SET_XATTR:
            m.set_xattr(req.file, (h["key"], h["value"]))
            return {}, b""
        if op is Opcode.GET_XATTR:
            return {"value": m.get_xattr(req.file, h["key"])}, b""
        if op is Opcode.REGISTER:
            m.node_register(StorageNodeStatus.from_dict(h))
            return {}, b""
        if op is Opcode.HEARTBEAT:
            m.node_heartbeat(StorageNodeStatus.from_dict(h))
            return {}, b""
        if op is Opcode.DELETE_FILE:
            m.delete_file(req.file)
            return {}, b""
        if op is Opcode.MEMBERS:
            return {"members": m.members()}, b""
        raise ValueError(f"manager cannot handle {op.name}")


class _FrameHandler(socketserver.StreamRequestHandler):
    def handle(self):
        service = self.server.service
        while True:
            try:
                req = read_frame(self.rfile)
            except WossError as exc:
                log.warning("dropping connection: %s", exc)
                return
            if req is None:
                return
            try:
                header, data = service.handle(req)
                reply = TaggedRequest(Opcode.REPLY, req.file, EMPTY, pack_payload(header, data), req.request_id)
            except Exception as exc:  # surfaced to the caller by class name
                if not isinstance(exc, WossError):
                    log.exception("error serving %s", req.opcode.name)
                err = {"error": type(exc).__name__, "message": str(exc)}
                for attr in ("replicas", "failed", "hop"):
                    if hasattr(exc, attr):
                        err[attr] = getattr(exc, attr)
                reply = TaggedRequest(Opcode.ERROR, req.file, EMPTY, pack_payload(err), req.request_id)
            try:
                self.wfile.write(encode_frame(reply))
                self.wfile.flush()
            except OSError:
                return


class FrameServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service):
        super().__init__(address, _FrameHandler)
        self.service = service

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "FrameServer":
        threading.Thread(target=self.serve_forever, name=f"serve-{self.address}", daemon=True).start()
        return self


# -- client side ---------------------------------------------------------------------


class Connection:
    """One persistent socket; calls are serialized per connection."""

    def __init__(self, address: str, timeout: float = 30.0):
        self.address = address
        self.timeout = timeout
        self._sock = None
        self._rfile = None
        self._lock = threading.Lock()
        self._next_id = 0

    def _connect(self):
        sock = socket.create_connection(parse_address(self.address), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._rfile = sock.makefile("rb")

    def close(self):
        with self._lock:
            self._drop()

    def _drop(self):
        if self._sock is not None:
            try:
                self._rfile.close()
                self._sock.close()
            except OSError:
                pass
        self._sock = self._rfile = None

    def call(self, opcode: Opcode, file: str = "", hints: HintSet = EMPTY, header: Mapping | None = None, data: bytes = b""):
        with self._lock:
            self._next_id += 1
            req = TaggedRequest(opcode, file, hints, pack_payload(dict(header or {}), data), self._next_id)
            frame = encode_frame(req)
            for attempt in (0, 1):
                try:
                    if self._sock is None:
                        self._connect()
                    self._sock.sendall(frame)
                    reply = read_frame(self._rfile)
                    if reply is None:
                        raise ConnectionError("server closed the connection")
                    break
                except (OSError, ConnectionError) as exc:
                    self._drop()
                    if attempt:
                        raise NodeUnavailable(f"{self.address}: {exc}") from exc
        if reply.request_id != req.request_id:
            raise NodeUnavailable(f"{self.address}: reply id {reply.request_id} != {req.request_id}")
        rh, rdata = unpack_payload(reply.payload)
        if reply.opcode is Opcode.ERROR:
            exc = error_from_wire(rh["error"], rh.get("message", ""))
            for attr in ("replicas", "failed", "hop"):
                if attr in rh:
                    setattr(exc, attr, rh[attr])
            raise exc
        return rh, rdata


class RemoteManager:
    """Proxy with the :class:`MetadataManager` method surface."""

    def __init__(self, address: str):
        self.address = address
        self._local = threading.local()

    @property
    def _conn(self) -> Connection:
        c = getattr(self._local, "conn", None)
        if c is None:
            c = self._local.conn = Connection(self.address)
        return c

    def create_file(self, file, creator=None, initial_hints=None, chunk_size=None) -> FileMetadata:
        h, _ = self._conn.call(Opcode.CREATE_FILE, file, HintSet(initial_hints or {}), {"creator": creator, "chunk_size": chunk_size})
        return FileMetadata.from_dict(h)

    def open_file(self, file) -> FileMetadata:
        return FileMetadata.from_dict(self._conn.call(Opcode.OPEN_FILE, file)[0])

    stat = open_file

    def allocate_chunks(self, file, count, hint_snapshot=None, requester=None, sizes=None) -> PlacementDecision:
        hints = hint_snapshot if isinstance(hint_snapshot, HintSet) else HintSet(hint_snapshot or {})
        h, _ = self._conn.call(Opcode.ALLOCATE, file, hints, {"count": count, "requester": requester, "sizes": sizes})
        return PlacementDecision.from_dict(h)

    def commit_chunk(self, file, chunk: ChunkDescriptor) -> FileMetadata:
        h, _ = self._conn.call(
            Opcode.COMMIT_CHUNK, file, EMPTY, {"index": chunk.index, "size": chunk.size, "replicas": sorted(chunk.replicas)}
        )
        return FileMetadata.from_dict(h)

    def commit_file(self, file) -> FileMetadata:
        return FileMetadata.from_dict(self._conn.call(Opcode.COMMIT_FILE, file)[0])

    def set_xattr(self, file, hint) -> None:
        key, value = (hint.key, hint.value) if isinstance(hint, Hint) else hint
        self._conn.call(Opcode.SET_XATTR, file, EMPTY, {"key": key, "value": value})

    def get_xattr(self, file, key):
        return self._conn.call(Opcode.GET_XATTR, file, EMPTY, {"key": key})[0]["value"]

    def node_register(self, status: StorageNodeStatus) -> None:
        self._conn.call(Opcode.REGISTER, "", EMPTY, status.to_dict())

    def node_heartbeat(self, status: StorageNodeStatus) -> None:
        self._conn.call(Opcode.HEARTBEAT, "", EMPTY, status.to_dict())

    def delete_file(self, file) -> None:
        self._conn.call(Opcode.DELETE_FILE, file)

    def members(self) -> list[dict]:
        return self._conn.call(Opcode.MEMBERS)[0]["members"]

    def live_nodes(self) -> tuple[NodeId, ...]:
        return tuple(m["node"] for m in self.members() if m["alive"])


class RemoteNode:
    """Proxy with the :class:`~woss.storage.StorageNode` request surface."""

    def __init__(self, node_id: NodeId, address: str):
        self.node_id = node_id
        self.address = address
        self._local = threading.local()

    @property
    def _conn(self) -> Connection:
        c = getattr(self._local, "conn", None)
        if c is None:
            c = self._local.conn = Connection(self.address)
        return c

    def _forward(self, req: TaggedRequest):
        h, data = unpack_payload(req.payload)
        return self._conn.call(req.opcode, req.file, req.hints, h, data)

    def put_chunk(self, req: TaggedRequest) -> dict:
        return self._forward(req)[0]

    def get_chunk(self, req: TaggedRequest) -> bytes:
        return self._forward(req)[1]

    def receive_replica(self, file, index, data, digest, chain=()) -> list[dict]:
        h, _ = self._conn.call(Opcode.REPLICATE, file, EMPTY, {"index": index, "digest": digest, "chain": list(chain)}, data)
        return h["hops"]

    def reclaim(self, file, indices) -> None:
        self._conn.call(Opcode.RECLAIM, file, EMPTY, {"indices": list(indices)})

    def status(self) -> StorageNodeStatus:
        return StorageNodeStatus.from_dict(self._conn.call(Opcode.NODE_STATUS)[0])


class NodeDirectory:
    """Resolves node ids to :class:`RemoteNode` proxies via the manager's member list."""

    def __init__(self, manager: RemoteManager | MetadataManager):
        self.manager = manager
        self._nodes: dict[NodeId, RemoteNode] = {}
        self._lock = threading.Lock()

    def __call__(self, node_id: NodeId) -> RemoteNode:
        with self._lock:
            proxy = self._nodes.get(node_id)
        if proxy is not None:
            return proxy
        for m in self.manager.members():
            if m["node"] == node_id and m["address"]:
                proxy = RemoteNode(node_id, m["address"])
                with self._lock:
                    self._nodes[node_id] = proxy
                return proxy
        raise NodeUnavailable(f"no address known for node {node_id!r}")
