"""Length-prefixed binary frames carrying a per-request hint snapshot.

Frame layout (all integers little-endian)::

    u32  length            bytes that follow this field
    u8   version           PROTOCOL_VERSION
    u8   opcode
    u64  request_id
    u32  n + n bytes       file id, UTF-8
    u16  hint count
    ( u32 n + key, u32 n + value ) * hint count, canonical key order
    ...  payload           the remainder of the frame

RPC payloads are ``u32 n + JSON header`` followed by raw data bytes; see
:func:`pack_payload`.
"""

from __future__ import annotations

import json
import struct

from woss.errors import FrameTooLarge, TruncatedFrame, VersionMismatch
from woss.hints import HintSet
from woss.model import Opcode, TaggedRequest

PROTOCOL_VERSION = 1
MAX_FRAME = 0xFFFFFFFF

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<BBQ")
_U16 = struct.Struct("<H")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _LEN.pack(len(b)) + b


def encode_frame(req: TaggedRequest, *, max_frame: int = MAX_FRAME) -> bytes:
    hints = req.hints.canonical()
    if len(hints) > 0xFFFF:
        raise FrameTooLarge("too many hints for one frame")
    parts = [
        _HEAD.pack(PROTOCOL_VERSION, int(req.opcode), req.request_id),
        _pack_str(req.file),
        _U16.pack(len(hints)),
    ]
    for k, v in hints:
        parts.append(_pack_str(k))
        parts.append(_pack_str(v))
    parts.append(req.payload)
    body = b"".join(parts)
    if len(body) > min(max_frame, MAX_FRAME):
        raise FrameTooLarge(f"frame body of {len(body)} bytes exceeds {min(max_frame, MAX_FRAME)}")
    return _LEN.pack(len(body)) + body


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: memoryview, pos: int):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self.buf):
            raise TruncatedFrame(f"need {n} bytes at offset {self.pos}, frame has {len(self.buf)}")
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def string(self) -> str:
        (n,) = _LEN.unpack(self.take(4))
        return bytes(self.take(n)).decode("utf-8")


def decode_frame(data: bytes) -> TaggedRequest:
    """Inverse of :func:`encode_frame`; ``data`` must hold exactly one frame."""
    buf = memoryview(data)
    if len(buf) < _LEN.size:
        raise TruncatedFrame("missing length prefix")
    (length,) = _LEN.unpack(buf[:4])
    if len(buf) - 4 < length:
        raise TruncatedFrame(f"declared {length} bytes, got {len(buf) - 4}")
    if len(buf) - 4 > length:
        raise TruncatedFrame(f"{len(buf) - 4 - length} trailing bytes after frame")
    return decode_body(buf[4:])


def decode_body(body) -> TaggedRequest:
    r = _Reader(memoryview(body), 0)
    if len(r.buf) < 1:
        raise TruncatedFrame("empty frame")
    version = r.buf[0]
    if version != PROTOCOL_VERSION:
        raise VersionMismatch(f"frame version {version}, supported {PROTOCOL_VERSION}")
    _, opcode, request_id = _HEAD.unpack(r.take(_HEAD.size))
    file = r.string()
    (count,) = _U16.unpack(r.take(2))
    hints = []
    for _ in range(count):
        hints.append((r.string(), r.string()))
    try:
        op = Opcode(opcode)
    except ValueError:
        raise VersionMismatch(f"unknown opcode {opcode}") from None
    payload = bytes(r.buf[r.pos:])
    return TaggedRequest(op, file, HintSet(hints), payload, request_id)


def read_frame(stream) -> TaggedRequest | None:
    """Read one frame from a binary file-like object; ``None`` on clean EOF."""
    head = stream.read(4)
    if not head:
        return None
    if len(head) < 4:
        raise TruncatedFrame("connection closed inside length prefix")
    (length,) = _LEN.unpack(head)
    body = stream.read(length)
    if len(body) < length:
        raise TruncatedFrame(f"connection closed after {len(body)} of {length} bytes")
    return decode_body(body)


def pack_payload(header: dict | None = None, data: bytes = b"") -> bytes:
    js = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(js)) + js + bytes(data)


def unpack_payload(payload: bytes) -> tuple[dict, bytes]:
    if len(payload) < 4:
        raise TruncatedFrame("payload header missing")
    (n,) = _LEN.unpack_from(payload, 0)
    if 4 + n > len(payload):
        raise TruncatedFrame("payload header truncated")
    header = json.loads(payload[4:4 + n].decode("utf-8"))
    return header, payload[4 + n:]
