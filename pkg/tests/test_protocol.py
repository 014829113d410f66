import io
import struct

import pytest
from hypothesis import given, settings, strategies as st

from woss.errors import FrameTooLarge, TruncatedFrame, VersionMismatch
from woss.hints import HintSet
from woss.model import Opcode, TaggedRequest
from woss.protocol import decode_frame, encode_frame, pack_payload, read_frame, unpack_payload

# frozen once; any change to the layout must be deliberate
GOLDEN = bytes.fromhex(
    "2c000000" "01" "03" "2a00000000000000" "02000000" "2f61" "0100"
    "02000000" "4450" "05000000" "6c6f63616c" "07000000" "7b2263223a317d"
)


def golden_request():
    return TaggedRequest(Opcode.ALLOCATE, "/a", HintSet({"DP": "local"}), pack_payload({"c": 1}), 42)


def test_golden_frame():
    assert encode_frame(golden_request()) == GOLDEN
    assert decode_frame(GOLDEN) == golden_request()


def test_version_checked_first():
    bad = bytearray(GOLDEN)
    bad[4] = 2
    with pytest.raises(VersionMismatch):
        decode_frame(bytes(bad))
    bad[5] = 99  # unknown opcode too; version still wins
    with pytest.raises(VersionMismatch, match="version"):
        decode_frame(bytes(bad))


def test_unknown_opcode():
    bad = bytearray(GOLDEN)
    bad[5] = 99
    with pytest.raises(VersionMismatch):
        decode_frame(bytes(bad))


@pytest.mark.parametrize("cut", [0, 3, 5, 14, 20, len(GOLDEN) - 1])
def test_truncated(cut):
    with pytest.raises(TruncatedFrame):
        decode_frame(GOLDEN[:cut])


def test_length_prefix_disagrees_with_body():
    with pytest.raises(TruncatedFrame):
        decode_frame(GOLDEN + b"x")
    # hint count claims more entries than the body holds
    bad = bytearray(GOLDEN)
    bad[20:22] = struct.pack("<H", 9)
    with pytest.raises(TruncatedFrame):
        decode_frame(bytes(bad))


def test_frame_too_large():
    req = TaggedRequest(Opcode.PUT_CHUNK, "/a", HintSet(), b"x" * 100, 1)
    with pytest.raises(FrameTooLarge):
        encode_frame(req, max_frame=64)


def test_read_frame_stream():
    stream = io.BytesIO(GOLDEN + GOLDEN)
    assert read_frame(stream) == golden_request()
    assert read_frame(stream) == golden_request()
    assert read_frame(stream) is None
    with pytest.raises(TruncatedFrame):
        read_frame(io.BytesIO(GOLDEN[:-3]))


def test_payload_round_trip():
    h, d = unpack_payload(pack_payload({"b": [1, 2], "a": None}, b"\x00\xff"))
    assert h == {"a": None, "b": [1, 2]} and d == b"\x00\xff"


requests = st.builds(
    TaggedRequest,
    st.sampled_from(list(Opcode)),
    st.text(max_size=40),
    st.dictionaries(st.text(min_size=1, max_size=12), st.text(max_size=20), max_size=5).map(HintSet),
    st.binary(max_size=300),
    st.integers(0, 2**64 - 1),
)


@settings(max_examples=300)
@given(requests)
def test_round_trip(req):
    assert decode_frame(encode_frame(req)) == req
