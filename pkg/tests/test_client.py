import random

import pytest
from hypothesis import given, settings, strategies as st

from woss.client import ChunkCache
from woss.errors import AllReplicasUnreachable, FileExists, FileStateError, ReadRangeError
from woss.hints import HintSet


def test_cache_is_byte_bounded_lru():
    c = ChunkCache(10)
    c.put(0, b"aaaa")
    c.put(1, b"bbbb")
    assert c.get(0) == b"aaaa"  # 0 is now most recent
    c.put(2, b"cccc")  # evicts 1
    assert c.get(1) is None and c.get(0) == b"aaaa" and c.get(2) == b"cccc"
    assert c.nbytes == 8 and c.peak <= 10
    c.put(3, b"x" * 11)  # larger than the cache: not kept
    assert c.get(3) is None


def test_zero_cache_holds_nothing():
    c = ChunkCache(0)
    c.put(0, b"a")
    assert len(c) == 0 and c.peak == 0


def test_write_then_read(cluster):
    cl = cluster.client(colocated="n01")
    data = bytes(range(256)) * 13  # 3328 bytes: 4 chunks of 1024, last partial
    meta = cl.write_file("/d/f", data)
    assert meta.size == len(data) and len(meta.chunks) == 4
    assert cl.read_file("/d/f") == data
    h = cl.open("/d/f", "r")
    assert cl.read(h, 1000, 100) == data[1000:1100]
    assert cl.read(h, 3300, 28) == data[3300:]
    with pytest.raises(ReadRangeError):
        cl.read(h, 3300, 29)


def test_local_placement_reads_local(cluster):
    cl = cluster.client(colocated="n02")
    cl.write_file("/l", b"x" * 4096, {"DP": "local"})
    assert cluster.manager.get_xattr("/l", "location") == ["n02"]
    cl.read_file("/l")
    assert cl.stats.local_reads == 4 and cl.stats.remote_reads == 0
    assert cl.stats.local_writes == 4


def test_cache_hits_and_cache_size_hint(cluster):
    cl = cluster.client(colocated="n00")
    cl.write_file("/c", b"y" * 2048)
    h = cl.open("/c", "r")
    cl.read(h, 0, 10)
    cl.read(h, 10, 10)
    assert cl.stats.cache_hits == 1 and cl.stats.network_reads == 1
    cl.write_file("/nc", b"y" * 2048, {"CacheSize": "0"})
    h = cl.open("/nc", "r")
    cl.read(h, 0, 10)
    cl.read(h, 10, 10)
    assert h.cache.capacity == 0 and cl.stats.cache_hits == 1 and cl.stats.network_reads == 3


def test_hint_snapshot_taken_at_open(cluster):
    cl = cluster.client(colocated="n01")
    cl.create("/s")
    cl.set_xattr("/s", "DP", "local")
    h = cl.open("/s", "w", create=False)
    cl.set_xattr("/s", "DP", "scatter 1")  # after open: must not affect this handle
    cl.write(h, b"z" * 3072)
    cl.close(h)
    assert h.tags_seen == {HintSet({"DP": "local"})}
    assert cluster.manager.get_xattr("/s", "location") == ["n01"]


def test_open_rules(cluster):
    cl = cluster.client()
    h = cl.open("/o", "w")
    with pytest.raises(FileStateError):
        cl.open("/o", "r")
    cl.write(h, b"abc")
    with pytest.raises(FileStateError):
        cl.read(h)
    cl.close(h)
    assert cl.close(h).size == 3  # idempotent
    with pytest.raises(FileStateError):
        cl.write(h, b"more")
    with pytest.raises(FileExists):
        cl.open("/o", "w")
    with pytest.raises(FileStateError):
        cl.open("/o", "w", create=False)
    with pytest.raises(ValueError):
        cl.open("/o", "a")


def test_failover_and_unreachable(cluster):
    w = cluster.client()
    w.write_file("/r", b"q" * 1024, {"Replication": "2", "RepSmntc": "pessimistic"})
    nodes = cluster.manager.get_xattr("/r", "location")
    assert len(nodes) == 2
    cluster.node(nodes[0]).corrupt("/r", 0)
    reader = cluster.client(colocated=nodes[0])
    assert reader.read_file("/r") == b"q" * 1024
    assert reader.stats.remote_reads == 1
    cluster.kill(nodes[1])
    with pytest.raises(AllReplicasUnreachable):
        cluster.client(colocated=nodes[0]).read_file("/r")


def test_replica_choice_is_seeded(cluster):
    w = cluster.client()
    w.write_file("/b", b"b" * 1024, {"Replication": "4"})

    def picks(seed):
        cl = cluster.client(rng=random.Random(seed))
        out = []
        for _ in range(20):
            before = {n: s["remote"] for n, s in cluster.served().items()}
            cl.read_file("/b")
            after = cluster.served()
            out.append(next(n for n in after if after[n]["remote"] != before[n]))
        return out

    assert picks(3) == picks(3)
    assert len(set(picks(3))) > 1


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.binary(max_size=700), max_size=8),
    st.sampled_from([{}, {"DP": "local"}, {"DP": "scatter 2"}, {"Replication": "2"}, {"CacheSize": "0"}]),
)
def test_read_your_writes(pieces, hints):
    from woss.cluster import LocalCluster

    c = LocalCluster(nodes=3, chunk_size=256)
    cl = c.client(colocated="n01")
    h = cl.open("/f", "w", hints)
    for p in pieces:
        cl.write(h, p)
    cl.close(h)
    data = b"".join(pieces)
    assert cl.read_file("/f") == data
    rng = random.Random(len(data))
    h = cl.open("/f", "r")
    for _ in range(5):
        lo = rng.randint(0, len(data))
        hi = rng.randint(lo, len(data))
        assert cl.read(h, lo, hi - lo) == data[lo:hi]
    assert c.check_invariants() == []
