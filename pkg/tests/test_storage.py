import threading
import time

import pytest

from woss.errors import ChainBroken, ChecksumMismatch, ChunkNotFound, NodeUnavailable, OutOfSpace, ReplicationDegraded
from woss.hints import HintSet
from woss.kernels import chunk_digest
from woss.storage import DirStore, MemStore, ReplicationJob, StorageNode, open_store, put_request


@pytest.mark.parametrize("kind", ["mem", "dir"])
def test_stores(kind, tmp_path):
    s = MemStore() if kind == "mem" else DirStore(tmp_path / "s")
    s.put("/a.b", 0, b"hello", chunk_digest(b"hello"))
    s.put("/c", 3, b"", chunk_digest(b""))
    assert s.get("/a.b", 0) == (b"hello", chunk_digest(b"hello"))
    assert s.size_of("/a.b", 0) == 5 and s.size_of("/a.b", 1) is None
    assert s.keys() == [("/a.b", 0), ("/c", 3)]
    s.corrupt("/a.b", 0)
    data, digest = s.get("/a.b", 0)
    assert chunk_digest(data) != digest
    s.delete("/a.b", 0)
    with pytest.raises(ChunkNotFound):
        s.get("/a.b", 0)


def test_dir_store_survives_reopen(tmp_path):
    DirStore(tmp_path).put("/x", 1, b"abc", chunk_digest(b"abc"))
    again = open_store(f"dir:{tmp_path}")
    assert again.get("/x", 1)[0] == b"abc"
    node = StorageNode("n0", 100, again)
    assert node.status().free_bytes == 97


def test_open_store_rejects_unknown():
    with pytest.raises(ValueError):
        open_store("tape")


def put_one(cluster, path, data, hints, requester=None):
    """Allocate one chunk and send it to its primary, as a client would."""
    hs = HintSet(hints)
    cluster.manager.create_file(path, requester, hints)
    a = cluster.manager.allocate_chunks(path, 1, hs, requester, [len(data)]).assignments[0]
    ack = cluster.node(a.node).put_chunk(put_request(path, 0, data, hs, a.replicas, requester))
    return a, ack


def holders(cluster, path, index=0):
    return sorted(n for n, node in cluster.nodes.items() if node.has_chunk(path, index))


def test_optimistic_ack_precedes_replication(make_cluster):
    c = make_cluster(nodes=4, sync_replication=False)
    c.node("n01").write_delay = 0.3
    t0 = time.monotonic()
    a, ack = put_one(c, "/f", b"x" * 100, {"Replication": "3"})
    assert time.monotonic() - t0 < 0.2
    assert ack["replicas"] == ["n00"] and ack["pending"] == ["n01", "n02"]
    c.drain()
    assert holders(c, "/f") == ["n00", "n01", "n02"]
    assert c.manager.get_xattr("/f", "location") == ["n00", "n01", "n02"]


@pytest.mark.parametrize("mode", ["eager", "lazy"])
def test_pessimistic_waits_for_all(make_cluster, mode):
    c = make_cluster(nodes=4, sync_replication=False, replication_mode=mode)
    c.node("n02").write_delay = 0.2
    t0 = time.monotonic()
    a, ack = put_one(c, "/f", b"x" * 100, {"Replication": "3", "RepSmntc": "pessimistic"})
    assert time.monotonic() - t0 >= 0.2
    assert sorted(ack["replicas"]) == ["n00", "n01", "n02"]
    assert holders(c, "/f") == ["n00", "n01", "n02"]


def test_eager_degraded_when_target_dead(make_cluster):
    c = make_cluster(nodes=3)
    c.kill("n01")
    with pytest.raises(ReplicationDegraded) as ei:
        put_one(c, "/f", b"data", {"Replication": "2", "RepSmntc": "pessimistic"})
    assert ei.value.replicas == ["n00"] and ei.value.failed == ["n01"]
    assert holders(c, "/f") == ["n00"]


def test_eager_r3_one_dead_keeps_the_rest(make_cluster):
    c = make_cluster(nodes=3)
    c.kill("n02")
    with pytest.raises(ReplicationDegraded) as ei:
        put_one(c, "/f", b"data", {"Replication": "3", "RepSmntc": "pessimistic"})
    assert sorted(ei.value.replicas) == ["n00", "n01"] and ei.value.failed == ["n02"]


def test_optimistic_failure_is_recorded_not_raised(make_cluster):
    c = make_cluster(nodes=3)
    c.kill("n01")
    a, ack = put_one(c, "/f", b"data", {"Replication": "2"})
    assert ack["replicas"] == ["n00"]
    assert len(c.node("n00").degraded) == 1


def test_chain_commits_in_hop_order(make_cluster):
    c = make_cluster(nodes=4, replication_mode="lazy")
    put_one(c, "/f", b"z" * 50, {"Replication": "4", "RepSmntc": "pessimistic"})
    seqs = [dict((f, s) for f, i, s in c.node(n).commit_log)["/f"] for n in ("n00", "n01", "n02", "n03")]
    assert seqs == sorted(seqs)


def test_chain_broken_reports_hop(make_cluster):
    c = make_cluster(nodes=4, replication_mode="lazy")
    c.kill("n02")
    with pytest.raises(ChainBroken) as ei:
        put_one(c, "/f", b"z", {"Replication": "4", "RepSmntc": "pessimistic"})
    assert ei.value.hop == 1 and ei.value.failed == ["n02"]
    assert ei.value.replicas == ["n00", "n01"]
    assert holders(c, "/f") == ["n00", "n01"]


def test_lazy_jobs_defer_to_foreground(make_cluster):
    c = make_cluster(nodes=2, sync_replication=False, replication_mode="lazy")
    src = c.node("n00")
    src._background.max_defer = 5.0
    src._enter()  # a foreground request in flight
    try:
        put_one(c, "/f", b"q", {"Replication": "2"})
        time.sleep(0.2)
        assert not c.node("n01").has_chunk("/f", 0)
    finally:
        src._leave()
    c.drain()
    assert c.node("n01").has_chunk("/f", 0)


def test_retries_absorb_transient_failures(make_cluster):
    c = make_cluster(nodes=2)
    src = c.node("n00")
    real = src.resolve
    fails = {"left": 2}

    def flaky(node_id):
        if fails["left"]:
            fails["left"] -= 1
            raise NodeUnavailable("blip")
        return real(node_id)

    src.resolve = flaky
    put_one(c, "/f", b"abc", {"Replication": "2", "RepSmntc": "pessimistic"})
    assert holders(c, "/f") == ["n00", "n01"]


def test_retries_give_up(make_cluster):
    c = make_cluster(nodes=2)
    src = c.node("n00")
    attempts = []

    def down(node_id):
        attempts.append(node_id)
        raise NodeUnavailable("down")

    src.resolve = down
    with pytest.raises(ReplicationDegraded):
        put_one(c, "/f", b"abc", {"Replication": "2", "RepSmntc": "pessimistic"})
    assert len(attempts) == src.retries + 1


def test_checksums(make_cluster):
    c = make_cluster(nodes=2)
    put_one(c, "/f", b"payload", {})
    c.node("n00").corrupt("/f", 0)
    with pytest.raises(ChecksumMismatch):
        c.node("n00").read_chunk("/f", 0)
    with pytest.raises(ChecksumMismatch):
        c.node("n01").receive_replica("/g", 0, b"payload", chunk_digest(b"other"))


def test_out_of_space():
    node = StorageNode("n0", 10, MemStore())
    with pytest.raises(OutOfSpace):
        node.receive_replica("/f", 0, b"x" * 11, chunk_digest(b"x" * 11))
    node.receive_replica("/f", 0, b"x" * 10, chunk_digest(b"x" * 10))
    assert node.status().free_bytes == 0
    node.reclaim("/f", [0, 1])
    assert node.status().free_bytes == 10


def test_dead_node_refuses_service(make_cluster):
    c = make_cluster(nodes=2)
    put_one(c, "/f", b"a", {})
    c.node("n00").kill()
    with pytest.raises(NodeUnavailable):
        c.node("n00").read_chunk("/f", 0)
    c.node("n00").revive()
    assert c.node("n00").read_chunk("/f", 0) == b"a"


def test_served_counters(make_cluster):
    c = make_cluster(nodes=2)
    put_one(c, "/f", b"a", {})
    c.node("n00").read_chunk("/f", 0, requester="n00")
    c.node("n00").read_chunk("/f", 0, requester="n01")
    c.node("n00").read_chunk("/f", 0)
    assert c.served()["n00"] == {"local": 1, "remote": 2}
    assert c.node("n00").served_by_chunk[("/f", 0)] == 3


def test_duplicate_targets_rejected():
    with pytest.raises(ValueError):
        ReplicationJob("/f", 0, b"", ("n1", "n1"))


def test_concurrent_puts_keep_accounting(make_cluster):
    c = make_cluster(nodes=3, sync_replication=False)
    errors = []

    def writer(i):
        try:
            put_one(c, f"/f{i}", bytes([i]) * 200, {"Replication": "2"})
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=writer, args=(i,)) for i in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    c.drain()
    assert not errors
    used = sum(n.capacity - n.status().free_bytes for n in c.nodes.values())
    assert used == 20 * 200 * 2
