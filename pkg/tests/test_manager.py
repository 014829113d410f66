import threading

import pytest

from woss.errors import (
    FileExists,
    FileStateError,
    MalformedHintValue,
    NoCapacity,
    ReadOnlyAttribute,
    UnknownAllocation,
    UnknownAttribute,
    UnknownFile,
)
from woss.manager import COLLOCATION, DEFAULT, LOCAL, SCATTER, MetadataManager
from woss.model import ChunkDescriptor, FileState, StorageNodeStatus

from tests.oracle_driver import compare_sequence


def manager(nodes=4, cap=10_000, chunk=100, **kw):
    m = MetadataManager(chunk_size=chunk, **kw)
    for i in range(nodes):
        m.node_register(StorageNodeStatus(f"n{i}", cap, cap, ""))
    return m


def nodes_of(decision):
    return [a.node for a in decision.assignments]


def test_default_round_robin_cursor_persists():
    m = manager(3)
    m.create_file("/a")
    m.create_file("/b")
    assert nodes_of(m.allocate_chunks("/a", 2)) == ["n0", "n1"]
    assert nodes_of(m.allocate_chunks("/b", 4)) == ["n2", "n0", "n1", "n2"]


def test_local_places_on_requester_and_spills_when_full():
    m = manager(3, cap=250)
    m.create_file("/a", initial_hints={"DP": "local"})
    d = m.allocate_chunks("/a", 3, {"DP": "local"}, requester="n1")
    assert nodes_of(d) == ["n1", "n1", "n0"]
    assert [a.policy for a in d.assignments] == [LOCAL, LOCAL, DEFAULT]
    assert d.policy == LOCAL and d.spilled == [2]


def test_local_without_requester_uses_default():
    m = manager(2)
    m.create_file("/a")
    d = m.allocate_chunks("/a", 2, {"DP": "local"}, requester=None)
    assert [a.policy for a in d.assignments] == [DEFAULT, DEFAULT]


def test_collocation_anchor_is_sticky():
    m = manager(3)
    m.create_file("/x")
    m.allocate_chunks("/x", 1)  # n0 now has least free space
    for f in ("/a", "/b"):
        m.create_file(f)
        d = m.allocate_chunks(f, 2, {"DP": "collocation g"})
        assert set(nodes_of(d)) == {"n1"}
        assert all(a.policy == COLLOCATION for a in d.assignments)
    assert m.groups.get("g") == "n1"


def test_scatter_groups_of_k():
    m = manager(3)
    m.create_file("/s")
    d = m.allocate_chunks("/s", 7, {"DP": "scatter 2"})
    assert nodes_of(d) == ["n0", "n0", "n1", "n1", "n2", "n2", "n0"]
    assert all(a.policy == SCATTER for a in d.assignments)
    m.create_file("/t")
    d = m.allocate_chunks("/t", 3, {"DP": "scatter 10"})
    assert set(nodes_of(d)) == {"n0"}


def test_replica_targets_follow_primary():
    m = manager(4)
    m.create_file("/r")
    d = m.allocate_chunks("/r", 2, {"Replication": "3"})
    assert [(a.node, a.replicas) for a in d.assignments] == [("n0", ("n1", "n2")), ("n1", ("n2", "n3"))]
    m.create_file("/big")
    d = m.allocate_chunks("/big", 1, {"Replication": "9"})
    assert len(d.assignments[0].nodes) == 4


def test_no_capacity_is_atomic():
    m = manager(2, cap=200)
    m.create_file("/a")
    before = m.members()
    with pytest.raises(NoCapacity):
        m.allocate_chunks("/a", 5)
    assert m.members() == before
    assert nodes_of(m.allocate_chunks("/a", 1)) == ["n0"]


def test_chunk_sizes_debit_exactly():
    m = manager(1, cap=1000)
    m.create_file("/a")
    m.allocate_chunks("/a", 2, sizes=[100, 7])
    assert m.node_status("n0").free_bytes == 893


def test_file_lifecycle_and_errors():
    m = manager(2)
    meta = m.create_file("//a/./b/")
    assert meta.file == "/a/b" and meta.state is FileState.CREATING
    with pytest.raises(FileExists):
        m.create_file("/a/b")
    with pytest.raises(UnknownFile):
        m.open_file("/missing")
    d = m.allocate_chunks("/a/b", 1)
    with pytest.raises(FileStateError):
        m.commit_file("/a/b")  # chunk never committed
    with pytest.raises(UnknownAllocation):
        m.commit_chunk("/a/b", ChunkDescriptor(5, 10, frozenset({"n0"})))
    with pytest.raises(UnknownAllocation):
        m.commit_chunk("/a/b", ChunkDescriptor(0, 10, frozenset({"n1"})))
    m.commit_chunk("/a/b", ChunkDescriptor(0, 60, frozenset({d.assignments[0].node})))
    assert m.commit_file("/a/b").state is FileState.COMMITTED
    assert m.stat("/a/b").size == 60
    with pytest.raises(FileStateError):
        m.allocate_chunks("/a/b", 1)


def test_xattrs():
    m = manager(2)
    m.create_file("/a", initial_hints={"DP": "local"})
    m.set_xattr("/a", ("Replication", "2"))
    m.set_xattr("/a", ("user.any", "thing"))
    assert m.get_xattr("/a", "Replication") == "2"
    assert dict(m.list_xattrs("/a")) == {"DP": "local", "Replication": "2", "user.any": "thing"}
    with pytest.raises(MalformedHintValue):
        m.set_xattr("/a", ("DP", "sideways"))
    with pytest.raises(ReadOnlyAttribute):
        m.set_xattr("/a", ("location", "n0"))
    with pytest.raises(UnknownAttribute):
        m.get_xattr("/a", "nope")
    with pytest.raises(MalformedHintValue):
        m.create_file("/b", initial_hints={"Replication": "0"})


def test_location_attributes():
    m = manager(3)
    m.create_file("/a")
    d = m.allocate_chunks("/a", 2, {"Replication": "2"})
    for a in d.assignments:
        m.commit_chunk("/a", ChunkDescriptor(a.index, 100, frozenset(a.nodes)))
    assert m.get_xattr("/a", "location") == ["n0", "n1", "n2"]
    assert m.get_xattr("/a", "location.chunks") == [["n0", "n1"], ["n1", "n2"]]
    assert m.check_locations() == []


def test_heartbeat_death_and_revival():
    m = manager(2)
    # registering counts as the first interval's beat; n1 then misses three
    for _ in range(3):
        m.node_heartbeat(StorageNodeStatus("n0", 10_000, 10_000, ""))
        assert m.check_heartbeats() == []
    m.node_heartbeat(StorageNodeStatus("n0", 10_000, 10_000, ""))
    assert m.check_heartbeats() == ["n1"]
    assert m.live_nodes() == ("n0",)
    m.create_file("/a")
    assert set(nodes_of(m.allocate_chunks("/a", 3))) == {"n0"}
    m.node_heartbeat(StorageNodeStatus("n1", 10_000, 10_000, ""))
    assert m.live_nodes() == ("n0", "n1")


def test_no_live_nodes():
    m = manager(1)
    m.mark_dead("n0")
    m.create_file("/a")
    with pytest.raises(NoCapacity):
        m.allocate_chunks("/a", 1)


def test_delete_credits_capacity_and_reclaims():
    calls = []
    m = manager(2, cap=1000, reclaim=lambda n, f, idx: calls.append((n, f, idx)))
    m.create_file("/a")
    d = m.allocate_chunks("/a", 3, {"Replication": "2"})
    for a in d.assignments:
        m.commit_chunk("/a", ChunkDescriptor(a.index, 100, frozenset(a.nodes)))
    assert m.node_status("n0").free_bytes == 700
    m.delete_file("/a")
    assert [s["free_bytes"] for s in m.members()] == [1000, 1000]
    assert calls == [("n0", "/a", [0, 1, 2]), ("n1", "/a", [0, 1, 2])]
    with pytest.raises(UnknownFile):
        m.delete_file("/a")
    assert m.check_capacity_conservation() == []


def test_legacy_build_ignores_hints():
    m = manager(3, policies=[])
    m.create_file("/a")
    d = m.allocate_chunks("/a", 3, {"DP": "local", "Replication": "3"}, requester="n2")
    assert nodes_of(d) == ["n0", "n1", "n2"] and all(not a.replicas for a in d.assignments)


@pytest.mark.parametrize("seed", range(200))
def test_placement_matches_oracle(seed):
    assert compare_sequence(seed) > 0


def test_concurrent_allocation_conserves_capacity():
    m = manager(5, cap=10**9)
    errors = []

    def worker(t):
        try:
            for i in range(30):
                path = f"/t{t}/{i}"
                m.create_file(path)
                hints = [{}, {"DP": "local"}, {"DP": "collocation g"}, {"DP": "scatter 2"}, {"Replication": "3"}][i % 5]
                m.allocate_chunks(path, 4, hints, requester=f"n{t % 5}")
                if i % 7 == 0:
                    m.delete_file(path)
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert m.check_capacity_conservation() == []


def test_per_file_xattr_locks_run_concurrently():
    def run(global_lock):
        m = manager(1, global_xattr_lock=global_lock, xattr_work=0.02)
        for i in range(8):
            m.create_file(f"/f{i}")
        threads = [threading.Thread(target=m.set_xattr, args=(f"/f{i}", ("user.k", "v"))) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return m.xattr_gauge.max_active

    assert run(False) > 1
    assert run(True) == 1
