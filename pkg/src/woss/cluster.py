"""In-process cluster: one manager plus storage nodes wired by direct calls."""

from __future__ import annotations

import random
from typing import Iterable

from woss.client import DEFAULT_CACHE_SIZE, Client
from woss.errors import NodeUnavailable
from woss.manager import MetadataManager
from woss.model import DEFAULT_CHUNK_SIZE, NodeId
from woss.storage import MemStore, ReplicationMode, StorageNode, open_store


def node_names(count: int, prefix: str = "n") -> list[NodeId]:
    width = max(2, len(str(count - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(count)]


class LocalCluster:
    def __init__(
        self,
        nodes: int | Iterable[NodeId] = 4,
        capacity: int = 1 << 30,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        store: str = "mem",
        sync_replication: bool = True,
        replication_mode: ReplicationMode | str = ReplicationMode.EAGER_PARALLEL,
        retry_backoff: float = 0.0,
        manager: MetadataManager | None = None,
        **manager_kwargs,
    ):
        ids = node_names(nodes) if isinstance(nodes, int) else list(nodes)
        self.manager = manager or MetadataManager(chunk_size=chunk_size, **manager_kwargs)
        self.manager.reclaim = self._reclaim
        self.nodes: dict[NodeId, StorageNode] = {}
        for n in ids:
            backing = MemStore() if store == "mem" else open_store(f"{store}/{n}" if store.startswith("dir:") else store)
            node = StorageNode(
                n,
                capacity,
                backing,
                manager=self.manager,
                resolve=self.node,
                replication_mode=replication_mode,
                sync_replication=sync_replication,
                retry_backoff=retry_backoff,
                address=f"local:{n}",
            )
            node.register()
            self.nodes[n] = node

    def node(self, node_id: NodeId) -> StorageNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NodeUnavailable(f"no storage node {node_id!r}") from None

    @property
    def node_ids(self) -> list[NodeId]:
        return sorted(self.nodes)

    def _reclaim(self, node_id: NodeId, file: str, indices: list[int]) -> None:
        self.node(node_id).reclaim(file, indices)

    def client(
        self,
        colocated: NodeId | None = None,
        seed: int | None = 0,
        rng: random.Random | None = None,
        cache_size: int = DEFAULT_CACHE_SIZE,
        **kwargs,
    ) -> Client:
        return Client(self.manager, self.node, colocated, rng=rng, seed=seed, cache_size=cache_size, **kwargs)

    def kill(self, node_id: NodeId, tell_manager: bool = False) -> None:
        self.nodes[node_id].kill()
        if tell_manager:
            self.manager.mark_dead(node_id)

    def drain(self) -> None:
        for n in self.nodes.values():
            n.drain()

    def heartbeat_round(self) -> list[NodeId]:
        """Every live node beats once, then the manager closes the interval."""
        for n in self.nodes.values():
            n.heartbeat()
        return self.manager.check_heartbeats()

    def reset_counters(self) -> None:
        for n in self.nodes.values():
            n.reset_counters()

    def served(self) -> dict[NodeId, dict[str, int]]:
        return {n: {"local": s.served_local, "remote": s.served_remote} for n, s in sorted(self.nodes.items())}

    def total_served(self) -> int:
        return sum(s.served_local + s.served_remote for s in self.nodes.values())

    def replica_count(self, file: str, index: int) -> int:
        return sum(1 for n in self.nodes.values() if n.has_chunk(file, index))

    def check_invariants(self) -> list[str]:
        return self.manager.check_capacity_conservation() + self.manager.check_locations()

    def close(self) -> None:
        for n in self.nodes.values():
            n.stop()
