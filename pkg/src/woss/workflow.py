"""A small workflow runtime over the store.

Tasks communicate through files. The engine turns pattern annotations on the
DAG into storage hints on the files involved, asks the manager where inputs
live before placing each task, and runs the DAG as a discrete-event
simulation in logical ticks (or in wall-clock time with real threads).

Cost of one task, in ticks::

    local * local chunk transfers + remote * remote chunk transfers
    + meta * manager round trips (including its scheduling queries)

Transfers to or from the persistent backend are always remote.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import math
import random
import threading
import time
from collections import Counter
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Iterable, Mapping

import jsonschema

from woss import hints as H
from woss.errors import ConflictingAnnotations, DagError, NoIdleNode, TaskFailed, WossError
from woss.hints import EMPTY, HintSet
from woss.model import NodeId, normalize_path

log = logging.getLogger(__name__)

PIPELINE = "pipeline"
BROADCAST = "broadcast"
REDUCE = "reduce"
SCATTER = "scatter"
PATTERNS = (PIPELINE, BROADCAST, REDUCE, SCATTER)

COPY_KERNELS = {"stage_in", "stage_out", "copy"}
DERIVE_KERNELS = {"produce", "transform", "consume", "reduce"}

LOCATION_HIT = "LocationHit"
FALLBACK = "Fallback"


# -- DAG model -------------------------------------------------------------------


@dataclass(frozen=True)
class InputRef:
    path: str
    offset: int = 0
    length: int | None = None
    backend: bool = False

    def to_dict(self) -> dict:
        d = {"path": self.path}
        if self.offset:
            d["offset"] = self.offset
        if self.length is not None:
            d["length"] = self.length
        if self.backend:
            d["backend"] = True
        return d


@dataclass(frozen=True)
class OutputSpec:
    path: str
    size: int = 0
    hints: HintSet = EMPTY
    backend: bool = False

    def to_dict(self) -> dict:
        d = {"path": self.path, "size": self.size}
        if self.hints:
            d["hints"] = dict(self.hints)
        if self.backend:
            d["backend"] = True
        return d


@dataclass(frozen=True)
class TaskSpec:
    id: str
    kernel: str
    inputs: tuple[InputRef, ...] = ()
    outputs: tuple[OutputSpec, ...] = ()
    stage: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kernel": self.kernel,
            "stage": self.stage,
            "inputs": [i.to_dict() for i in self.inputs],
            "outputs": [o.to_dict() for o in self.outputs],
        }


@dataclass(frozen=True)
class Annotation:
    pattern: str
    files: tuple[str, ...]
    replication: int | None = None
    group: str | None = None
    k: int | None = None

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise DagError(f"unknown pattern {self.pattern!r}")
        need = {BROADCAST: "replication", REDUCE: "group", SCATTER: "k"}.get(self.pattern)
        if need and getattr(self, need) is None:
            raise DagError(f"{self.pattern} annotation needs {need!r}")

    def hints(self) -> dict[str, str]:
        if self.pattern == PIPELINE:
            return {H.DP: "local"}
        if self.pattern == BROADCAST:
            return {H.REPLICATION: str(self.replication)}
        if self.pattern == REDUCE:
            return {H.DP: f"collocation {self.group}"}
        return {H.DP: f"scatter {self.k}"}

    def to_dict(self) -> dict:
        d = {"pattern": self.pattern, "files": list(self.files)}
        for k in ("replication", "group", "k"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d


@dataclass
class WorkflowDag:
    name: str
    tasks: dict[str, TaskSpec]
    staged: dict[str, int] = field(default_factory=dict)  # backend path -> size
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    @classmethod
    def build(cls, name, tasks: Iterable[TaskSpec], staged=None, annotations=()) -> "WorkflowDag":
        return cls(name, {t.id: t for t in tasks}, dict(staged or {}), list(annotations))

    def producers(self) -> dict[tuple[bool, str], str]:
        out = {}
        for t in self.tasks.values():
            for o in t.outputs:
                key = (o.backend, o.path)
                if key in out:
                    raise DagError(f"{o.path} written by both {out[key]} and {t.id}")
                out[key] = t.id
        return out

    def dependencies(self) -> dict[str, set[str]]:
        prod = self.producers()
        deps = {}
        for t in self.tasks.values():
            d = set()
            for i in t.inputs:
                p = prod.get((i.backend, i.path))
                if p is not None:
                    d.add(p)
                elif not (i.backend and i.path in self.staged):
                    raise DagError(f"task {t.id} reads {i.path}, which nothing produces or stages in")
            deps[t.id] = d
        return deps

    def validate(self) -> None:
        deps = self.dependencies()
        order = topological_order(deps)
        if len(order) != len(self.tasks):
            raise DagError("the DAG has a cycle")
        produced = {p for (backend, p) in self.producers() if not backend}
        for a in self.annotations:
            for f in a.files:
                if f not in produced:
                    raise DagError(f"{a.pattern} annotation names {f}, not an intermediate output")

    def edges(self) -> list[tuple[str, str, str]]:
        prod = self.producers()
        out = []
        for t in sorted(self.tasks.values(), key=lambda t: t.id):
            for i in t.inputs:
                p = prod.get((i.backend, i.path))
                if p is not None:
                    out.append((p, t.id, i.path))
        return out

    def reserved_hint_count(self) -> int:
        return sum(len(o.hints.reserved_keys()) for t in self.tasks.values() for o in t.outputs)

    # -- JSON ---------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": "woss-dag/1",
            "name": self.name,
            "staged": [{"path": p, "size": s} for p, s in sorted(self.staged.items())],
            "tasks": [t.to_dict() for t in sorted(self.tasks.values(), key=lambda t: t.id)],
            "edges": [list(e) for e in self.edges()],
            "patterns": [a.to_dict() for a in self.annotations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkflowDag":
        tasks = []
        for t in d["tasks"]:
            tasks.append(
                TaskSpec(
                    t["id"],
                    t["kernel"],
                    tuple(
                        InputRef(i["path"], i.get("offset", 0), i.get("length"), i.get("backend", False))
                        for i in t.get("inputs", ())
                    ),
                    tuple(
                        OutputSpec(o["path"], o.get("size", 0), HintSet(o.get("hints", {})), o.get("backend", False))
                        for o in t.get("outputs", ())
                    ),
                    t.get("stage", ""),
                )
            )
        anns = [
            Annotation(a["pattern"], tuple(a["files"]), a.get("replication"), a.get("group"), a.get("k"))
            for a in d.get("patterns", ())
        ]
        dag = cls.build(d.get("name", "dag"), tasks, {s["path"]: s["size"] for s in d.get("staged", ())}, anns)
        if "edges" in d and sorted(map(tuple, d["edges"])) != sorted(dag.edges()):
            raise DagError("listed edges disagree with task inputs/outputs")
        return dag

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "WorkflowDag":
        d = json.loads(text)
        jsonschema.validate(d, dag_schema())
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "WorkflowDag":
        with open(path) as fh:
            return cls.loads(fh.read())


def dag_schema() -> dict:
    return json.loads(resources.files("woss").joinpath("schemas/dag.schema.json").read_text())


def fixture(name: str) -> WorkflowDag:
    """One of the shipped benchmark DAGs: pipeline, broadcast, reduce or scatter."""
    return WorkflowDag.loads(resources.files("woss").joinpath(f"fixtures/{name}.json").read_text())


def topological_order(deps: Mapping[str, set[str]]) -> list[str]:
    indeg = {t: len(d) for t, d in deps.items()}
    users: dict[str, list[str]] = {t: [] for t in deps}
    for t, d in deps.items():
        for p in d:
            users[p].append(t)
    ready = sorted(t for t, n in indeg.items() if n == 0)
    heapq.heapify(ready)
    out = []
    while ready:
        t = heapq.heappop(ready)
        out.append(t)
        for u in users[t]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    return out


# -- hint injection -------------------------------------------------------------------


def apply_pattern_hints(dag: WorkflowDag) -> WorkflowDag:
    """Return a copy of ``dag`` whose outputs carry the hints its annotations imply."""
    wanted: dict[str, dict[str, str]] = {}
    source: dict[tuple[str, str], str] = {}
    for a in dag.annotations:
        for f in a.files:
            f = normalize_path(f)
            for k, v in a.hints().items():
                have = wanted.setdefault(f, {}).get(k)
                if have is not None and have != v:
                    raise ConflictingAnnotations(
                        f"{f}: {source[(f, k)]} wants {k}={have}, {a.pattern} wants {k}={v}"
                    )
                wanted[f][k] = v
                source[(f, k)] = a.pattern
    tasks = []
    for t in dag.tasks.values():
        outs = tuple(
            replace(o, hints=o.hints.merged(wanted.get(normalize_path(o.path), {}))) if not o.backend else o
            for o in t.outputs
        )
        tasks.append(replace(t, outputs=outs))
    return WorkflowDag.build(dag.name, tasks, dag.staged, dag.annotations)


def strip_hints(dag: WorkflowDag) -> WorkflowDag:
    """Drop annotations and every reserved hint (the traditional-storage baseline)."""
    tasks = [
        replace(t, outputs=tuple(replace(o, hints=o.hints.without_reserved()) for o in t.outputs))
        for t in dag.tasks.values()
    ]
    return WorkflowDag.build(dag.name, tasks, dag.staged, [])


# -- data kernels ------------------------------------------------------------------------


def synthetic_bytes(label: str, size: int) -> bytes:
    seed = int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")
    return random.Random(seed).randbytes(size)


def derive_output(task_id: str, path: str, inputs: list[bytes], size: int) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(task_id.encode())
    h.update(path.encode())
    for data in inputs:
        h.update(hashlib.blake2b(data, digest_size=16).digest())
    return synthetic_bytes(h.hexdigest(), size)


class BackendStore:
    """The persistent store that stage-in reads from and stage-out writes to.

    Every chunk moved to or from it is a remote transfer.
    """

    def __init__(self, chunk_size: int):
        self.chunk_size = chunk_size
        self.objects: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def populate(self, staged: Mapping[str, int]) -> None:
        for path, size in staged.items():
            self.objects[path] = synthetic_bytes(path, size)

    def chunks(self, nbytes: int) -> int:
        return math.ceil(nbytes / self.chunk_size) if nbytes else 0

    def read(self, ref: InputRef) -> bytes:
        with self._lock:
            data = self.objects[ref.path]
        end = len(data) if ref.length is None else ref.offset + ref.length
        return data[ref.offset:end]

    def write(self, path: str, data: bytes) -> None:
        with self._lock:
            self.objects[path] = data


# -- scheduling ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleDecision:
    task: str
    node: NodeId
    reason: str
    candidates: tuple[tuple[NodeId, float], ...] = ()


class Scheduler:
    """Places a ready task on a node.

    ``location_aware``: score every node by how many of the task's inputs it
    holds a replica of, and take the best-scoring idle node (ties by NodeId).
    Otherwise, or when no idle node holds any input, fall back to the idle
    node that has run the fewest tasks.

    ``query_locations`` issues the ``location`` lookups even when they are not
    used (an overhead-measurement rung). ``score="bytes"`` weights by input
    bytes held instead of file count.
    """

    def __init__(self, location_aware: bool = True, query_locations: bool | None = None, score: str = "files"):
        if score not in ("files", "bytes"):
            raise ValueError("score must be 'files' or 'bytes'")
        self.location_aware = location_aware
        self.query_locations = location_aware if query_locations is None else query_locations
        self.score = score

    def input_holders(self, task: TaskSpec, client) -> list[dict[NodeId, float]]:
        """Per intermediate input: node -> weight of that input held there."""
        out = []
        for ref in task.inputs:
            if ref.backend:
                continue
            if ref.length is None and self.score == "files":
                out.append({n: 1.0 for n in client.location(ref.path)})
                continue
            meta = client.stat(ref.path)
            chunk = meta.chunk_size
            lo = ref.offset // chunk
            hi = len(meta.chunks) if ref.length is None else math.ceil((ref.offset + ref.length) / chunk)
            held: dict[NodeId, float] = {}
            for c in meta.chunks[lo:hi]:
                for n in c.replicas:
                    if self.score == "bytes":
                        held[n] = held.get(n, 0.0) + c.size
                    else:
                        held[n] = 1.0
            out.append(held)
        return out

    def schedule(self, task: TaskSpec, idle: list[NodeId], load: Mapping[NodeId, int], client=None) -> ScheduleDecision:
        if not idle:
            raise NoIdleNode(task.id)
        scores: dict[NodeId, float] = {}
        if self.query_locations and client is not None:
            for held in self.input_holders(task, client):
                for n, w in held.items():
                    scores[n] = scores.get(n, 0.0) + w
        cands = tuple(sorted(scores.items()))
        if self.location_aware and scores:
            best = max(scores.values())
            top = sorted(n for n, s in scores.items() if s == best and n in idle)
            if best > 0 and top:
                return ScheduleDecision(task.id, top[0], LOCATION_HIT, cands)
        node = min(idle, key=lambda n: (load.get(n, 0), n))
        return ScheduleDecision(task.id, node, FALLBACK, cands)


# -- execution -------------------------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    local: float = 1.0
    remote: float = 10.0
    meta: float = 1.0

    def of(self, stats, backend_chunks: int = 0) -> float:
        return (
            self.local * (stats.local_reads + stats.local_writes)
            + self.remote * (stats.remote_reads + stats.remote_writes + backend_chunks)
            + self.meta * stats.manager_calls
        )


@dataclass
class TaskRecord:
    task: str
    stage: str
    node: NodeId | None
    reason: str
    start: float
    end: float
    schedule_cost: float = 0.0
    io_cost: float = 0.0
    local_reads: int = 0
    remote_reads: int = 0
    local_writes: int = 0
    remote_writes: int = 0
    backend_chunks: int = 0
    set_xattr: int = 0
    get_xattr: int = 0
    manager_calls: int = 0
    status: str = "ok"  # ok | failed | aborted
    error: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ExecutionTrace:
    records: dict[str, TaskRecord] = field(default_factory=dict)
    decisions: list[ScheduleDecision] = field(default_factory=list)
    served: dict[NodeId, dict[str, int]] = field(default_factory=dict)

    @property
    def makespan(self) -> float:
        ends = [r.end for r in self.records.values() if r.status == "ok"]
        return max(ends) if ends else 0.0

    def ordered(self) -> list[TaskRecord]:
        return sorted(self.records.values(), key=lambda r: (r.start, r.task))

    def failed(self) -> list[str]:
        return sorted(t for t, r in self.records.items() if r.status == "failed")

    def aborted(self) -> list[str]:
        return sorted(t for t, r in self.records.items() if r.status == "aborted")

    def stage_span(self, stage: str) -> tuple[float, float]:
        rs = [r for r in self.records.values() if r.stage == stage and r.status == "ok"]
        if not rs:
            return (0.0, 0.0)
        return (min(r.start for r in rs), max(r.end for r in rs))

    def stages(self) -> list[str]:
        seen: dict[str, float] = {}
        for r in self.records.values():
            seen[r.stage] = min(seen.get(r.stage, math.inf), r.start)
        return sorted(seen, key=lambda s: (seen[s], s))

    def location_hit_rate(self, stages: Iterable[str] | None = None) -> float:
        wanted = set(stages) if stages is not None else None
        rs = [r for r in self.records.values() if r.status == "ok" and (wanted is None or r.stage in wanted)]
        return sum(r.reason == LOCATION_HIT for r in rs) / len(rs) if rs else 0.0


class TaskContext:
    """What a task body sees: inputs in, outputs out, all through one client."""

    def __init__(self, engine: "Engine", task: TaskSpec, client, backend: BackendStore):
        self.engine = engine
        self.task = task
        self.client = client
        self.backend = backend
        self.backend_chunks = 0

    def read(self, ref: InputRef) -> bytes:
        if ref.backend:
            data = self.backend.read(ref)
            self.backend_chunks += self.backend.chunks(len(data))
            return data
        h = self.client.open(ref.path, "r")
        try:
            return self.client.read(h, ref.offset, ref.length)
        finally:
            self.client.close(h)

    def write(self, out: OutputSpec, data: bytes) -> None:
        if out.backend:
            self.backend.write(out.path, data)
            self.backend_chunks += self.backend.chunks(len(data))
            return
        tags = dict(out.hints)
        if self.engine.useless_tags:
            tags[f"user.tag.{self.task.id}"] = self.engine.tag_value(out.path)
        if tags:
            # tag between create and first write: placement tags only act at creation
            self.client.create(out.path)
            for k, v in sorted(tags.items()):
                self.client.set_xattr(out.path, k, v)
            h = self.client.open(out.path, "w", create=False)
        else:
            h = self.client.open(out.path, "w")
        self.client.write(h, data)
        self.client.close(h)


def run_kernel(ctx: TaskContext) -> None:
    t = ctx.task
    inputs = [ctx.read(ref) for ref in t.inputs]
    if t.kernel in COPY_KERNELS:
        payload = b"".join(inputs)
        for o in t.outputs:
            ctx.write(o, payload)
    elif t.kernel in DERIVE_KERNELS:
        for o in t.outputs:
            ctx.write(o, derive_output(t.id, o.path, inputs, o.size))
    else:
        raise TaskFailed(f"task {t.id}: unknown kernel {t.kernel!r}")


class Engine:
    """Runs a DAG over a cluster.

    ``cluster`` needs ``manager``, ``client(colocated=..., rng=...)`` and
    ``reset_counters()/served()``; ``nodes`` are the compute nodes tasks may
    run on (they need not host storage).
    """

    def __init__(
        self,
        cluster,
        nodes: list[NodeId],
        backend: BackendStore,
        scheduler: Scheduler | None = None,
        cost: CostModel = CostModel(),
        slots: int = 1,
        useless_tags: bool = False,
        kernel: Callable[[TaskContext], None] = run_kernel,
    ):
        self.cluster = cluster
        self.nodes = sorted(nodes)
        self.backend = backend
        self.scheduler = scheduler or Scheduler()
        self.cost = cost
        self.slots = slots
        self.useless_tags = useless_tags
        self.kernel = kernel
        self._tag_rng = random.Random(0)

    def tag_value(self, path: str) -> str:
        return f"{self._tag_rng.getrandbits(32):08x}"

    def _execute(self, task: TaskSpec, node: NodeId, rng: random.Random, remote_delay: float = 0.0):
        client = self.cluster.client(colocated=node, rng=rng, remote_delay=remote_delay)
        ctx = TaskContext(self, task, client, self.backend)
        self.kernel(ctx)
        return client.stats, ctx.backend_chunks

    def _decide(self, task, idle, load, rng):
        qclient = self.cluster.client(colocated=None, rng=rng)
        d = self.scheduler.schedule(task, idle, load, qclient)
        return d, self.cost.meta * qclient.stats.manager_calls

    def run(self, dag: WorkflowDag, seed: int = 0, realtime: bool = False, remote_delay: float = 0.0) -> ExecutionTrace:
        self._tag_rng = random.Random(seed ^ 0x5EED)
        self.backend.populate(dag.staged)
        self.cluster.reset_counters()
        if realtime:
            trace = self._run_realtime(dag, seed, remote_delay)
        else:
            trace = self._run_logical(dag, seed)
        trace.served = self.cluster.served()
        return trace

    @staticmethod
    def _dependents(dag: WorkflowDag) -> tuple[dict, dict]:
        deps = dag.dependencies()
        users: dict[str, list[str]] = {t: [] for t in deps}
        for t, d in deps.items():
            for p in d:
                users[p].append(t)
        return deps, users

    def _abort_below(self, tid, users, trace, waiting):
        stack = list(users[tid])
        while stack:
            u = stack.pop()
            if u in trace.records:
                continue
            task = waiting.pop(u, None)
            trace.records[u] = TaskRecord(u, task.stage if task else "", None, "", 0.0, 0.0, status="aborted",
                                          error=f"depends on failed task {tid}")
            stack.extend(users[u])

    def _record(self, task, decision, start, sched_cost, stats, backend_chunks, error=None) -> TaskRecord:
        io = self.cost.of(stats, backend_chunks) if stats is not None else 0.0
        r = TaskRecord(task.id, task.stage, decision.node, decision.reason, start, start + sched_cost + io,
                       sched_cost, io)
        if stats is not None:
            r.local_reads, r.remote_reads = stats.local_reads, stats.remote_reads
            r.local_writes, r.remote_writes = stats.local_writes, stats.remote_writes
            r.set_xattr, r.get_xattr, r.manager_calls = stats.set_xattr, stats.get_xattr, stats.manager_calls
        r.backend_chunks = backend_chunks
        if error is not None:
            r.status, r.error = "failed", error
        return r

    def _run_logical(self, dag: WorkflowDag, seed: int) -> ExecutionTrace:
        deps, users = self._dependents(dag)
        rng = random.Random(seed)
        trace = ExecutionTrace()
        remaining = {t: len(d) for t, d in deps.items()}
        waiting = dict(dag.tasks)
        ready = sorted(t for t, n in remaining.items() if n == 0)
        busy: Counter = Counter()
        load: Counter = Counter()
        running: list[tuple[float, str, NodeId]] = []
        now = 0.0
        while ready or running:
            still = []
            for tid in ready:
                idle = [n for n in self.nodes if busy[n] < self.slots]
                if not idle:
                    still.append(tid)  # re-queued until a slot frees
                    continue
                task = waiting.pop(tid)
                decision, sched_cost = self._decide(task, idle, load, rng)
                trace.decisions.append(decision)
                try:
                    stats, bchunks = self._execute(task, decision.node, rng)
                    rec = self._record(task, decision, now, sched_cost, stats, bchunks)
                except WossError as exc:
                    rec = self._record(task, decision, now, sched_cost, None, 0, f"{type(exc).__name__}: {exc}")
                    log.warning("task %s failed: %s", tid, rec.error)
                trace.records[tid] = rec
                busy[decision.node] += 1
                load[decision.node] += 1
                heapq.heappush(running, (rec.end, tid, decision.node))
            ready = still
            if not running:
                break
            now, _, _ = running[0]
            finished = []
            while running and running[0][0] == now:
                _, tid, node = heapq.heappop(running)
                busy[node] -= 1
                finished.append(tid)
            for tid in sorted(finished):
                if trace.records[tid].status == "failed":
                    self._abort_below(tid, users, trace, waiting)
                    continue
                for u in users[tid]:
                    remaining[u] -= 1
                    if remaining[u] == 0 and u in waiting:
                        ready.append(u)
            ready.sort()
        if waiting:
            raise DagError(f"tasks never became ready: {sorted(waiting)}")
        return trace

    def _run_realtime(self, dag: WorkflowDag, seed: int, remote_delay: float) -> ExecutionTrace:
        deps, users = self._dependents(dag)
        rng = random.Random(seed)
        trace = ExecutionTrace()
        remaining = {t: len(d) for t, d in deps.items()}
        waiting = dict(dag.tasks)
        ready = sorted(t for t, n in remaining.items() if n == 0)
        busy: Counter = Counter()
        load: Counter = Counter()
        t0 = time.monotonic()
        futures = {}

        def body(task, node):
            return self._execute(task, node, rng, remote_delay)

        with ThreadPoolExecutor(max_workers=len(self.nodes) * self.slots) as pool:
            while ready or futures:
                still = []
                for tid in ready:
                    idle = [n for n in self.nodes if busy[n] < self.slots]
                    if not idle:
                        still.append(tid)
                        continue
                    task = waiting.pop(tid)
                    decision, _ = self._decide(task, idle, load, rng)
                    trace.decisions.append(decision)
                    busy[decision.node] += 1
                    load[decision.node] += 1
                    start = (time.monotonic() - t0) * 1000.0
                    futures[pool.submit(body, task, decision.node)] = (task, decision, start)
                ready = still
                if not futures:
                    break
                done, _ = wait(futures, return_when=FIRST_COMPLETED)
                for fut in sorted(done, key=lambda f: futures[f][0].id):
                    task, decision, start = futures.pop(fut)
                    busy[decision.node] -= 1
                    end = (time.monotonic() - t0) * 1000.0
                    try:
                        stats, bchunks = fut.result()
                        rec = self._record(task, decision, start, 0.0, stats, bchunks)
                    except WossError as exc:
                        rec = self._record(task, decision, start, 0.0, None, 0, f"{type(exc).__name__}: {exc}")
                    rec.end = end
                    trace.records[task.id] = rec
                    if rec.status == "failed":
                        self._abort_below(task.id, users, trace, waiting)
                        continue
                    for u in users[task.id]:
                        remaining[u] -= 1
                        if remaining[u] == 0 and u in waiting:
                            ready.append(u)
                ready.sort()
        return trace
