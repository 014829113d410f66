"""Benchmark harness: synthetic pattern benchmarks and the overhead ladder.

Every benchmark builds an annotated DAG, then runs it in one of three modes:

``woss``
    pattern hints on, location-aware scheduling.
``dss``
    reserved hints stripped, fallback scheduling only.
``remote``
    as ``dss`` but the only storage node is ``nfs``; workers hold no data.

Costs are logical ticks (see :mod:`woss.workflow`). Reports are plain dicts
validated against ``schemas/report.schema.json``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from importlib import resources

import jsonschema

from woss.cluster import LocalCluster, node_names
from woss.manager import COLLOCATION, MetadataManager
from woss.workflow import (
    BROADCAST,
    LOCATION_HIT,
    PIPELINE,
    REDUCE,
    SCATTER,
    Annotation,
    BackendStore,
    CostModel,
    Engine,
    ExecutionTrace,
    InputRef,
    OutputSpec,
    Scheduler,
    TaskSpec,
    WorkflowDag,
    apply_pattern_hints,
    strip_hints,
)

SCHEMA_VERSION = 1
BENCHES = ("pipeline", "broadcast", "reduce", "scatter", "overhead")
MODES = ("remote", "dss", "woss")
NFS = "nfs"


@dataclass(frozen=True)
class BenchConfig:
    bench: str = "pipeline"
    mode: str = "woss"
    nodes: int = 20  # manager + workers
    seed: int = 0
    remote_cost: float = 10.0
    meta_cost: float = 1.0
    replication: int = 8
    scatter_k: int = 2
    chunks: int = 4  # chunks per intermediate file
    broadcast_chunks: int = 1
    chunk_size: int = 64 * 1024
    capacity: int = 1 << 30
    realtime: bool = False
    remote_delay: float = 0.002  # seconds per remote chunk, realtime only
    score: str = "files"
    legacy_manager: bool = False  # manager with no optimization policies registered

    def __post_init__(self):
        if self.bench not in BENCHES:
            raise ValueError(f"bench must be one of {BENCHES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.nodes < 2:
            raise ValueError("need a manager and at least one worker")
        if self.replication < 1 or self.scatter_k < 1 or self.chunks < 1 or self.broadcast_chunks < 1:
            raise ValueError("replication, scatter_k and chunk counts must be >= 1")

    @property
    def workers(self) -> int:
        return self.nodes - 1

    @property
    def cost(self) -> CostModel:
        return CostModel(local=1.0, remote=self.remote_cost, meta=self.meta_cost)


# -- DAGs ---------------------------------------------------------------------------------


def _stage_in(tid, src, dst, stage="stage-in"):
    return TaskSpec(tid, "stage_in", (InputRef(src, backend=True),), (OutputSpec(dst),), stage)


def _stage_out(tid, src, dst, stage="stage-out"):
    return TaskSpec(tid, "stage_out", (InputRef(src),), (OutputSpec(dst, backend=True),), stage)


def pipeline_dag(pipes: int, chunks: int, chunk_size: int) -> WorkflowDag:
    size = chunks * chunk_size
    tasks, local = [], []
    for p in range(pipes):
        d = f"/pipe{p:02d}"
        tasks.append(_stage_in(f"p{p:02d}-0in", "/nfs/common", f"{d}/in"))
        prev = f"{d}/in"
        local.append(prev)
        for s in (1, 2, 3):
            out = f"{d}/s{s}"
            tasks.append(TaskSpec(f"p{p:02d}-{s}", "transform", (InputRef(prev),), (OutputSpec(out, size),), f"stage{s}"))
            local.append(out)
            prev = out
        tasks.append(_stage_out(f"p{p:02d}-4out", prev, f"/nfs/out/pipe{p:02d}"))
    return WorkflowDag.build("pipeline", tasks, {"/nfs/common": size}, [Annotation(PIPELINE, tuple(local))])


def broadcast_dag(readers: int, chunks: int, chunk_size: int, replication: int) -> WorkflowDag:
    size = chunks * chunk_size
    tasks = [
        _stage_in("b-0in", "/nfs/db", "/bcast/in"),
        TaskSpec("b-1produce", "transform", (InputRef("/bcast/in"),), (OutputSpec("/bcast/shared", size),), "produce"),
    ]
    outs = []
    for r in range(readers):
        out = f"/bcast/out{r:02d}"
        outs.append(out)
        tasks.append(TaskSpec(f"b-2read{r:02d}", "transform", (InputRef("/bcast/shared"),), (OutputSpec(out, chunk_size),), "consume"))
        tasks.append(_stage_out(f"b-3out{r:02d}", out, f"/nfs/out/b{r:02d}"))
    anns = [
        Annotation(PIPELINE, ("/bcast/in", *outs)),
        Annotation(BROADCAST, ("/bcast/shared",), replication=replication),
    ]
    return WorkflowDag.build("broadcast", tasks, {"/nfs/db": size}, anns)


def reduce_dag(producers: int, chunks: int, chunk_size: int, group: str = "reduce") -> WorkflowDag:
    size = chunks * chunk_size
    tasks, ins, mids = [], [], []
    for i in range(producers):
        ins.append(f"/red/in{i:02d}")
        mids.append(f"/red/mid{i:02d}")
        tasks.append(_stage_in(f"r-0in{i:02d}", f"/nfs/in{i:02d}", ins[-1]))
        tasks.append(TaskSpec(f"r-1map{i:02d}", "transform", (InputRef(ins[-1]),), (OutputSpec(mids[-1], size),), "map"))
    tasks.append(TaskSpec("r-2reduce", "reduce", tuple(InputRef(m) for m in mids), (OutputSpec("/red/out", size),), "reduce"))
    tasks.append(_stage_out("r-3out", "/red/out", "/nfs/out/reduce"))
    anns = [Annotation(PIPELINE, (*ins, "/red/out")), Annotation(REDUCE, tuple(mids), group=group)]
    return WorkflowDag.build("reduce", tasks, {f"/nfs/in{i:02d}": size for i in range(producers)}, anns)


def scatter_dag(readers: int, k: int, chunk_size: int) -> WorkflowDag:
    region = k * chunk_size
    tasks = [
        _stage_in("s-0in", "/nfs/scatter", "/sc/in"),
        TaskSpec("s-1produce", "transform", (InputRef("/sc/in"),), (OutputSpec("/sc/file", readers * region),), "produce"),
    ]
    outs = []
    for r in range(readers):
        out = f"/sc/out{r:02d}"
        outs.append(out)
        ref = InputRef("/sc/file", r * region, region)
        tasks.append(TaskSpec(f"s-2read{r:02d}", "transform", (ref,), (OutputSpec(out, chunk_size),), "read"))
        tasks.append(_stage_out(f"s-3out{r:02d}", out, f"/nfs/out/s{r:02d}"))
    anns = [Annotation(PIPELINE, ("/sc/in", *outs)), Annotation(SCATTER, ("/sc/file",), k=k)]
    return WorkflowDag.build("scatter", tasks, {"/nfs/scatter": chunk_size}, anns)


def ladder_dag(workers: int, chunk_size: int) -> WorkflowDag:
    """Mosaic-shaped DAG: parallel stage-in, project, one add, stage-out.

    Files are ``workers`` chunks long, so round-robin spreads every file over
    every worker and location lookups on untagged files find no favourite.
    """
    size = workers * chunk_size
    tasks, raws, projs = [], [], []
    for i in range(workers):
        raws.append(f"/mosaic/raw{i:02d}")
        projs.append(f"/mosaic/proj{i:02d}")
        tasks.append(_stage_in(f"m-0in{i:02d}", f"/nfs/raw{i:02d}", raws[-1]))
        tasks.append(TaskSpec(f"m-1proj{i:02d}", "transform", (InputRef(raws[-1]),), (OutputSpec(projs[-1], size),), "project"))
    tasks.append(TaskSpec("m-2add", "reduce", tuple(InputRef(p) for p in projs), (OutputSpec("/mosaic/out", size),), "add"))
    tasks.append(_stage_out("m-3out", "/mosaic/out", "/nfs/out/mosaic"))
    anns = [Annotation(PIPELINE, (*raws, "/mosaic/out")), Annotation(REDUCE, tuple(projs), group="mosaic")]
    return WorkflowDag.build("overhead", tasks, {f"/nfs/raw{i:02d}": size for i in range(workers)}, anns)


def build_dag(cfg: BenchConfig) -> WorkflowDag:
    w = cfg.workers
    if cfg.bench == "pipeline":
        return pipeline_dag(w, cfg.chunks, cfg.chunk_size)
    if cfg.bench == "broadcast":
        return broadcast_dag(w, cfg.broadcast_chunks, cfg.chunk_size, cfg.replication)
    if cfg.bench == "reduce":
        return reduce_dag(w, cfg.chunks, cfg.chunk_size)
    if cfg.bench == "scatter":
        return scatter_dag(w, cfg.scatter_k, cfg.chunk_size)
    return ladder_dag(w, cfg.chunk_size)


# -- running ------------------------------------------------------------------------------


@dataclass
class Run:
    cfg: BenchConfig
    dag: WorkflowDag
    cluster: LocalCluster
    backend: BackendStore
    trace: ExecutionTrace
    wall: float


def execute(
    cfg: BenchConfig,
    dag: WorkflowDag | None = None,
    *,
    hints: bool | None = None,
    scheduler: Scheduler | None = None,
    useless_tags: bool = False,
) -> Run:
    """Run one DAG under ``cfg.mode`` (or an explicit hints/scheduler combination)."""
    dag = dag or build_dag(cfg)
    woss = cfg.mode == "woss"
    hints = woss if hints is None else hints
    dag = apply_pattern_hints(dag) if hints else strip_hints(dag)
    if scheduler is None:
        scheduler = Scheduler(location_aware=woss, score=cfg.score)
    workers = node_names(cfg.workers)
    storage = [NFS] if cfg.mode == "remote" else workers
    capacity = cfg.capacity * (len(workers) if cfg.mode == "remote" else 1)
    manager = MetadataManager(chunk_size=cfg.chunk_size, policies=[] if cfg.legacy_manager else None)
    cluster = LocalCluster(storage, capacity=capacity, chunk_size=cfg.chunk_size, sync_replication=True, manager=manager)
    backend = BackendStore(cfg.chunk_size)
    engine = Engine(cluster, workers, backend, scheduler, cfg.cost, useless_tags=useless_tags)
    t0 = time.perf_counter()
    trace = engine.run(dag, seed=cfg.seed, realtime=cfg.realtime, remote_delay=cfg.remote_delay)
    cluster.drain()
    return Run(cfg, dag, cluster, backend, trace, time.perf_counter() - t0)


def outputs_digest(backend: BackendStore) -> str:
    h = hashlib.blake2b(digest_size=16)
    for path in sorted(backend.objects):
        if path.startswith("/nfs/out/"):
            h.update(path.encode())
            h.update(hashlib.blake2b(backend.objects[path], digest_size=16).digest())
    return h.hexdigest()


def stage_rows(trace: ExecutionTrace) -> list[dict]:
    rows = []
    for stage in trace.stages():
        recs = [r for r in trace.records.values() if r.stage == stage]
        ok = [r for r in recs if r.status == "ok"]
        start, end = trace.stage_span(stage)
        rows.append(
            {
                "stage": stage,
                "tasks": len(recs),
                "start": start,
                "end": end,
                "ticks": end - start,
                "max_task_ticks": max((r.end - r.start for r in ok), default=0.0),
                "location_hit_rate": trace.location_hit_rate([stage]),
                "local_reads": sum(r.local_reads for r in ok),
                "remote_reads": sum(r.remote_reads for r in ok),
                "local_writes": sum(r.local_writes for r in ok),
                "remote_writes": sum(r.remote_writes for r in ok),
                "set_xattr": sum(r.set_xattr for r in ok),
            }
        )
    return rows


def check_run(run: Run) -> list[str]:
    """Invariant checks; an empty list means the run is consistent."""
    problems = list(run.cluster.check_invariants())
    reads = sum(r.local_reads + r.remote_reads for r in run.trace.records.values())
    served = run.cluster.total_served()
    if reads != served:
        problems.append(f"clients counted {reads} chunk reads, storage nodes served {served}")
    for t in run.trace.failed():
        problems.append(f"task {t} failed: {run.trace.records[t].error}")
    for t in run.trace.aborted():
        problems.append(f"task {t} aborted")
    for d in run.trace.decisions:
        if d.reason == LOCATION_HIT and dict(d.candidates).get(d.node, 0) <= 0:
            problems.append(f"{d.task}: LocationHit on {d.node}, which held no input")
    return problems


def _intermediate_fraction(trace: ExecutionTrace) -> float:
    local = sum(r.local_reads for r in trace.records.values())
    total = local + sum(r.remote_reads for r in trace.records.values())
    return local / total if total else 0.0


def base_report(run: Run) -> dict:
    cfg, trace = run.cfg, run.trace
    return {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(cfg),
        "makespan": trace.makespan,
        "stages": stage_rows(trace),
        "served": trace.served,
        "intermediate_local_fraction": _intermediate_fraction(trace),
        "location_hit_rate": trace.location_hit_rate(),
        "tasks": [
            {k: v for k, v in r.to_dict().items() if k != "error" or v}
            for r in trace.ordered()
        ],
        "outputs_digest": outputs_digest(run.backend),
        "metrics": {},
        "ladder": [],
        "violations": check_run(run),
        "timing": {
            "wall_seconds": run.wall,
            "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    }


def run_pipeline(cfg: BenchConfig) -> dict:
    run = execute(replace(cfg, bench="pipeline"))
    rep = base_report(run)
    rep["metrics"] = {"stage23_location_hit_rate": run.trace.location_hit_rate(["stage2", "stage3"])}
    return rep


def _chunk_loads(run: Run, path: str) -> list[dict[str, int]]:
    meta = run.cluster.manager.stat(path)
    out = []
    for c in meta.chunks:
        loads = {n: node.served_by_chunk[(path, c.index)] for n, node in sorted(run.cluster.nodes.items())}
        out.append({n: v for n, v in loads.items() if v})
    return out


def run_broadcast(cfg: BenchConfig) -> dict:
    run = execute(replace(cfg, bench="broadcast"))
    rep = base_report(run)
    shared = "/bcast/shared"
    loads = _chunk_loads(run, shared)
    meta = run.cluster.manager.stat(shared)
    per_node: dict[str, int] = {}
    for chunk in loads:
        for n, v in chunk.items():
            per_node[n] = per_node.get(n, 0) + v
    rep["metrics"] = {
        "shared_file": shared,
        "replica_counts": [run.cluster.replica_count(shared, c.index) for c in meta.chunks],
        "chunk_loads": loads,
        "served_per_node": dict(sorted(per_node.items())),
        "max_chunk_load": max((max(c.values()) for c in loads if c), default=0),
        "serving_nodes": max((len(c) for c in loads), default=0),
        "reader_local_fraction": _stage_fraction(run.trace, "consume"),
    }
    return rep


def _stage_fraction(trace: ExecutionTrace, stage: str) -> float:
    rs = [r for r in trace.records.values() if r.stage == stage]
    total = sum(r.local_reads + r.remote_reads for r in rs)
    return sum(r.local_reads for r in rs) / total if total else 0.0


def run_reduce(cfg: BenchConfig, group: str = "reduce") -> dict:
    run = execute(replace(cfg, bench="reduce"))
    rep = base_report(run)
    mgr = run.cluster.manager
    red = run.trace.records["r-2reduce"]
    spilled = [
        (d.file, i) for d in mgr.placement_log if d.policy == COLLOCATION for i in d.spilled
    ]
    rep["metrics"] = {
        "group": group,
        "anchor": mgr.groups.get(group),
        "reduce_node": red.node,
        "reduce_local_reads": red.local_reads,
        "reduce_remote_reads": red.remote_reads,
        "spilled_chunks": len(spilled),
        "collocation": "Degraded" if spilled else ("Ok" if mgr.groups.get(group) else "None"),
    }
    return rep


def run_scatter(cfg: BenchConfig) -> dict:
    run = execute(replace(cfg, bench="scatter"))
    rep = base_report(run)
    per_reader = {}
    for r in run.trace.records.values():
        if r.stage == "read":
            total = r.local_reads + r.remote_reads
            per_reader[r.task] = r.local_reads / total if total else 0.0
    start, end = run.trace.stage_span("read")
    rep["metrics"] = {
        "k": cfg.scatter_k,
        "reader_locality": dict(sorted(per_reader.items())),
        "min_reader_locality": min(per_reader.values(), default=0.0),
        "read_stage_ticks": end - start,
    }
    return rep


LADDER = (
    ("dss", dict(hints=False, location_aware=False, query=False, useless=False)),
    ("dss+fork", None),  # process-launch shortcut; nothing to model here
    ("dss+tagging", dict(hints=False, location_aware=False, query=False, useless=True)),
    ("dss+tagging+get-location", dict(hints=False, location_aware=False, query=True, useless=True)),
    ("dss+tagging+get-location+las", dict(hints=False, location_aware=True, query=True, useless=True)),
    ("woss", dict(hints=True, location_aware=True, query=True, useless=False)),
)


def run_overhead_ladder(cfg: BenchConfig) -> dict:
    cfg = replace(cfg, bench="overhead", mode="dss")
    rows, reports, prev = [], {}, None
    for name, spec in LADDER:
        if spec is None:
            rows.append(dict(prev, rung=name, note="no-op"))
            continue
        sched = Scheduler(spec["location_aware"], spec["query"], cfg.score)
        run = execute(cfg, hints=spec["hints"], scheduler=sched, useless_tags=spec["useless"])
        produced = sum(1 for t in run.dag.tasks.values() for o in t.outputs if not o.backend)
        recs = run.trace.records.values()
        prev = {
            "rung": name,
            "makespan": run.trace.makespan,
            "set_xattr": sum(r.set_xattr for r in recs),
            "get_xattr": sum(r.get_xattr for r in recs),
            "manager_calls": sum(r.manager_calls for r in recs),
            "produced_files": produced,
            "location_hit_rate": run.trace.location_hit_rate(),
            "note": "",
        }
        rows.append(prev)
        reports[name] = run
    base = rows[0]["makespan"]
    for r in rows:
        r["relative_to_dss"] = r["makespan"] / base if base else 0.0
    rep = base_report(reports["woss"])
    rep["config"] = asdict(cfg)
    rep["ladder"] = rows
    rep["violations"] = sorted({v for run in reports.values() for v in check_run(run)})
    rep["metrics"] = {"dss_makespan": base, "woss_makespan": rows[-1]["makespan"]}
    return rep


RUNNERS = {
    "pipeline": run_pipeline,
    "broadcast": run_broadcast,
    "reduce": run_reduce,
    "scatter": run_scatter,
    "overhead": run_overhead_ladder,
}


def run(cfg: BenchConfig) -> dict:
    return RUNNERS[cfg.bench](cfg)


# -- reports ------------------------------------------------------------------------------


def report_schema() -> dict:
    return json.loads(resources.files("woss").joinpath("schemas/report.schema.json").read_text())


def validate_report(report: dict) -> None:
    jsonschema.validate(report, report_schema())


def deterministic_view(report: dict) -> dict:
    """The report without its wall-clock section."""
    return {k: v for k, v in report.items() if k != "timing"}


CSV_FIELDS = [
    "kind", "name", "tasks", "start", "end", "ticks", "location_hit_rate",
    "local_reads", "remote_reads", "set_xattr", "relative_to_dss",
]


def emit_report(report: dict, fmt: str = "json") -> str:
    if fmt == "json":
        validate_report(report)
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    if fmt != "csv":
        raise ValueError("format must be json or csv")
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for s in report["stages"]:
        w.writerow(dict(s, kind="stage", name=s["stage"]))
    for r in report["ladder"]:
        w.writerow({"kind": "ladder", "name": r["rung"], "ticks": r["makespan"], "set_xattr": r["set_xattr"],
                    "location_hit_rate": r["location_hit_rate"], "relative_to_dss": r["relative_to_dss"]})
    return buf.getvalue()
