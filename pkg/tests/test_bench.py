import csv
import io
import json

from dataclasses import replace

import jsonschema
import pytest

from woss import bench
from woss.bench import BenchConfig, deterministic_view, emit_report, run
from woss.workflow import WorkflowDag

SMALL = dict(nodes=6, chunk_size=512)


@pytest.mark.parametrize("name", bench.BENCHES)
def test_reports_validate_and_are_clean(name):
    rep = run(BenchConfig(bench=name, **SMALL))
    bench.validate_report(rep)
    assert rep["violations"] == []
    json.loads(emit_report(rep, "json"))


def test_same_seed_same_report():
    a = run(BenchConfig(bench="broadcast", seed=4, **SMALL))
    b = run(BenchConfig(bench="broadcast", seed=4, **SMALL))
    assert emit_report(dict(a, timing={}), "json") == emit_report(dict(b, timing={}), "json")
    assert deterministic_view(a) == deterministic_view(b)


def test_schema_rejects_missing_fields():
    rep = run(BenchConfig(bench="pipeline", **SMALL))
    del rep["makespan"]
    with pytest.raises(jsonschema.ValidationError):
        bench.validate_report(rep)


def test_csv_rows():
    rep = run(BenchConfig(bench="overhead", **SMALL))
    rows = list(csv.DictReader(io.StringIO(emit_report(rep, "csv"))))
    assert len(rows) == len(rep["stages"]) + len(rep["ladder"])
    assert [r["name"] for r in rows if r["kind"] == "ladder"] == [name for name, _ in bench.LADDER]


@pytest.mark.parametrize("name", ["pipeline", "broadcast", "reduce", "scatter"])
def test_outputs_identical_across_modes(name):
    digests = {run(BenchConfig(bench=name, mode=m, **SMALL))["outputs_digest"] for m in bench.MODES}
    assert len(digests) == 1


def test_remote_mode_reads_nothing_locally():
    rep = run(BenchConfig(bench="pipeline", mode="remote", **SMALL))
    assert rep["intermediate_local_fraction"] == 0.0
    assert set(rep["served"]) == {"nfs"}


def test_dss_pipeline_mostly_remote():
    rep = run(BenchConfig(bench="pipeline", mode="dss", **SMALL))
    assert 0 < rep["intermediate_local_fraction"] < 1


def test_broadcast_saturated_replication_is_all_local():
    rep = run(BenchConfig(bench="broadcast", nodes=6, replication=5, chunk_size=512))
    assert rep["metrics"]["reader_local_fraction"] == 1.0


def test_scatter_larger_than_file_puts_everything_on_one_node():
    rep = run(BenchConfig(bench="scatter", scatter_k=2, nodes=4, chunk_size=512))
    assert rep["metrics"]["min_reader_locality"] == 1.0
    # k covering the whole file: one node holds every chunk
    dag = bench.scatter_dag(3, 2, 512)
    big = WorkflowDag.build(dag.name, dag.tasks.values(), dag.staged,
                            [a if a.pattern != "scatter" else replace(a, k=100) for a in dag.annotations])
    r = bench.execute(BenchConfig(bench="scatter", nodes=4, chunk_size=512), big)
    assert r.cluster.manager.get_xattr("/sc/file", "location") == ["n00"]


def test_reduce_overflow_flags_degraded():
    cfg = BenchConfig(bench="reduce", nodes=5, chunks=4, chunk_size=512, capacity=512 * 10)
    rep = run(cfg)
    assert rep["metrics"]["collocation"] == "Degraded" and rep["metrics"]["spilled_chunks"] > 0
    assert rep["violations"] == []


def test_ladder_tagging_counts():
    rep = run(BenchConfig(bench="overhead", **SMALL))
    rows = {r["rung"]: r for r in rep["ladder"]}
    assert rows["dss"]["set_xattr"] == 0
    for name in ("dss+tagging", "dss+tagging+get-location", "dss+tagging+get-location+las"):
        assert rows[name]["set_xattr"] == rows[name]["produced_files"]
    assert rows["dss+fork"]["makespan"] == rows["dss"]["makespan"] and rows["dss+fork"]["note"] == "no-op"


def test_realtime_run():
    rep = run(BenchConfig(bench="pipeline", realtime=True, remote_delay=0.0, **SMALL))
    assert rep["violations"] == [] and rep["intermediate_local_fraction"] == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(bench="sorting")
    with pytest.raises(ValueError):
        BenchConfig(mode="nfs")
    with pytest.raises(ValueError):
        BenchConfig(nodes=1)
