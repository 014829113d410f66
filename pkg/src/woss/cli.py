"""Command-line entry points: ``wosscli``, ``wossbench`` and ``wossd``."""

from __future__ import annotations

import logging
import signal
import sys
import threading
from pathlib import Path

import click

from woss import bench
from woss.errors import WossError
from woss.manager import MetadataManager
from woss.model import DEFAULT_CHUNK_SIZE
from woss.net import FrameServer, ManagerService, NodeDirectory, RemoteManager, parse_address

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_MANAGER = "127.0.0.1:7700"


def _client(manager: str):
    from woss.client import Client

    rm = RemoteManager(manager)
    return Client(rm, NodeDirectory(rm))


def _parse_hints(pairs: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for p in pairs:
        key, sep, value = p.partition("=")
        if not sep:
            raise click.BadParameter(f"expected key=value, got {p!r}", param_hint="--hint")
        out[key] = value
    return out


# -- wosscli ----------------------------------------------------------------------------


@click.group()
@click.option("--manager", default=DEFAULT_MANAGER, show_default=True, envvar="WOSS_MANAGER")
@click.pass_context
def wosscli(ctx, manager):
    """File operations against a running cluster."""
    ctx.obj = manager


def _fail(exc: WossError):
    raise click.ClickException(f"{type(exc).__name__}: {exc}")


@wosscli.command()
@click.argument("path")
@click.argument("local_file", type=click.File("rb"))
@click.option("--hint", "hints", multiple=True, metavar="KEY=VALUE")
@click.pass_obj
def put(manager, path, local_file, hints):
    """Store LOCAL_FILE at PATH, tagging it with hints before the first write."""
    c = _client(manager)
    try:
        tags = _parse_hints(hints)
        if tags:
            c.create(path)
            for k, v in tags.items():
                c.set_xattr(path, k, v)
            h = c.open(path, "w", create=False)
        else:
            h = c.open(path, "w")
        c.write(h, local_file.read())
        c.close(h)
    except WossError as exc:
        _fail(exc)


@wosscli.command()
@click.argument("path")
@click.argument("local_file", type=click.File("wb"), default="-")
@click.pass_obj
def get(manager, path, local_file):
    """Copy PATH to LOCAL_FILE (stdout by default)."""
    try:
        local_file.write(_client(manager).read_file(path))
    except WossError as exc:
        _fail(exc)


@wosscli.command("setattr")
@click.argument("path")
@click.argument("key")
@click.argument("value")
@click.pass_obj
def set_attr(manager, path, key, value):
    try:
        _client(manager).set_xattr(path, key, value)
    except WossError as exc:
        _fail(exc)


@wosscli.command("getattr")
@click.argument("path")
@click.argument("key")
@click.pass_obj
def get_attr(manager, path, key):
    try:
        value = _client(manager).get_xattr(path, key)
    except WossError as exc:
        _fail(exc)
    if isinstance(value, list):
        value = " ".join(",".join(v) if isinstance(v, list) else v for v in value)
    click.echo(value)


@wosscli.command()
@click.argument("path")
@click.pass_obj
def rm(manager, path):
    try:
        _client(manager).delete(path)
    except WossError as exc:
        _fail(exc)


# -- wossbench ----------------------------------------------------------------------------


@click.group()
def wossbench():
    """Synthetic benchmarks under the logical-tick cost model."""


@wossbench.command("run")
@click.option("--bench", "bench_name", type=click.Choice(bench.BENCHES), required=True)
@click.option("--mode", type=click.Choice(bench.MODES), default="woss", show_default=True)
@click.option("--nodes", type=int, default=20, show_default=True, help="Manager plus workers.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--remote-cost", type=float, default=10.0, show_default=True, help="Ticks per remote chunk.")
@click.option("--replication", type=int, default=8, show_default=True)
@click.option("--scatter-k", type=int, default=2, show_default=True)
@click.option("--chunks", type=int, default=4, show_default=True, help="Chunks per intermediate file.")
@click.option("--realtime", is_flag=True, help="Run tasks on threads with injected per-chunk delays.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True)
def bench_run(bench_name, mode, nodes, seed, remote_cost, replication, scatter_k, chunks, realtime, out, fmt):
    cfg = bench.BenchConfig(
        bench=bench_name, mode=mode, nodes=nodes, seed=seed, remote_cost=remote_cost,
        replication=replication, scatter_k=scatter_k, chunks=chunks, realtime=realtime,
    )
    report = bench.run(cfg)
    text = bench.emit_report(report, fmt)
    if out is None:
        click.echo(text, nl=False)
    else:
        out.write_text(text)
        click.echo(f"{bench_name}/{mode}: makespan {report['makespan']:g} ticks -> {out}", err=True)
    for v in report["violations"]:
        click.echo(f"invariant violated: {v}", err=True)
    sys.exit(1 if report["violations"] else 0)


# -- wossd --------------------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def wossd(verbose):
    """Run a manager or storage node over TCP."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(asctime)s %(name)s %(message)s")


def _serve_forever(server: FrameServer, stop: threading.Event):
    server.start()
    click.echo(f"listening on {server.address}", err=True)
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    server.shutdown()


@wossd.command()
@click.option("--listen", default=DEFAULT_MANAGER, show_default=True)
@click.option("--chunk-size", type=int, default=None, help=f"Bytes [default: {DEFAULT_CHUNK_SIZE}].")
@click.option("--heartbeat-interval", type=float, default=None, help="Seconds [default: 1.0].")
@click.option("--heartbeat-misses", type=int, default=None, help="Missed intervals before a node is dead [default: 3].")
@click.option("--config", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None, help="TOML file.")
def manager(listen, chunk_size, heartbeat_interval, heartbeat_misses, config):
    """Start the metadata manager."""
    conf = tomllib.loads(config.read_text()).get("manager", {}) if config else {}
    chunk_size = chunk_size or conf.get("chunk_size", DEFAULT_CHUNK_SIZE)
    interval = heartbeat_interval or conf.get("heartbeat_interval", 1.0)
    misses = heartbeat_misses or conf.get("heartbeat_misses", 3)
    mgr = MetadataManager(chunk_size=chunk_size, heartbeat_misses=misses)
    directory = NodeDirectory(mgr)
    mgr.reclaim = lambda node, file, indices: directory(node).reclaim(file, indices)
    stop = threading.Event()

    def tick():
        while not stop.wait(interval):
            dead = mgr.check_heartbeats()
            if dead:
                logging.getLogger("woss.manager").warning("nodes marked dead: %s", ", ".join(dead))

    threading.Thread(target=tick, daemon=True).start()
    _serve_forever(FrameServer(parse_address(listen), ManagerService(mgr)), stop)


@wossd.command()
@click.option("--manager", "manager_addr", default=DEFAULT_MANAGER, show_default=True)
@click.option("--node-id", required=True)
@click.option("--listen", default="127.0.0.1:0", show_default=True)
@click.option("--store", default="mem", show_default=True, help="'mem' or 'dir:<path>'.")
@click.option("--capacity", type=int, default=1 << 30, show_default=True, help="Bytes.")
@click.option("--replication", type=click.Choice(["eager", "lazy"]), default="eager", show_default=True)
@click.option("--heartbeat-interval", type=float, default=1.0, show_default=True)
def node(manager_addr, node_id, listen, store, capacity, replication, heartbeat_interval):
    """Start a storage node and register it with the manager."""
    from woss.storage import StorageNode, open_store

    rm = RemoteManager(manager_addr)
    sn = StorageNode(node_id, capacity, open_store(store), rm, NodeDirectory(rm), replication_mode=replication)
    server = FrameServer(parse_address(listen), sn)
    sn.address = server.address
    sn.register()
    sn.start_heartbeats(heartbeat_interval)
    stop = threading.Event()
    _serve_forever(server, stop)
    sn.stop()
