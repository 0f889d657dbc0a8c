"""Experiment orchestration: launch roles, merge metrics, check accounting.

Experiments are described by a plain-text ``key = value`` config with
``[server]``, ``[workers]`` and optional ``[harness]`` / ``[switch]``
sections; keys match the CLI flag names. Example:

    [server]
    deploy = central
    endpoints = 1
    cores = 4
    groups = 1
    chunk-bytes = 32768
    workers = 4
    lr = 0.05
    agg-mode = det
    iters = 50
    model-elements = 16

    [workers]
    mode = logreg
    seed = 1
    samples = 100
    dim = 16

    [harness]
    transport = channel
    single-thread = true

Roles can run three ways: deterministically pumped on one thread over the
in-process channel fabric, as threads over channels or loopback TCP, or
as subprocesses driven through the CLI. Metrics rows from every role are
merged by iteration, and the merge cross-checks the server-side byte
counters against the workers' own counts, so two independent counting
points must agree exactly.
"""

from __future__ import annotations

import configparser
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .aggregation import AggregationMode
from .errors import HarnessError, ServerFaultError, WorkerAbortError
from .metrics import IterationRow, MetricsReport, canonical_float, emit_csv, parse_csv
from .model import DEFAULT_CHUNK_BYTES
from .server import Deployment, ServerConfig, ServerDriver, ServerResult, serve
from .transport import ChannelNetwork, is_tcp_address
from .worker import (
    WorkerConfig,
    WorkerDriver,
    WorkerMode,
    WorkerResult,
    logreg_gradient,
    logreg_loss,
    run_worker,
    synthetic_dataset,
)


# ---------------------------------------------------------------------------
# single-process SGD oracle
# ---------------------------------------------------------------------------


def oracle_train(
    seed: int,
    samples_per_worker: int,
    dim: int,
    worker_count: int,
    learning_rate: float,
    iters: int,
    average_gradients: bool = True,
) -> tuple[np.ndarray, list[float]]:
    """Reference trainer for the LOGREG workload, no distribution involved.

    Per iteration it computes every worker's mean gradient on that worker's
    dataset slice, folds them left-to-right in ascending worker id order in
    32-bit arithmetic, divides by the worker count (when averaging) and
    takes one SGD step. Losses mirror the metrics pipeline: each worker's
    32-bit mean loss, canonicalized, then averaged in float64.
    """
    union = synthetic_dataset(seed, samples_per_worker * worker_count, dim)
    shards = []
    for w in range(worker_count):
        lo = w * samples_per_worker
        shards.append((union.features[lo : lo + samples_per_worker], union.labels[lo : lo + samples_per_worker]))
    weights = np.zeros(dim, dtype=np.float32)
    lr32 = np.float32(learning_rate)
    wc32 = np.float32(worker_count)
    losses: list[float] = []
    for _ in range(iters):
        per_worker = [canonical_float(float(logreg_loss(weights, X, y))) for X, y in shards]
        losses.append(canonical_float(sum(per_worker) / worker_count))
        grads = [logreg_gradient(weights, X, y) for X, y in shards]
        total = grads[0]
        for g in grads[1:]:
            total = total + g
        if average_gradients:
            total = total / wc32
        weights = weights - lr32 * total
    return weights, losses


# ---------------------------------------------------------------------------
# byte accounting
# ---------------------------------------------------------------------------


@dataclass
class AccountingCheck:
    passed: bool
    failures: list[str]
    header_ratio: float


def byte_accounting_check(report: MetricsReport, model_bytes: int, worker_count: int) -> AccountingCheck:
    """Exact per-iteration conservation: push = bcast = W * model_bytes."""
    failures: list[str] = []
    expected = worker_count * model_bytes
    for row in report.rows:
        if row.push_bytes != expected:
            failures.append(
                f"iteration {row.iteration}: push payload {row.push_bytes} != {expected}"
            )
        if row.bcast_bytes != expected:
            failures.append(
                f"iteration {row.iteration}: broadcast payload {row.bcast_bytes} != {expected}"
            )
    payload = sum(r.push_bytes + r.bcast_bytes for r in report.rows)
    header = sum(r.header_bytes for r in report.rows)
    ratio = header / (header + payload) if (header + payload) else 0.0
    return AccountingCheck(passed=not failures, failures=failures, header_ratio=ratio)


# ---------------------------------------------------------------------------
# metrics merging
# ---------------------------------------------------------------------------


def merge_metrics(
    server_rows: list[list[IterationRow]],
    worker_rows: list[list[IterationRow]],
    iters: int,
) -> MetricsReport:
    """Merge per-role rows by iteration; cross-check both counting points."""

    def index(rows: list[IterationRow]) -> dict[int, IterationRow]:
        return {r.iteration: r for r in rows}

    sidx = [index(rows) for rows in server_rows]
    widx = [index(rows) for rows in worker_rows]
    merged: list[IterationRow] = []
    for t in range(1, iters + 1):
        srows = [ix[t] for ix in sidx if t in ix]
        if not srows:
            raise HarnessError(f"no server metrics for iteration {t}")
        push = sum(r.push_bytes for r in srows)
        bcast = sum(r.bcast_bytes for r in srows)
        header = sum(r.header_bytes for r in srows)
        chunks = sum(r.chunks_completed for r in srows)
        walls = [r.wall_ms for r in srows]
        wall = max(walls) if all(w is not None for w in walls) else None
        max_load = max(r.max_core_load for r in srows)
        min_load = min(r.min_core_load for r in srows)

        wrows = [ix[t] for ix in widx if t in ix]
        if wrows:
            wpush = sum(r.push_bytes for r in wrows)
            wbcast = sum(r.bcast_bytes for r in wrows)
            if wpush != push:
                raise HarnessError(
                    f"iteration {t}: workers pushed {wpush} bytes but servers counted {push}"
                )
            if wbcast != bcast:
                raise HarnessError(
                    f"iteration {t}: workers received {wbcast} bytes but servers sent {bcast}"
                )
        loss = None
        if wrows and all(r.loss is not None for r in wrows):
            loss = canonical_float(sum(r.loss for r in wrows) / len(wrows))
        merged.append(
            IterationRow(
                iteration=t,
                wall_ms=wall,
                push_bytes=push,
                bcast_bytes=bcast,
                header_bytes=header,
                chunks_completed=chunks,
                max_core_load=max_load,
                min_core_load=min_load,
                loss=loss,
            )
        )
    return MetricsReport(rows=merged)


# ---------------------------------------------------------------------------
# cluster runners
# ---------------------------------------------------------------------------


def run_cluster_single_thread(
    server_cfgs: list[ServerConfig], worker_cfgs: list[WorkerConfig]
) -> tuple[list[ServerResult], list[WorkerResult]]:
    """Deterministic round-robin pump of every role on the calling thread."""
    network = ChannelNetwork()
    sdrivers = [ServerDriver(cfg, network) for cfg in server_cfgs]
    wdrivers = [WorkerDriver(cfg, network) for cfg in worker_cfgs]
    drivers = sdrivers + wdrivers
    try:
        while True:
            progress = False
            for d in drivers:
                progress = d.pump(0.0) or progress
            if all(d.finished for d in drivers):
                break
            if not progress:
                raise HarnessError("cluster stalled: every role idle before completion")
    except ServerFaultError as fault:
        for conn, data in fault.outbound:
            try:
                conn.send(data)
            except Exception:
                pass
        raise HarnessError(f"server fault: {fault.reason}") from fault
    except WorkerAbortError as abort:
        raise HarnessError(f"worker abort: {abort}") from abort
    finally:
        for d in drivers:
            d.close()
    return [d.core.result() for d in sdrivers], [d.core.result() for d in wdrivers]


def run_cluster_threaded(
    server_cfgs: list[ServerConfig],
    worker_cfgs: list[WorkerConfig],
    network: Optional[ChannelNetwork] = None,
) -> tuple[list[ServerResult], list[WorkerResult]]:
    """One thread per role; channel fabric by default, TCP when network is None
    and the addresses are host:port."""
    if network is None and not all(is_tcp_address(a) for a in server_cfgs[0].listen):
        network = ChannelNetwork()
    for cfg in server_cfgs:
        cfg.validate()
    for wcfg in worker_cfgs:
        wcfg.validate()
    server_results: list[Optional[ServerResult]] = [None] * len(server_cfgs)
    worker_results: list[Optional[WorkerResult]] = [None] * len(worker_cfgs)
    errors: list[tuple[str, BaseException]] = []
    lock = threading.Lock()
    abort = threading.Event()

    def server_role(i: int, cfg: ServerConfig) -> None:
        try:
            server_results[i] = serve(cfg, network, abort=abort)
        except BaseException as exc:
            with lock:
                errors.append((f"server {i}", exc))
            abort.set()

    def worker_role(i: int, cfg: WorkerConfig) -> None:
        try:
            worker_results[i] = run_worker(cfg, network, abort=abort)
        except BaseException as exc:
            with lock:
                errors.append((f"worker {i}", exc))
            abort.set()

    threads = [
        threading.Thread(target=server_role, args=(i, cfg), daemon=True)
        for i, cfg in enumerate(server_cfgs)
    ]
    for t in threads:
        t.start()
    if network is not None:
        for cfg in server_cfgs:
            for addr in cfg.listen:
                deadline = time.monotonic() + 5.0
                while not network.has_listener(addr) and time.monotonic() < deadline:
                    time.sleep(0.05)
    wthreads = [
        threading.Thread(target=worker_role, args=(i, cfg), daemon=True)
        for i, cfg in enumerate(worker_cfgs)
    ]
    for t in wthreads:
        t.start()
    deadline = time.monotonic() + 120.0
    all_threads = threads + wthreads
    while any(t.is_alive() for t in all_threads):
        if time.monotonic() > deadline:
            abort.set()
            break
        time.sleep(0.02)
    for t in all_threads:
        t.join(timeout=5.0)
    if errors:
        detail = "; ".join(f"{role}: {exc}" for role, exc in errors)
        raise HarnessError(f"role failure: {detail}")
    if any(r is None for r in server_results) or any(r is None for r in worker_results):
        raise HarnessError("cluster did not finish within the deadline")
    return list(server_results), list(worker_results)  # type: ignore[arg-type]


def _role_args(argv: list[str]) -> list[str]:
    return [sys.executable, "-m", "chunkps"] + argv


def run_cluster_subprocess(
    server_cfgs: list[ServerConfig],
    worker_cfgs: list[WorkerConfig],
    workdir: Path,
) -> tuple[list[MetricsReport], list[MetricsReport]]:
    """Launch every role through the CLI on loopback TCP; gather their CSVs."""
    procs: list[tuple[str, subprocess.Popen]] = []
    server_paths: list[Path] = []
    worker_paths: list[Path] = []
    try:
        for i, cfg in enumerate(server_cfgs):
            path = workdir / f"server{i}.csv"
            server_paths.append(path)
            argv = _server_argv(cfg, metrics=str(path))
            procs.append((f"server {i}", subprocess.Popen(
                _role_args(argv), stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True
            )))
        for i, cfg in enumerate(worker_cfgs):
            path = workdir / f"worker{i}.csv"
            worker_paths.append(path)
            argv = _worker_argv(cfg, metrics=str(path))
            procs.append((f"worker {i}", subprocess.Popen(
                _role_args(argv), stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True
            )))
        failures = []
        for role, proc in procs:
            try:
                _, err = proc.communicate(timeout=120)
            except subprocess.TimeoutExpired:
                proc.kill()
                _, err = proc.communicate()
                failures.append(f"{role}: timeout; stderr: {err.strip()}")
                continue
            if proc.returncode != 0:
                failures.append(f"{role}: exit {proc.returncode}; stderr: {err.strip()}")
        if failures:
            raise HarnessError("subprocess roles failed: " + " | ".join(failures))
    finally:
        for _, proc in procs:
            if proc.poll() is None:
                proc.kill()
    return [parse_csv(p) for p in server_paths], [parse_csv(p) for p in worker_paths]


def _server_argv(cfg: ServerConfig, metrics: Optional[str] = None) -> list[str]:
    argv = [
        "server",
        "--listen", ",".join(cfg.listen),
        "--cores", str(cfg.core_count),
        "--groups", str(cfg.group_count),
        "--chunk-bytes", str(cfg.chunk_bytes),
        "--workers", str(cfg.worker_count),
        "--lr", repr(cfg.learning_rate),
        "--agg-mode", cfg.agg_mode.value,
        "--deploy", cfg.deploy.value,
        "--iters", str(cfg.iters),
        "--model-elements", ",".join(str(c) for c in cfg.model_elements),
    ]
    if cfg.deploy is Deployment.SHARD_MEMBER:
        argv += ["--shard-index", str(cfg.shard_index), "--shard-count", str(cfg.shard_count)]
    if cfg.single_thread:
        argv.append("--single-thread")
    if metrics:
        argv += ["--metrics", metrics]
    return argv


def _worker_argv(cfg: WorkerConfig, metrics: Optional[str] = None) -> list[str]:
    argv = [
        "worker",
        "--connect", ",".join(cfg.connect),
        "--id", str(cfg.worker_id),
        "--workers", str(cfg.worker_count),
        "--mode", cfg.mode.value,
        "--iters", str(cfg.iters),
        "--seed", str(cfg.seed),
        "--samples", str(cfg.samples_per_worker),
        "--dim", str(cfg.feature_dim),
        "--model-elements", ",".join(str(c) for c in cfg.resolved_model_elements()),
    ]
    if metrics:
        argv += ["--metrics", metrics]
    return argv


# ---------------------------------------------------------------------------
# experiment configs
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    deploy: Deployment = Deployment.CENTRAL
    endpoints: int = 1
    listen: Optional[tuple[str, ...]] = None
    cores: int = 1
    groups: int = 1
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    workers: int = 1
    learning_rate: float = 0.05
    agg_mode: AggregationMode = AggregationMode.DETERMINISTIC
    iters: int = 1
    shard_count: int = 1
    model_elements: tuple[int, ...] = (16,)
    mode: WorkerMode = WorkerMode.LOGREG
    seed: int = 1
    samples: int = 100
    dim: int = 16
    transport: str = "channel"  # channel | tcp | subprocess
    single_thread: bool = True
    switch: Optional[dict[str, str]] = None
    has_training: bool = True

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise HarnessError(f"cannot read experiment config {path}")
        exp = cls()
        exp.has_training = parser.has_section("server") or parser.has_section("workers")
        if not exp.has_training and not parser.has_section("switch"):
            raise HarnessError(f"{path} configures neither a training run nor a switch run")
        if parser.has_section("server"):
            s = parser["server"]
            exp.deploy = Deployment(s.get("deploy", exp.deploy.value))
            exp.endpoints = s.getint("endpoints", exp.endpoints)
            if s.get("listen"):
                exp.listen = tuple(a.strip() for a in s["listen"].split(",") if a.strip())
            exp.cores = s.getint("cores", exp.cores)
            exp.groups = s.getint("groups", exp.groups)
            exp.chunk_bytes = s.getint("chunk-bytes", exp.chunk_bytes)
            exp.workers = s.getint("workers", exp.workers)
            exp.learning_rate = s.getfloat("lr", exp.learning_rate)
            exp.agg_mode = AggregationMode(s.get("agg-mode", exp.agg_mode.value))
            exp.iters = s.getint("iters", exp.iters)
            exp.shard_count = s.getint("shard-count", exp.shard_count)
            if s.get("model-elements"):
                exp.model_elements = tuple(int(x) for x in s["model-elements"].split(","))
        if parser.has_section("workers"):
            w = parser["workers"]
            exp.mode = WorkerMode(w.get("mode", exp.mode.value))
            exp.seed = w.getint("seed", exp.seed)
            exp.samples = w.getint("samples", exp.samples)
            exp.dim = w.getint("dim", exp.dim)
        if parser.has_section("harness"):
            h = parser["harness"]
            exp.transport = h.get("transport", exp.transport)
            exp.single_thread = h.getboolean("single-thread", exp.single_thread)
        if parser.has_section("switch"):
            exp.switch = dict(parser["switch"])
        return exp

    @property
    def model_bytes(self) -> int:
        return sum(self.model_elements) * 4


def build_roles(exp: ExperimentConfig) -> tuple[list[ServerConfig], list[WorkerConfig]]:
    """Expand an experiment into per-role configs with synthesized addresses."""
    shard_count = exp.shard_count if exp.deploy is Deployment.SHARD_MEMBER else 1
    server_cfgs: list[ServerConfig] = []
    all_addrs: list[str] = []
    for s in range(shard_count):
        if exp.listen is not None:
            per = len(exp.listen) // shard_count
            addrs = exp.listen[s * per : (s + 1) * per]
        elif exp.transport in ("tcp", "subprocess"):
            addrs = tuple(f"127.0.0.1:{_free_port()}" for _ in range(exp.endpoints))
        else:
            addrs = tuple(f"ps{s}/ep{e}" for e in range(exp.endpoints))
        all_addrs.extend(addrs)
        server_cfgs.append(
            ServerConfig(
                listen=tuple(addrs),
                worker_count=exp.workers,
                model_elements=exp.model_elements,
                iters=exp.iters,
                core_count=exp.cores,
                group_count=exp.groups,
                chunk_bytes=exp.chunk_bytes,
                learning_rate=exp.learning_rate,
                agg_mode=exp.agg_mode,
                deploy=exp.deploy,
                shard_index=s if exp.deploy is Deployment.SHARD_MEMBER else 0,
                shard_count=shard_count if exp.deploy is Deployment.SHARD_MEMBER else 1,
                single_thread=exp.single_thread and exp.transport == "channel",
            )
        )
    worker_cfgs = [
        WorkerConfig(
            worker_id=w,
            connect=tuple(all_addrs),
            worker_count=exp.workers,
            iters=exp.iters,
            mode=exp.mode,
            seed=exp.seed,
            samples_per_worker=exp.samples,
            feature_dim=exp.dim,
            model_elements=exp.model_elements,
        )
        for w in range(exp.workers)
    ]
    return server_cfgs, worker_cfgs


def _free_port() -> int:
    import socket

    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# ---------------------------------------------------------------------------
# experiment entry point
# ---------------------------------------------------------------------------


@dataclass
class ExperimentOutcome:
    report: MetricsReport
    accounting: AccountingCheck
    server_results: Optional[list[ServerResult]]
    worker_results: Optional[list[WorkerResult]]
    model_bytes: int
    worker_count: int

    @property
    def passed(self) -> bool:
        return self.accounting.passed

    def final_model(self) -> np.ndarray:
        """Flat final model, merged across shard servers in key order."""
        if not self.server_results:
            raise HarnessError("final model unavailable for subprocess runs")
        arrays: dict[int, np.ndarray] = {}
        for result in self.server_results:
            arrays.update(result.store.arrays)
        return np.concatenate([arrays[k] for k in sorted(arrays)])


def run_experiment(exp, out=None) -> ExperimentOutcome:
    """Run one training experiment end to end and merge all metrics.

    ``exp`` is an ExperimentConfig or a path to one. Raises HarnessError if
    any role exits abnormally or the two byte-counting points disagree.
    """
    if not isinstance(exp, ExperimentConfig):
        exp = ExperimentConfig.from_file(exp)
    server_cfgs, worker_cfgs = build_roles(exp)

    server_results: Optional[list[ServerResult]] = None
    worker_results: Optional[list[WorkerResult]] = None
    if exp.transport == "subprocess":
        with tempfile.TemporaryDirectory(prefix="chunkps-bench-") as tmp:
            server_reports, worker_reports = run_cluster_subprocess(
                server_cfgs, worker_cfgs, Path(tmp)
            )
        server_rows = [r.rows for r in server_reports]
        worker_rows = [r.rows for r in worker_reports]
    elif exp.transport == "tcp" or not exp.single_thread:
        network = ChannelNetwork() if exp.transport == "channel" else None
        server_results, worker_results = run_cluster_threaded(server_cfgs, worker_cfgs, network)
        server_rows = [r.rows for r in server_results]
        worker_rows = [r.rows for r in worker_results]
    else:
        server_results, worker_results = run_cluster_single_thread(server_cfgs, worker_cfgs)
        server_rows = [r.rows for r in server_results]
        worker_rows = [r.rows for r in worker_results]

    report = merge_metrics(server_rows, worker_rows, exp.iters)
    accounting = byte_accounting_check(report, exp.model_bytes, exp.workers)
    outcome = ExperimentOutcome(
        report=report,
        accounting=accounting,
        server_results=server_results,
        worker_results=worker_results,
        model_bytes=exp.model_bytes,
        worker_count=exp.workers,
    )
    if out:
        emit_csv(report, out)
    return outcome


def run_switch_section(section: dict[str, str]) -> dict[str, float]:
    """Drive the switch emulator from a bench config's [switch] section."""
    from .switch import simulate

    return simulate(
        racks=int(section.get("racks", "1")),
        workers_per_rack=int(section.get("workers-per-rack", "1")),
        model_bytes=int(section.get("model-bytes", str(DEFAULT_CHUNK_BYTES))),
        chunk_bytes=int(section.get("chunk-bytes", str(DEFAULT_CHUNK_BYTES))),
        scale=int(section.get("scale", "65536")),
        region_bytes=int(section.get("region-bytes", "1024")),
        acc_width=int(section.get("acc-width", "32")),
        seed=int(section.get("seed", "1")),
        out=section.get("out"),
    )
