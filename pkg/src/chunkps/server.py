"""Parameter-server runtime.

Three roles share one state machine (ServerCore):

* endpoint readers: parse frames off each listener's connections and
  forward them, preserving per-connection order;
* core shards: each exclusively owns a set of chunk buffers and the
  matching model slices, so the data path needs no cross-shard locks;
* a control sequencer: registration, FIN tracking, shutdown.

Iteration tags count applied update rounds: the registration snapshot is
MODEL_CHUNK(0), workers push PUSH_GRAD(t) to produce update t (t = 1..T),
and the server broadcasts MODEL_CHUNK(t) for a chunk the moment update t
lands on it (eager per-chunk broadcast; there is no explicit pull).

Two drivers run the same core: a threaded one (readers + shard workers +
control on separate threads) and a single-thread pump with deterministic
round-robin polling for reproducible runs.

Deployment shapes: `central` (one process owns every key), `pbox` (same,
served through several endpoints bound to core groups) and `shard` (this
process owns one contiguous key range of the model).
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .aggregation import AggregationBuffer, AggregationMode, OptimizerConfig, PushStatus, apply_sgd
from .assignment import ChunkAssignment, assign_chunks, shard_keyspace
from .errors import DuplicatePushError, InvalidConfigError, ServerFaultError, StaleIterationError
from .metrics import IterationRow, MetricsReport, emit_csv
from .model import DEFAULT_CHUNK_BYTES, ModelSpec, ModelStore, build_model_spec, partition_model
from .transport import (
    ChannelNetwork,
    ChannelPoller,
    TcpListener,
    TcpPoller,
    is_tcp_address,
)
from .wire import (
    AssignmentTable,
    FrameDecoder,
    Message,
    MessageType,
    bytes_to_floats,
    encode_message,
    error_message,
    floats_to_bytes,
)

_CONTROL = -1


class Deployment(Enum):
    CENTRAL = "central"
    PBOX = "pbox"
    SHARD_MEMBER = "shard"


@dataclass
class ServerConfig:
    listen: tuple[str, ...]
    worker_count: int
    model_elements: tuple[int, ...]
    iters: int
    core_count: int = 1
    group_count: int = 1
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    learning_rate: float = 0.05
    average_gradients: bool = True
    agg_mode: AggregationMode = AggregationMode.DETERMINISTIC
    deploy: Deployment = Deployment.CENTRAL
    shard_index: int = 0
    shard_count: int = 1
    metrics_path: Optional[str] = None
    single_thread: bool = False

    def validate(self) -> None:
        if self.worker_count < 1:
            raise InvalidConfigError(f"worker_count must be >= 1, got {self.worker_count}")
        if self.worker_count > 65536:
            raise InvalidConfigError("worker_count exceeds the 16-bit worker id space")
        if not self.listen:
            raise InvalidConfigError("need at least one listen address")
        if self.iters < 0:
            raise InvalidConfigError("iters must be >= 0")
        if self.deploy is Deployment.SHARD_MEMBER:
            if not 0 <= self.shard_index < self.shard_count:
                raise InvalidConfigError(
                    f"shard_index {self.shard_index} out of range for shard_count {self.shard_count}"
                )
        elif self.shard_count != 1 or self.shard_index != 0:
            raise InvalidConfigError("shard_index/shard_count only apply to shard deployment")

    @property
    def endpoint_count(self) -> int:
        return len(self.listen)

    def owned_keys(self, spec: ModelSpec) -> range:
        if self.deploy is Deployment.SHARD_MEMBER:
            return shard_keyspace(spec, self.shard_count)[self.shard_index]
        return range(spec.key_count)


@dataclass
class ServerResult:
    spec: ModelSpec
    store: ModelStore
    assignment: ChunkAssignment
    rows: list[IterationRow]
    owned_bytes: int
    registration_payload_bytes: int
    registration_frames: int
    worker_count: int


class _Shard:
    """State owned by exactly one core shard; never shared."""

    __slots__ = ("buffers", "push_bytes", "push_frames", "bcast_bytes", "bcast_frames", "completions", "close_time")

    def __init__(self):
        self.buffers: dict[tuple[int, int], AggregationBuffer] = {}
        self.push_bytes: dict[int, int] = {}
        self.push_frames: dict[int, int] = {}
        self.bcast_bytes: dict[int, int] = {}
        self.bcast_frames: dict[int, int] = {}
        self.completions: dict[int, int] = {}
        self.close_time: dict[int, float] = {}


class ServerCore:
    """Sans-IO server state machine; drivers feed it decoded frames."""

    def __init__(self, cfg: ServerConfig):
        cfg.validate()
        self.cfg = cfg
        self.spec = build_model_spec(cfg.model_elements)
        self.opt = OptimizerConfig(cfg.learning_rate, cfg.average_gradients)
        self.owned_keys = cfg.owned_keys(self.spec)
        owned_set = set(self.owned_keys)
        all_chunks = partition_model(self.spec, cfg.chunk_bytes)
        self.chunks = [c for c in all_chunks if c.key_id in owned_set]
        self.assignment = assign_chunks(self.chunks, cfg.core_count, cfg.group_count, cfg.endpoint_count)
        self.store = ModelStore.zeros(self.spec, self.owned_keys)
        self.owned_bytes = sum(c.byte_size for c in self.chunks)
        self.expected_digest = self.spec.spec_hash()

        self.shards = [_Shard() for _ in range(cfg.core_count)]
        start_iteration = 1
        for chunk, core in zip(self.assignment.chunks, self.assignment.core_ids):
            self.shards[core].buffers[chunk.chunk_id] = AggregationBuffer(
                chunk, cfg.worker_count, cfg.agg_mode, iteration=start_iteration
            )

        table = AssignmentTable(
            chunk_bytes=cfg.chunk_bytes,
            worker_count=cfg.worker_count,
            learning_rate=cfg.learning_rate,
            deterministic=cfg.agg_mode is AggregationMode.DETERMINISTIC,
            average_gradients=cfg.average_gradients,
            endpoints=tuple(cfg.listen),
            keys=tuple((k, self.spec.element_counts[k]) for k in self.owned_keys),
            chunk_endpoints=self.assignment.chunk_endpoints(),
        )
        self._table_payload = table.to_bytes()

        # control-plane state
        self._conn_endpoint: dict[object, int] = {}
        self._conn_worker: dict[object, int] = {}
        self._registered: dict[int, dict[int, object]] = {}
        self._fins: set[tuple[int, int]] = set()
        self._registration_done_at: Optional[float] = None
        self.registration_payload_bytes = 0
        self.registration_frames = 0
        self._record_wall = not cfg.single_thread

    # -- control plane ------------------------------------------------------

    def on_connect(self, endpoint: int, conn) -> None:
        self._conn_endpoint[conn] = endpoint

    def on_eof(self, conn) -> None:
        worker_id = self._conn_worker.get(conn)
        if worker_id is None:
            return  # never registered; nothing owed
        endpoint = self._conn_endpoint[conn]
        if (worker_id, endpoint) not in self._fins:
            raise ServerFaultError(f"worker {worker_id} disconnected mid-run on endpoint {endpoint}")

    def _fault(self, reason: str, conn, worker_id: int = 0, iteration: int = 0):
        frame = encode_message(error_message(reason, worker_id=worker_id, iteration=iteration))
        raise ServerFaultError(reason, outbound=[(conn, frame)])

    def route(self, msg: Message) -> int:
        """Shard index for pushes; _CONTROL for everything else."""
        if msg.msg_type is MessageType.PUSH_GRAD:
            try:
                return self.assignment.core_for_chunk(msg.key_id, msg.chunk_index)
            except Exception:
                return _CONTROL  # not owned here; control answers not-owner
        return _CONTROL

    @property
    def registration_complete(self) -> bool:
        return (
            len(self._registered) == self.cfg.worker_count
            and all(len(eps) == self.cfg.endpoint_count for eps in self._registered.values())
        )

    @property
    def finished(self) -> bool:
        return (
            self.registration_complete
            and len(self._fins) == self.cfg.worker_count * self.cfg.endpoint_count
        )

    def process_control(self, conn, msg: Message) -> list[tuple[object, bytes]]:
        if msg.msg_type is MessageType.REGISTER:
            return self._handle_register(conn, msg)
        if msg.msg_type is MessageType.FIN:
            return self._handle_fin(conn, msg)
        if msg.msg_type is MessageType.PUSH_GRAD:
            self._fault("not-owner", conn, worker_id=msg.worker_id, iteration=msg.iteration)
        self._fault(f"protocol-error: unexpected {msg.msg_type.name} from worker", conn)

    def _handle_register(self, conn, msg: Message) -> list[tuple[object, bytes]]:
        endpoint = self._conn_endpoint.get(conn)
        if endpoint is None:
            raise ServerFaultError("register on unknown connection")
        if not 0 <= msg.worker_id < self.cfg.worker_count:
            self._fault(f"protocol-error: worker id {msg.worker_id} out of range", conn)
        if msg.payload != self.expected_digest:
            self._fault("spec-mismatch", conn, worker_id=msg.worker_id)
        slots = self._registered.setdefault(msg.worker_id, {})
        if endpoint in slots:
            self._fault("duplicate-worker", conn, worker_id=msg.worker_id)
        slots[endpoint] = conn
        self._conn_worker[conn] = msg.worker_id

        out = [
            (
                conn,
                encode_message(
                    Message(
                        MessageType.REGISTER_ACK,
                        worker_id=msg.worker_id,
                        iteration=0,
                        payload=self._table_payload,
                    )
                ),
            )
        ]
        self.registration_frames += 1
        self.registration_payload_bytes += len(self._table_payload)
        # initial snapshot: this endpoint's chunks, tagged iteration 0
        for chunk, core in zip(self.assignment.chunks, self.assignment.core_ids):
            if self.assignment.endpoint_of_core(core) != endpoint:
                continue
            payload = floats_to_bytes(self.store.chunk_view(chunk))
            out.append(
                (
                    conn,
                    encode_message(
                        Message(
                            MessageType.MODEL_CHUNK,
                            iteration=0,
                            key_id=chunk.key_id,
                            chunk_index=chunk.chunk_index,
                            payload=payload,
                        )
                    ),
                )
            )
            self.registration_frames += 1
            self.registration_payload_bytes += len(payload)
        if self.registration_complete and self._registration_done_at is None:
            self._registration_done_at = time.perf_counter()
        return out

    def _handle_fin(self, conn, msg: Message) -> list[tuple[object, bytes]]:
        worker_id = self._conn_worker.get(conn)
        if worker_id is None or worker_id != msg.worker_id:
            self._fault("protocol-error: FIN from unregistered connection", conn)
        if msg.iteration != self.cfg.iters:
            self._fault(
                f"bsp-violation: FIN at iteration {msg.iteration}, expected {self.cfg.iters}",
                conn,
                worker_id=msg.worker_id,
            )
        endpoint = self._conn_endpoint[conn]
        self._fins.add((worker_id, endpoint))
        return []

    # -- data plane (shard-owned) -------------------------------------------

    def process_push(self, shard_id: int, conn, msg: Message) -> list[tuple[object, bytes]]:
        worker_id = self._conn_worker.get(conn)
        if worker_id is None:
            self._fault("protocol-error: push before registration", conn, worker_id=msg.worker_id)
        if worker_id != msg.worker_id:
            self._fault(
                f"protocol-error: push for worker {msg.worker_id} on worker {worker_id}'s connection",
                conn,
                worker_id=msg.worker_id,
            )
        shard = self.shards[shard_id]
        buf = shard.buffers.get((msg.key_id, msg.chunk_index))
        if buf is None:
            self._fault("not-owner", conn, worker_id=msg.worker_id, iteration=msg.iteration)
        chunk = buf.chunk
        if len(msg.payload) != chunk.byte_size:
            self._fault(
                f"protocol-error: payload {len(msg.payload)} bytes, chunk is {chunk.byte_size}",
                conn,
                worker_id=msg.worker_id,
                iteration=msg.iteration,
            )
        try:
            buf.check_iteration(msg.iteration)
            status = buf.accept_gradient(worker_id, bytes_to_floats(msg.payload))
        except StaleIterationError as exc:
            self._fault(f"bsp-violation: {exc}", conn, worker_id=msg.worker_id, iteration=msg.iteration)
        except DuplicatePushError as exc:
            self._fault(f"duplicate-push: {exc}", conn, worker_id=msg.worker_id, iteration=msg.iteration)
        except Exception as exc:
            self._fault(f"protocol-error: {exc}", conn, worker_id=msg.worker_id, iteration=msg.iteration)

        iteration = msg.iteration
        shard.push_bytes[iteration] = shard.push_bytes.get(iteration, 0) + len(msg.payload)
        shard.push_frames[iteration] = shard.push_frames.get(iteration, 0) + 1
        if status is PushStatus.PARTIAL:
            return []

        grad_sum = buf.finalize_sum()
        view = self.store.chunk_view(chunk)
        view[:] = apply_sgd(view, grad_sum, self.opt, self.cfg.worker_count, iteration)
        buf.reset_for_iteration(iteration + 1)

        shard.completions[iteration] = shard.completions.get(iteration, 0) + 1
        if self._record_wall:
            shard.close_time[iteration] = time.perf_counter()

        payload = floats_to_bytes(view)
        frame = encode_message(
            Message(
                MessageType.MODEL_CHUNK,
                iteration=iteration,
                key_id=chunk.key_id,
                chunk_index=chunk.chunk_index,
                payload=payload,
            )
        )
        endpoint = self.assignment.endpoint_for_chunk(chunk.key_id, chunk.chunk_index)
        out = []
        for target_worker in range(self.cfg.worker_count):
            target = self._registered[target_worker][endpoint]
            out.append((target, frame))
        shard.bcast_bytes[iteration] = shard.bcast_bytes.get(iteration, 0) + len(payload) * self.cfg.worker_count
        shard.bcast_frames[iteration] = shard.bcast_frames.get(iteration, 0) + self.cfg.worker_count
        return out

    # -- metrics --------------------------------------------------------------

    def metrics_rows(self) -> list[IterationRow]:
        loads = [load.byte_load for load in self.assignment.load_report()]
        max_load = max(loads) if loads else 0
        min_load = min(loads) if loads else 0
        rows = []
        prev_time = self._registration_done_at
        for t in range(1, self.cfg.iters + 1):
            push = sum(s.push_bytes.get(t, 0) for s in self.shards)
            push_frames = sum(s.push_frames.get(t, 0) for s in self.shards)
            bcast = sum(s.bcast_bytes.get(t, 0) for s in self.shards)
            bcast_frames = sum(s.bcast_frames.get(t, 0) for s in self.shards)
            done = sum(s.completions.get(t, 0) for s in self.shards)
            wall_ms = None
            if self._record_wall:
                close = max((s.close_time[t] for s in self.shards if t in s.close_time), default=None)
                if close is not None and prev_time is not None:
                    wall_ms = (close - prev_time) * 1000.0
                prev_time = close if close is not None else prev_time
            rows.append(
                IterationRow(
                    iteration=t,
                    wall_ms=wall_ms,
                    push_bytes=push,
                    bcast_bytes=bcast,
                    header_bytes=24 * (push_frames + bcast_frames),
                    chunks_completed=done,
                    max_core_load=max_load,
                    min_core_load=min_load,
                )
            )
        return rows

    def result(self) -> ServerResult:
        self.store.iteration = self.cfg.iters
        return ServerResult(
            spec=self.spec,
            store=self.store,
            assignment=self.assignment,
            rows=self.metrics_rows(),
            owned_bytes=self.owned_bytes,
            registration_payload_bytes=self.registration_payload_bytes,
            registration_frames=self.registration_frames,
            worker_count=self.cfg.worker_count,
        )


class ServerDriver:
    """Single-thread driver: binds listeners at construction, then pump()."""

    def __init__(self, cfg: ServerConfig, network: Optional[ChannelNetwork] = None):
        self.core = ServerCore(cfg)
        self.cfg = cfg
        self._decoders: dict[object, FrameDecoder] = {}
        self._listener_endpoint: dict[object, int] = {}
        self._listeners = []
        if network is None:
            if not all(is_tcp_address(a) for a in cfg.listen):
                raise InvalidConfigError("non host:port listen address requires an in-process network")
            self.poller = TcpPoller()
            for ep, addr in enumerate(cfg.listen):
                listener = TcpListener(addr)
                self._listeners.append(listener)
                self._listener_endpoint[listener] = ep
                self.poller.add_listener(listener)
        else:
            self.poller = ChannelPoller()
            for ep, addr in enumerate(cfg.listen):
                listener = network.listen(addr, self.poller.hub)
                self._listeners.append(listener)
                self._listener_endpoint[listener] = ep
                self.poller.add_listener(listener)
        self._conns: list[object] = []

    @property
    def finished(self) -> bool:
        return self.core.finished

    def pump(self, timeout: float = 0.0) -> bool:
        progress = False
        for kind, conn, extra in self.poller.poll(timeout):
            progress = True
            if kind == "accept":
                self._conns.append(conn)
                self._decoders[conn] = FrameDecoder()
                self.core.on_connect(self._listener_endpoint[extra], conn)
            elif kind == "data":
                for frame in self._decoders[conn].feed(extra):
                    self._dispatch(conn, frame)
            else:  # eof
                self.core.on_eof(conn)
        return progress

    def _dispatch(self, conn, frame: Message) -> None:
        shard_id = self.core.route(frame)
        if shard_id == _CONTROL:
            outbound = self.core.process_control(conn, frame)
        else:
            outbound = self.core.process_push(shard_id, conn, frame)
        for target, data in outbound:
            target.send(data)

    def close(self) -> None:
        for conn in self._conns:
            conn.close()
        for listener in self._listeners:
            closer = getattr(listener, "close", None)
            if closer:
                closer()
        closer = getattr(self.poller, "close", None)
        if closer:
            closer()


def _send_fault_frames(fault: ServerFaultError) -> None:
    for conn, data in fault.outbound:
        try:
            conn.send(data)
        except Exception:
            pass


def _serve_single_thread(driver: ServerDriver, abort: Optional[threading.Event] = None) -> ServerResult:
    try:
        while not driver.finished:
            if abort is not None and abort.is_set():
                raise ServerFaultError("aborted by harness")
            driver.pump(timeout=0.2)
    except ServerFaultError as fault:
        _send_fault_frames(fault)
        driver.close()
        raise
    result = driver.core.result()
    driver.close()
    return result


def _serve_threaded(
    cfg: ServerConfig,
    network: Optional[ChannelNetwork],
    abort: Optional[threading.Event] = None,
) -> ServerResult:
    core = ServerCore(cfg)
    stop = threading.Event()
    errors: list[BaseException] = []
    error_lock = threading.Lock()
    control_q: "queue.Queue" = queue.Queue()
    shard_qs = [queue.Queue() for _ in range(cfg.core_count)]
    all_conns: list[object] = []
    conns_lock = threading.Lock()

    def record_error(exc: BaseException) -> None:
        with error_lock:
            errors.append(exc)
        stop.set()

    def reader(endpoint: int, poller, listener) -> None:
        decoders: dict[object, FrameDecoder] = {}
        try:
            while not stop.is_set():
                for kind, conn, extra in poller.poll(0.05):
                    if kind == "accept":
                        with conns_lock:
                            all_conns.append(conn)
                        decoders[conn] = FrameDecoder()
                        core.on_connect(endpoint, conn)
                    elif kind == "data":
                        for frame in decoders[conn].feed(extra):
                            shard_id = core.route(frame)
                            if shard_id == _CONTROL:
                                control_q.put((conn, frame))
                            else:
                                shard_qs[shard_id].put((conn, frame))
                    else:
                        control_q.put((conn, None))
        except BaseException as exc:
            record_error(exc)

    def shard_worker(shard_id: int) -> None:
        q = shard_qs[shard_id]
        try:
            while True:
                item = q.get()
                if item is None:
                    return
                conn, frame = item
                for target, data in core.process_push(shard_id, conn, frame):
                    target.blocking_send(data)
        except BaseException as exc:
            record_error(exc)

    def control_worker() -> None:
        try:
            while True:
                item = control_q.get()
                if item is None:
                    return
                conn, frame = item
                if frame is None:
                    core.on_eof(conn)
                else:
                    for target, data in core.process_control(conn, frame):
                        target.blocking_send(data)
                if core.finished:
                    stop.set()
        except BaseException as exc:
            record_error(exc)

    listeners = []
    threads = []
    try:
        for ep, addr in enumerate(cfg.listen):
            if network is None:
                poller = TcpPoller()
                listener = TcpListener(addr)
                poller.add_listener(listener)
            else:
                poller = ChannelPoller()
                listener = network.listen(addr, poller.hub)
                poller.add_listener(listener)
            listeners.append((listener, poller))
            threads.append(threading.Thread(target=reader, args=(ep, poller, listener), daemon=True))
        for sid in range(cfg.core_count):
            threads.append(threading.Thread(target=shard_worker, args=(sid,), daemon=True))
        control_thread = threading.Thread(target=control_worker, daemon=True)
        threads.append(control_thread)
        for t in threads:
            t.start()
        while not stop.is_set():
            if abort is not None and abort.is_set():
                record_error(ServerFaultError("aborted by harness"))
                break
            stop.wait(0.05)
    finally:
        stop.set()
        for q in shard_qs:
            q.put(None)
        control_q.put(None)
        for t in threads:
            if t.ident is not None:
                t.join(timeout=5.0)
        with error_lock:
            pending = list(errors)
        fault = next((e for e in pending if isinstance(e, ServerFaultError)), None)
        if fault is not None:
            _send_fault_frames(fault)
        with conns_lock:
            for conn in all_conns:
                conn.close()
        for listener, poller in listeners:
            closer = getattr(listener, "close", None)
            if closer:
                closer()
            closer = getattr(poller, "close", None)
            if closer:
                closer()
    if pending:
        raise pending[0]
    return core.result()


def serve(
    cfg: ServerConfig,
    network: Optional[ChannelNetwork] = None,
    abort: Optional[threading.Event] = None,
) -> ServerResult:
    """Run a server role to completion and return its final state."""
    if cfg.single_thread:
        driver = ServerDriver(cfg, network)
        result = _serve_single_thread(driver, abort)
    else:
        result = _serve_threaded(cfg, network, abort)
    if cfg.metrics_path:
        emit_csv(MetricsReport(rows=result.rows), cfg.metrics_path)
    return result


def run_server(cfg: ServerConfig, network: Optional[ChannelNetwork] = None) -> int:
    """CLI entry: 0 on clean completion, 1 on any fault (after diagnostics)."""
    import sys

    try:
        serve(cfg, network)
        return 0
    except Exception as exc:
        print(f"server error: {exc}", file=sys.stderr)
        return 1
