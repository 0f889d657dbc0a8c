"""Worker client: pushes per-chunk gradients and mirrors the model.

Two gradient sources share the exchange loop:

* LOGREG: full-batch logistic regression on a synthetic dataset, the
  verifiable workload. Every worker regenerates the same union dataset
  from (seed, n, d) and trains on its own contiguous slice, so a
  single-process trainer can reproduce the distributed run exactly.
* ZERO_COMPUTE: no model math at all; payloads are synthesized in O(bytes)
  so runs measure pure parameter-exchange throughput.

Dataset generation is fully specified so independent implementations
produce identical bytes; see synthetic_dataset.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import InvalidBatchError, InvalidConfigError, WorkerAbortError
from .metrics import IterationRow, canonical_float
from .model import ChunkDescriptor, ModelSpec, build_model_spec, partition_model
from .transport import ChannelNetwork, ChannelPoller, TcpPoller, is_tcp_address, tcp_connect
from .wire import (
    AssignmentTable,
    FrameDecoder,
    Message,
    MessageType,
    bytes_to_floats,
    encode_message,
    floats_to_bytes,
    register_message,
)

# Knuth-style 64-bit linear congruential generator; the constants are part
# of the dataset contract.
LCG_MULT = 6364136223846793005
LCG_INC = 1442695040888963407
_MASK64 = (1 << 64) - 1


class WorkerMode(Enum):
    LOGREG = "logreg"
    ZERO_COMPUTE = "zero"


@dataclass(frozen=True)
class SyntheticDataset:
    """Deterministic labeled samples; regenerable exactly from (seed, n, d)."""

    features: np.ndarray  # (n, d) float32 in [-1, 1)
    labels: np.ndarray  # (n,) float32, 0.0 or 1.0
    seed: int
    ground_truth: np.ndarray  # (d,) float32 hyperplane used for labels


class _Lcg:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state * LCG_MULT + LCG_INC) & _MASK64
        return self.state

    def next_unit(self) -> np.float32:
        # top 24 bits -> float32 in [-1, 1), every step exact in float32
        u = self.next_u64() >> 40
        return np.float32(u) / np.float32(1 << 23) - np.float32(1.0)


def synthetic_dataset(seed: int, n: int, d: int) -> SyntheticDataset:
    """Generate the union dataset for (seed, n, d).

    Contract, in generation order, from one LCG stream seeded with ``seed``
    (state' = state * 6364136223846793005 + 1442695040888963407 mod 2^64,
    drawing a value from the top 24 bits of each new state, mapped to
    [-1, 1) as u/2^23 - 1 in float32):

    1. d values: the ground-truth hyperplane w*.
    2. n*d values, row-major: the feature matrix.
    3. labels[i] = 1.0 iff sum_j float64(x[i,j]) * float64(w*[j]) > 0,
       accumulated in ascending j order in float64; else 0.0.
    """
    if n < 1 or d < 1:
        raise InvalidConfigError(f"need n >= 1 and d >= 1, got n={n} d={d}")
    gen = _Lcg(seed)
    w_star = np.empty(d, dtype=np.float32)
    for j in range(d):
        w_star[j] = gen.next_unit()
    features = np.empty((n, d), dtype=np.float32)
    for i in range(n):
        for j in range(d):
            features[i, j] = gen.next_unit()
    margins = np.zeros(n, dtype=np.float64)
    w64 = w_star.astype(np.float64)
    x64 = features.astype(np.float64)
    for j in range(d):
        margins += x64[:, j] * w64[j]
    labels = (margins > 0.0).astype(np.float32)
    return SyntheticDataset(features=features, labels=labels, seed=seed, ground_truth=w_star)


def logreg_gradient(weights: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mean logistic-loss gradient over the batch.

    Per-sample terms (sigmoid(w.x) - y) * x are accumulated in sample order
    in 32-bit arithmetic, then divided by the batch size.
    """
    n = features.shape[0]
    if n == 0:
        raise InvalidBatchError("gradient of an empty batch")
    if weights.shape[0] != features.shape[1]:
        raise InvalidConfigError("weight length must equal feature dimension")
    acc = np.zeros(weights.shape[0], dtype=np.float32)
    one = np.float32(1.0)
    with np.errstate(over="ignore"):
        for i in range(n):
            x = features[i]
            z = np.float32(x @ weights)
            s = one / (one + np.exp(-z))
            acc = acc + (s - labels[i]) * x
    return acc / np.float32(n)


def logreg_loss(weights: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.float32:
    """Mean logistic loss, accumulated in sample order in 32-bit arithmetic."""
    n = features.shape[0]
    if n == 0:
        raise InvalidBatchError("loss of an empty batch")
    acc = np.float32(0.0)
    zero = np.float32(0.0)
    two = np.float32(2.0)
    one = np.float32(1.0)
    for i in range(n):
        z = np.float32(features[i] @ weights)
        sign = two * labels[i] - one  # +1 / -1
        acc = acc + np.logaddexp(zero, -sign * z)
    return acc / np.float32(n)


def zero_compute_gradients(
    spec: ModelSpec, chunk_bytes: int, iteration: int
) -> list[tuple[ChunkDescriptor, np.ndarray]]:
    """Constant payloads, every element (iteration mod 7) * 1e-3; no model math."""
    value = np.float32((iteration % 7) * 1e-3)
    return [
        (chunk, np.full(chunk.element_count, value, dtype=np.float32))
        for chunk in partition_model(spec, chunk_bytes)
    ]


@dataclass
class WorkerConfig:
    worker_id: int
    connect: tuple[str, ...]
    worker_count: int
    iters: int
    mode: WorkerMode = WorkerMode.LOGREG
    seed: int = 1
    samples_per_worker: int = 100
    feature_dim: int = 16
    model_elements: Optional[tuple[int, ...]] = None
    metrics_path: Optional[str] = None

    def validate(self) -> None:
        if not 0 <= self.worker_id < self.worker_count:
            raise InvalidConfigError(f"worker_id {self.worker_id} not in [0, {self.worker_count})")
        if not self.connect:
            raise InvalidConfigError("need at least one server address")
        if self.iters < 0:
            raise InvalidConfigError("iters must be >= 0")
        if self.mode is WorkerMode.LOGREG:
            if self.samples_per_worker < 1 or self.feature_dim < 1:
                raise InvalidConfigError("logreg mode needs samples >= 1 and dim >= 1")
            if sum(self.resolved_model_elements()) != self.feature_dim:
                raise InvalidConfigError("model elements must total the feature dimension")
        elif self.model_elements is None:
            raise InvalidConfigError("zero mode needs explicit model elements")

    def resolved_model_elements(self) -> tuple[int, ...]:
        if self.model_elements is not None:
            return self.model_elements
        return (self.feature_dim,)


@dataclass
class WorkerResult:
    worker_id: int
    mirror: dict[int, np.ndarray]
    rows: list[IterationRow]
    losses: list[float]  # float(loss) per iteration, LOGREG only

    def flat_model(self) -> np.ndarray:
        return np.concatenate([self.mirror[k] for k in sorted(self.mirror)])


class _LogRegEngine:
    def __init__(self, cfg: WorkerConfig):
        union = synthetic_dataset(
            cfg.seed, cfg.samples_per_worker * cfg.worker_count, cfg.feature_dim
        )
        lo = cfg.worker_id * cfg.samples_per_worker
        hi = lo + cfg.samples_per_worker
        self.features = union.features[lo:hi]
        self.labels = union.labels[lo:hi]

    def gradient_and_loss(self, flat_weights: np.ndarray) -> tuple[np.ndarray, np.float32]:
        loss = logreg_loss(flat_weights, self.features, self.labels)
        grad = logreg_gradient(flat_weights, self.features, self.labels)
        return grad, loss


class _ZeroEngine:
    """Constant payloads cached as wire bytes; only (iteration mod 7) matters."""

    def __init__(self):
        self._cache: dict[tuple[int, int], bytes] = {}

    def payload_bytes(self, chunk: ChunkDescriptor, iteration: int) -> bytes:
        key = (chunk.element_count, iteration % 7)
        data = self._cache.get(key)
        if data is None:
            value = np.float32((iteration % 7) * 1e-3)
            data = floats_to_bytes(np.full(chunk.element_count, value, dtype=np.float32))
            self._cache[key] = data
        return data


class WorkerCore:
    """Sans-IO worker state machine; the driver feeds it decoded frames."""

    def __init__(self, cfg: WorkerConfig):
        cfg.validate()
        self.cfg = cfg
        self.spec = build_model_spec(cfg.resolved_model_elements())
        self.digest = self.spec.spec_hash()
        self.mirror = {
            k: np.zeros(self.spec.element_counts[k], dtype=np.float32)
            for k in range(self.spec.key_count)
        }
        self.key_offsets = self.spec.key_flat_offsets()

        self._conns: list[object] = []
        self._conn_addr: dict[object, str] = {}
        self._acks: set[object] = set()
        self._route: dict[tuple[int, int], object] = {}
        self._table_params: Optional[tuple] = None
        self.chunk_bytes: Optional[int] = None
        self.chunks: list[ChunkDescriptor] = []
        self._chunk_by_id: dict[tuple[int, int], ChunkDescriptor] = {}

        self._phase = "registering"
        self._pending_iteration = 0  # iteration tag we are collecting chunks for
        self._seen: set[tuple[int, int]] = set()
        self._engine = None

        self.rows: dict[int, IterationRow] = {}
        self.losses: list[float] = []
        self.finished = False

    # -- wiring ---------------------------------------------------------------

    def start(self, conns: list[tuple[object, str]]) -> list[tuple[object, bytes]]:
        """Record connections (in configured address order) and emit REGISTERs."""
        out = []
        frame = encode_message(register_message(self.cfg.worker_id, self.digest))
        for conn, addr in conns:
            self._conns.append(conn)
            self._conn_addr[conn] = addr
            out.append((conn, frame))
        return out

    def _row(self, iteration: int) -> IterationRow:
        row = self.rows.get(iteration)
        if row is None:
            row = IterationRow(iteration=iteration)
            self.rows[iteration] = row
        return row

    # -- frame handling ---------------------------------------------------------

    def on_frame(self, conn, msg: Message) -> list[tuple[object, bytes]]:
        if msg.msg_type is MessageType.ERROR:
            raise WorkerAbortError(f"server error: {msg.payload.decode('utf-8', 'replace')}")
        if msg.msg_type is MessageType.REGISTER_ACK:
            self._handle_ack(conn, msg)
            return self._maybe_begin()
        if msg.msg_type is MessageType.MODEL_CHUNK:
            return self._handle_model_chunk(conn, msg)
        raise WorkerAbortError(f"unexpected {msg.msg_type.name} frame from server")

    def _handle_ack(self, conn, msg: Message) -> None:
        table = AssignmentTable.from_bytes(msg.payload)
        params = (table.chunk_bytes, table.worker_count, table.learning_rate, table.deterministic, table.average_gradients)
        if self._table_params is None:
            self._table_params = params
            self.chunk_bytes = table.chunk_bytes
            self.chunks = partition_model(self.spec, table.chunk_bytes)
            self._chunk_by_id = {c.chunk_id: c for c in self.chunks}
        elif self._table_params != params:
            raise WorkerAbortError("servers disagree on run parameters")
        if table.worker_count != self.cfg.worker_count:
            raise WorkerAbortError(
                f"server expects {table.worker_count} workers, configured {self.cfg.worker_count}"
            )
        for key_id, count in table.keys:
            if key_id >= self.spec.key_count or self.spec.element_counts[key_id] != count:
                raise WorkerAbortError(f"assignment table key {key_id} does not match the model")
        # route this server's chunks to our connections by listed address
        conn_by_addr = {self._conn_addr[c]: c for c in self._conns}
        table_chunks = [c for key_id, _ in table.keys for c in self._chunks_of_key(key_id)]
        if len(table_chunks) != len(table.chunk_endpoints):
            raise WorkerAbortError("assignment table chunk list does not tile its keys")
        for chunk, ordinal in zip(table_chunks, table.chunk_endpoints):
            addr = table.endpoints[ordinal]
            target = conn_by_addr.get(addr)
            if target is None:
                raise WorkerAbortError(f"assignment routes {chunk.chunk_id} to unknown endpoint {addr}")
            existing = self._route.get(chunk.chunk_id)
            if existing is not None and existing is not target:
                raise WorkerAbortError(f"conflicting routes for chunk {chunk.chunk_id}")
            self._route[chunk.chunk_id] = target
        self._acks.add(conn)

    def _chunks_of_key(self, key_id: int) -> list[ChunkDescriptor]:
        return [c for c in self.chunks if c.key_id == key_id]

    def _handle_model_chunk(self, conn, msg: Message) -> list[tuple[object, bytes]]:
        chunk = self._chunk_by_id.get((msg.key_id, msg.chunk_index))
        if chunk is None:
            raise WorkerAbortError(f"model chunk for unknown chunk ({msg.key_id}, {msg.chunk_index})")
        if msg.iteration != self._pending_iteration:
            raise WorkerAbortError(
                f"model chunk tagged {msg.iteration}, expected {self._pending_iteration}"
            )
        if chunk.chunk_id in self._seen:
            raise WorkerAbortError(f"duplicate model chunk {chunk.chunk_id}")
        values = bytes_to_floats(msg.payload)
        if len(values) != chunk.element_count:
            raise WorkerAbortError(f"model chunk {chunk.chunk_id} has wrong payload size")
        self.mirror[chunk.key_id][chunk.element_offset : chunk.element_offset + chunk.element_count] = values
        self._seen.add(chunk.chunk_id)
        if msg.iteration > 0:
            row = self._row(msg.iteration)
            row.bcast_bytes += len(msg.payload)
            row.header_bytes += 24
            row.chunks_completed += 1
        if self._phase == "registering":
            return self._maybe_begin()
        if len(self._seen) == len(self.chunks):
            return self._advance(msg.iteration)
        return []

    def _maybe_begin(self) -> list[tuple[object, bytes]]:
        if self._phase != "registering" or self._table_params is None:
            return []
        if len(self._acks) != len(self._conns):
            return []
        if len(self._route) != len(self.chunks):
            return []
        if len(self._seen) != len(self.chunks):
            return []
        self._phase = "running"
        return self._advance(0)

    def _advance(self, completed_iteration: int) -> list[tuple[object, bytes]]:
        """All chunks for ``completed_iteration`` are in; push the next round."""
        self._seen = set()
        if completed_iteration >= self.cfg.iters:
            self.finished = True
            fin = encode_message(
                Message(MessageType.FIN, worker_id=self.cfg.worker_id, iteration=self.cfg.iters)
            )
            return [(conn, fin) for conn in self._conns]
        self._pending_iteration = completed_iteration + 1
        return self._push_iteration(completed_iteration + 1)

    def _push_iteration(self, iteration: int) -> list[tuple[object, bytes]]:
        row = self._row(iteration)
        if self.cfg.mode is WorkerMode.LOGREG:
            if self._engine is None:
                self._engine = _LogRegEngine(self.cfg)
            flat = np.concatenate([self.mirror[k] for k in range(self.spec.key_count)])
            grad, loss = self._engine.gradient_and_loss(flat)
            row.loss = canonical_float(float(loss))
            self.losses.append(row.loss)
            payloads = []
            for chunk in self.chunks:
                start = self.key_offsets[chunk.key_id] + chunk.element_offset
                payloads.append((chunk, floats_to_bytes(grad[start : start + chunk.element_count])))
        else:
            if self._engine is None:
                self._engine = _ZeroEngine()
            payloads = [
                (chunk, self._engine.payload_bytes(chunk, iteration)) for chunk in self.chunks
            ]

        out = []
        for chunk, payload in payloads:
            data = encode_message(
                Message(
                    MessageType.PUSH_GRAD,
                    worker_id=self.cfg.worker_id,
                    iteration=iteration,
                    key_id=chunk.key_id,
                    chunk_index=chunk.chunk_index,
                    payload=payload,
                )
            )
            out.append((self._route[chunk.chunk_id], data))
            row.push_bytes += chunk.byte_size
            row.header_bytes += 24
        return out

    def result(self) -> WorkerResult:
        ordered = [self.rows[t] for t in sorted(self.rows)]
        return WorkerResult(
            worker_id=self.cfg.worker_id,
            mirror=self.mirror,
            rows=ordered,
            losses=list(self.losses),
        )


class WorkerDriver:
    """Single event loop for one worker over all of its connections."""

    def __init__(self, cfg: WorkerConfig, network: Optional[ChannelNetwork] = None):
        self.core = WorkerCore(cfg)
        self.cfg = cfg
        self._decoders: dict[object, FrameDecoder] = {}
        conns: list[tuple[object, str]] = []
        if network is None:
            if not all(is_tcp_address(a) for a in cfg.connect):
                raise InvalidConfigError("non host:port address requires an in-process network")
            self.poller = TcpPoller()
            for addr in cfg.connect:
                conn = tcp_connect(addr)
                self.poller.add_connection(conn)
                conns.append((conn, addr))
        else:
            self.poller = ChannelPoller()
            for addr in cfg.connect:
                conn = network.connect(addr, self.poller.hub)
                self.poller.add_connection(conn)
                conns.append((conn, addr))
        self._conns = [c for c, _ in conns]
        for conn, data in self.core.start(conns):
            conn.send(data)

    @property
    def finished(self) -> bool:
        return self.core.finished

    def pump(self, timeout: float = 0.0) -> bool:
        progress = False
        for kind, conn, extra in self.poller.poll(timeout):
            progress = True
            if kind == "data":
                for frame in self._decoders.setdefault(conn, FrameDecoder()).feed(extra):
                    for target, data in self.core.on_frame(conn, frame):
                        target.send(data)
            elif kind == "eof":
                if not self.core.finished:
                    raise WorkerAbortError("server closed the connection mid-run")
        return progress

    def close(self) -> None:
        for conn in self._conns:
            conn.close()
        closer = getattr(self.poller, "close", None)
        if closer:
            closer()


def run_worker(cfg: WorkerConfig, network: Optional[ChannelNetwork] = None, abort=None) -> WorkerResult:
    """Run one worker to completion; raises WorkerAbortError on any fault."""
    driver = WorkerDriver(cfg, network)
    try:
        while not driver.finished:
            if abort is not None and abort.is_set():
                raise WorkerAbortError("aborted by harness")
            driver.pump(timeout=0.2)
        # drain any trailing frames already in flight (none expected)
        driver.pump(timeout=0.0)
    finally:
        driver.close()
    result = driver.core.result()
    if cfg.metrics_path:
        from .metrics import MetricsReport, emit_csv

        emit_csv(MetricsReport(rows=result.rows), cfg.metrics_path)
    return result
