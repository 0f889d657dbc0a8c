"""Emulator for hierarchical in-rack gradient aggregation on integer switches.

The modeled switch can only add integers, in a fixed-width accumulator,
over a small region of each packet, with a bounded number of concurrent
in-flight aggregations. Workers quantize float gradients to fixed point
(round-to-nearest-even at a power-of-two scale); each rack's switch sums
its workers' packets fragment by fragment and forwards one aggregated
stream upward; the root sums the rack streams, dequantizes and (when
averaging) divides by the total worker count.

This is a pure computational model: arithmetic and per-link byte
accounting are exact, timing is out of scope. Summation order is fixed -
ascending worker id within a rack, ascending rack index at the root - and
overflow is detected exactly at each partial step of that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    InvalidConfigError,
    ProtocolError,
    QuantizationRangeError,
    SwitchOverflowError,
)
from .aggregation import OptimizerConfig


@dataclass(frozen=True)
class SwitchModel:
    scale: int = 65536
    accumulator_width: int = 32
    region_bytes: int = 1024
    storage_slots: int = 64

    def __post_init__(self):
        if self.scale < 2 or self.scale & (self.scale - 1) != 0:
            raise InvalidConfigError(f"scale must be a power of two >= 2, got {self.scale}")
        if self.accumulator_width not in (32, 64):
            raise InvalidConfigError("accumulator_width must be 32 or 64")
        if self.region_bytes < 4 or self.region_bytes % 4 != 0:
            raise InvalidConfigError("region_bytes must be a positive multiple of 4")
        if self.storage_slots < 1:
            raise InvalidConfigError("storage_slots must be >= 1")

    @property
    def region_elements(self) -> int:
        return self.region_bytes // 4

    @property
    def accumulator_max(self) -> int:
        return (1 << (self.accumulator_width - 1)) - 1

    @property
    def accumulator_min(self) -> int:
        return -(1 << (self.accumulator_width - 1))


@dataclass(frozen=True)
class Topology:
    """Racks of worker ids under one root; ids must cover 0..N-1 exactly."""

    racks: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.racks:
            raise InvalidConfigError("topology needs at least one rack")
        seen: set[int] = set()
        for rack in self.racks:
            if not rack:
                raise InvalidConfigError("every rack needs at least one worker")
            for worker in rack:
                if worker in seen:
                    raise InvalidConfigError(f"worker {worker} appears in two racks")
                seen.add(worker)
        if seen != set(range(len(seen))):
            raise InvalidConfigError("worker ids must be dense 0..N-1")

    @classmethod
    def uniform(cls, rack_count: int, workers_per_rack: int) -> "Topology":
        if rack_count < 1 or workers_per_rack < 1:
            raise InvalidConfigError("need at least one rack and one worker per rack")
        racks = tuple(
            tuple(range(r * workers_per_rack, (r + 1) * workers_per_rack))
            for r in range(rack_count)
        )
        return cls(racks=racks)

    @property
    def rack_count(self) -> int:
        return len(self.racks)

    @property
    def worker_count(self) -> int:
        return sum(len(r) for r in self.racks)


@dataclass
class TrafficReport:
    """Exact payload bytes per link class for one reduced chunk."""

    worker_to_tor_bytes: int = 0
    tor_to_root_bytes: int = 0
    root_to_tor_bytes: int = 0
    tor_to_worker_bytes: int = 0
    per_rack_up_bytes: list[int] = field(default_factory=list)
    per_rack_down_bytes: list[int] = field(default_factory=list)
    fragments: int = 0
    fragment_waves: int = 0  # ceil(fragments / storage_slots): queueing, not drops

    @property
    def cross_rack_up_bytes(self) -> int:
        return self.tor_to_root_bytes

    def add(self, other: "TrafficReport") -> None:
        self.worker_to_tor_bytes += other.worker_to_tor_bytes
        self.tor_to_root_bytes += other.tor_to_root_bytes
        self.root_to_tor_bytes += other.root_to_tor_bytes
        self.tor_to_worker_bytes += other.tor_to_worker_bytes
        self.fragments += other.fragments
        self.fragment_waves += other.fragment_waves
        if not self.per_rack_up_bytes:
            self.per_rack_up_bytes = [0] * len(other.per_rack_up_bytes)
            self.per_rack_down_bytes = [0] * len(other.per_rack_down_bytes)
        for r, b in enumerate(other.per_rack_up_bytes):
            self.per_rack_up_bytes[r] += b
        for r, b in enumerate(other.per_rack_down_bytes):
            self.per_rack_down_bytes[r] += b


def quantize(values: np.ndarray, scale: int, magnitude_limit: Optional[int] = None) -> np.ndarray:
    """Round values * scale to nearest even; int64 output.

    With ``magnitude_limit`` set, any element whose quantized magnitude
    exceeds it raises QuantizationRangeError: too close to overflowing a
    downstream accumulator, and silent saturation is not an option.
    """
    if scale < 2:
        raise InvalidConfigError("scale must be >= 2")
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise QuantizationRangeError("cannot quantize non-finite values")
    q = np.rint(arr * scale)
    if np.abs(q).max(initial=0.0) >= 2**62:
        raise QuantizationRangeError("quantized magnitude exceeds 62-bit safety bound")
    q = q.astype(np.int64)
    if magnitude_limit is not None:
        worst = int(np.abs(q).max(initial=0))
        if worst > magnitude_limit:
            raise QuantizationRangeError(
                f"quantized magnitude {worst} exceeds per-worker limit {magnitude_limit}"
            )
    return q


def dequantize(q: np.ndarray, scale: int) -> np.ndarray:
    """Back to floats (float64); inverse of quantize up to 1/(2*scale)."""
    return np.asarray(q, dtype=np.float64) / scale


def _check_width(packet: np.ndarray, model: SwitchModel) -> np.ndarray:
    arr = np.asarray(packet, dtype=np.int64)
    if arr.size and (arr.max(initial=model.accumulator_min) > model.accumulator_max
                     or arr.min(initial=model.accumulator_max) < model.accumulator_min):
        raise ProtocolError(f"packet value outside {model.accumulator_width}-bit range")
    return arr


def switch_aggregate(packets: Sequence[np.ndarray], model: SwitchModel) -> np.ndarray:
    """Elementwise integer sum of equal-length packets, width-limited.

    Packets are added in list order; overflow is detected exactly at every
    partial step. More packets than storage slots aggregate in sequential
    waves (queueing semantics), which leaves the partial-sum order - and
    therefore overflow behavior - unchanged.
    """
    if not packets:
        raise InvalidConfigError("nothing to aggregate")
    length = len(packets[0])
    if length > model.region_elements:
        raise ProtocolError(
            f"packet of {length} elements exceeds region of {model.region_elements}"
        )
    arrs = []
    for p in packets:
        if len(p) != length:
            raise ProtocolError("mixed packet lengths in one aggregation")
        arrs.append(_check_width(p, model))
    acc = arrs[0].copy()
    if model.accumulator_width == 64:
        with np.errstate(over="ignore"):
            for step, p in enumerate(arrs[1:], start=2):
                summed = acc + p
                overflowed = ((acc >= 0) == (p >= 0)) & ((summed >= 0) != (acc >= 0))
                if overflowed.any():
                    raise SwitchOverflowError(f"64-bit accumulator overflow at packet {step}")
                acc = summed
    else:
        for step, p in enumerate(arrs[1:], start=2):
            acc = acc + p  # exact in int64 for 32-bit inputs
            if acc.max(initial=model.accumulator_min) > model.accumulator_max or acc.min(
                initial=model.accumulator_max
            ) < model.accumulator_min:
                raise SwitchOverflowError(f"32-bit accumulator overflow at packet {step}")
    return acc


def _fragment_bounds(length: int, region_elements: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + region_elements, length)) for lo in range(0, length, region_elements)]


def hierarchical_reduce(
    topology: Topology,
    payloads: Sequence[np.ndarray],
    model: SwitchModel,
    cfg: OptimizerConfig,
) -> tuple[np.ndarray, TrafficReport]:
    """Quantize, aggregate per rack, reduce rack streams at the root.

    ``payloads[w]`` is worker w's float chunk. Returns the dequantized
    aggregate (the mean when cfg.average_gradients, else the sum divided
    only by the scale) and exact per-link byte accounting, counting 4
    bytes per element on every hop.
    """
    worker_count = topology.worker_count
    if len(payloads) != worker_count:
        raise InvalidConfigError(f"expected {worker_count} payloads, got {len(payloads)}")
    length = len(payloads[0])
    if any(len(p) != length for p in payloads):
        raise InvalidConfigError("all worker payloads must have equal length")

    limit = model.accumulator_max // worker_count
    quantized = [quantize(p, model.scale, magnitude_limit=limit) for p in payloads]

    chunk_bytes = length * 4
    bounds = _fragment_bounds(length, model.region_elements)
    report = TrafficReport(
        per_rack_up_bytes=[0] * topology.rack_count,
        per_rack_down_bytes=[0] * topology.rack_count,
        fragments=len(bounds) * (topology.rack_count + 1),
        fragment_waves=-(-len(bounds) // model.storage_slots) * (topology.rack_count + 1),
    )

    rack_streams: list[np.ndarray] = []
    for r, rack in enumerate(topology.racks):
        stream = np.empty(length, dtype=np.int64)
        for lo, hi in bounds:
            packets = [quantized[w][lo:hi] for w in sorted(rack)]
            stream[lo:hi] = switch_aggregate(packets, model)
        rack_streams.append(stream)
        report.worker_to_tor_bytes += len(rack) * chunk_bytes
        report.per_rack_up_bytes[r] = chunk_bytes
        report.per_rack_down_bytes[r] = chunk_bytes
    report.tor_to_root_bytes = topology.rack_count * chunk_bytes

    root = np.empty(length, dtype=np.int64)
    for lo, hi in bounds:
        root[lo:hi] = switch_aggregate([s[lo:hi] for s in rack_streams], model)

    report.root_to_tor_bytes = topology.rack_count * chunk_bytes
    report.tor_to_worker_bytes = worker_count * chunk_bytes

    out = dequantize(root, model.scale)
    if cfg.average_gradients:
        out = out / worker_count
    return out, report


def traffic_compare(topology: Topology, model_bytes: int, worker_count: int) -> tuple[int, int]:
    """Cross-rack (root link) bytes per iteration: flat PS vs hierarchical.

    Flat: every worker's gradient up plus its model copy down crosses the
    root, 2 * model_bytes * worker_count. Hierarchical: one aggregated
    stream up and one multicast copy down per rack, 2 * model_bytes *
    rack_count.
    """
    if model_bytes < 0:
        raise InvalidConfigError("model_bytes must be >= 0")
    if topology.worker_count != worker_count:
        raise InvalidConfigError(
            f"topology holds {topology.worker_count} workers, caller says {worker_count}"
        )
    flat = 2 * model_bytes * worker_count
    hier = 2 * model_bytes * topology.rack_count
    return flat, hier


def simulate(
    racks: int,
    workers_per_rack: int,
    model_bytes: int,
    chunk_bytes: int = 32768,
    scale: int = 65536,
    region_bytes: int = 1024,
    acc_width: int = 32,
    seed: int = 1,
    out=None,
) -> dict[str, float]:
    """Reduce a whole synthetic model chunk by chunk; report traffic and error.

    Each worker contributes uniform random gradients in [-1, 1). The summary
    compares hierarchical against flat cross-rack bytes and records the worst
    per-element deviation of the dequantized mean from the exact float64 mean.
    When ``out`` is given the summary is also written as metric,value CSV rows.
    """
    from .model import build_model_spec, partition_model

    if model_bytes < 4 or model_bytes % 4 != 0:
        raise InvalidConfigError("model-bytes must be a positive multiple of 4")
    topology = Topology.uniform(racks, workers_per_rack)
    model = SwitchModel(
        scale=scale,
        accumulator_width=acc_width,
        region_bytes=region_bytes,
        storage_slots=64,
    )
    cfg = OptimizerConfig(learning_rate=1.0, average_gradients=True)
    spec = build_model_spec([model_bytes // 4])
    chunks = partition_model(spec, chunk_bytes)
    rng = np.random.default_rng(seed)
    worker_count = topology.worker_count

    total = TrafficReport(
        per_rack_up_bytes=[0] * racks, per_rack_down_bytes=[0] * racks
    )
    max_err = 0.0
    for chunk in chunks:
        payloads = [
            rng.uniform(-1.0, 1.0, chunk.element_count).astype(np.float32)
            for _ in range(worker_count)
        ]
        reduced, report = hierarchical_reduce(topology, payloads, model, cfg)
        total.add(report)
        exact = np.mean(np.stack([p.astype(np.float64) for p in payloads]), axis=0)
        max_err = max(max_err, float(np.abs(reduced - exact).max()))

    flat, hier = traffic_compare(topology, model_bytes, worker_count)
    summary = {
        "racks": float(racks),
        "workers": float(worker_count),
        "model_bytes": float(model_bytes),
        "chunks": float(len(chunks)),
        "fragments": float(total.fragments),
        "fragment_waves": float(total.fragment_waves),
        "worker_to_tor_bytes": float(total.worker_to_tor_bytes),
        "tor_to_root_bytes": float(total.tor_to_root_bytes),
        "root_to_tor_bytes": float(total.root_to_tor_bytes),
        "tor_to_worker_bytes": float(total.tor_to_worker_bytes),
        "flat_cross_rack_bytes": float(flat),
        "hier_cross_rack_bytes": float(hier),
        "max_abs_error": max_err,
        "error_bound": 1.0 / (2.0 * scale) + worker_count * float(np.finfo(np.float64).eps),
    }
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write("metric,value\n")
            for key, value in summary.items():
                fh.write(f"{key},{value:.9g}\n")
    return summary
