"""Per-chunk gradient accumulation and the SGD step.

Two aggregation modes with one contract:

* FAST adds each payload into the accumulator as it arrives. The result
  depends on arrival order (float32 addition is not associative), which
  is fine for throughput runs.
* DETERMINISTIC stages every worker's payload and materializes the sum
  only at completion, as a left fold in ascending worker id order in
  32-bit arithmetic. Any arrival order of the same payload set gives a
  bitwise-identical result, which is what the oracle tests key on.

A buffer is owned by exactly one core shard; nothing here locks.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    DuplicatePushError,
    IncompleteAggregationError,
    InvalidConfigError,
    NumericFaultError,
    ProtocolError,
    StaleIterationError,
)
from .model import ChunkDescriptor


class AggregationMode(Enum):
    FAST = "fast"
    DETERMINISTIC = "det"


class PushStatus(Enum):
    PARTIAL = "partial"
    COMPLETE = "complete"


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.05
    average_gradients: bool = True

    def __post_init__(self):
        lr = float(self.learning_rate)
        if not np.isfinite(lr) or lr <= 0.0:
            raise InvalidConfigError(f"learning_rate must be finite and positive, got {lr}")

    @property
    def lr32(self) -> np.float32:
        return np.float32(self.learning_rate)


class AggregationBuffer:
    """Accumulation state for one chunk within one iteration."""

    __slots__ = ("chunk", "worker_count", "mode", "iteration", "contributed", "accumulator", "staging", "completed_epochs")

    def __init__(
        self,
        chunk: ChunkDescriptor,
        worker_count: int,
        mode: AggregationMode = AggregationMode.DETERMINISTIC,
        iteration: int = 1,
    ):
        if worker_count < 1:
            raise InvalidConfigError("worker_count must be >= 1")
        self.chunk = chunk
        self.worker_count = worker_count
        self.mode = mode
        self.iteration = iteration
        self.contributed = 0  # bitmask over worker ids
        self.accumulator = np.zeros(chunk.element_count, dtype=np.float32)
        self.staging: dict[int, np.ndarray] = {}
        self.completed_epochs = 0

    @property
    def complete(self) -> bool:
        return self.contributed.bit_count() == self.worker_count

    @property
    def contributed_count(self) -> int:
        return self.contributed.bit_count()

    def accept_gradient(self, worker_id: int, payload: np.ndarray) -> PushStatus:
        """Record one worker's contribution for the current iteration."""
        if len(payload) != self.chunk.element_count:
            raise ProtocolError(
                f"payload length {len(payload)} != chunk element count {self.chunk.element_count}"
            )
        if not 0 <= worker_id < self.worker_count:
            raise ProtocolError(f"worker_id {worker_id} out of range [0, {self.worker_count})")
        bit = 1 << worker_id
        if self.contributed & bit:
            raise DuplicatePushError(
                f"worker {worker_id} already pushed chunk {self.chunk.chunk_id} at iteration {self.iteration}"
            )
        self.contributed |= bit
        if self.mode is AggregationMode.FAST:
            self.accumulator += payload
        else:
            self.staging[worker_id] = payload
        return PushStatus.COMPLETE if self.complete else PushStatus.PARTIAL

    def check_iteration(self, iteration: int) -> None:
        if iteration != self.iteration:
            raise StaleIterationError(
                f"push tagged iteration {iteration}, buffer at {self.iteration} "
                f"for chunk {self.chunk.chunk_id}"
            )

    def finalize_sum(self) -> np.ndarray:
        """Sum of all contributions; DETERMINISTIC folds by ascending worker id."""
        if not self.complete:
            raise IncompleteAggregationError(
                f"chunk {self.chunk.chunk_id}: only {self.contributed_count} of {self.worker_count} pushes"
            )
        if self.mode is AggregationMode.FAST:
            return self.accumulator
        acc = self.staging[0].astype(np.float32, copy=True)
        for worker_id in range(1, self.worker_count):
            acc = acc + self.staging[worker_id]
        return acc

    def reset_for_iteration(self, next_iteration: int) -> None:
        if not self.complete:
            raise IncompleteAggregationError(
                f"cannot reset chunk {self.chunk.chunk_id} while partial"
            )
        self.contributed = 0
        self.staging = {}
        self.accumulator = np.zeros(self.chunk.element_count, dtype=np.float32)
        self.completed_epochs += 1
        self.iteration = next_iteration


def apply_sgd(
    weights: np.ndarray,
    grad_sum: np.ndarray,
    cfg: OptimizerConfig,
    worker_count: int,
    iteration: int = 0,
) -> np.ndarray:
    """One SGD step in 32-bit arithmetic; returns the updated weights.

    grad_sum is divided by worker_count first when averaging is on, so the
    effective step does not scale with the worker count.
    """
    if worker_count < 1:
        raise InvalidConfigError("worker_count must be >= 1")
    if weights.shape != grad_sum.shape:
        raise ProtocolError(f"weights shape {weights.shape} != grad shape {grad_sum.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.average_gradients:
            grad = grad_sum / np.float32(worker_count)
        else:
            grad = grad_sum
        updated = weights - cfg.lr32 * grad
    if not np.isfinite(updated).all():
        raise NumericFaultError(f"non-finite weights after SGD step at iteration {iteration}")
    return updated
