"""Keyed parameter space and fixed-size chunking.

The server's unit of storage is a key: one flat array of 32-bit floats,
identified by a dense integer id (0..K-1). For transfer, aggregation and
core placement every key is cut into chunks of at most ``chunk_bytes``
bytes. Chunks never span keys; within a key they tile it exactly, so all
chunks are full-size except possibly the last one of each key.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import ChunkLookupError, InvalidChunkSizeError, InvalidSpecError, NumericFaultError

ELEMENT_WIDTH = 4  # bytes per parameter: float32 in memory and on the wire
DEFAULT_CHUNK_BYTES = 32768


@dataclass(frozen=True)
class ModelSpec:
    """Ordered key table; ``element_counts[k]`` is the length of key k."""

    element_counts: tuple[int, ...]
    element_width: int = ELEMENT_WIDTH

    @property
    def key_count(self) -> int:
        return len(self.element_counts)

    @property
    def total_elements(self) -> int:
        return sum(self.element_counts)

    @property
    def total_bytes(self) -> int:
        return self.total_elements * self.element_width

    def key_bytes(self, key_id: int) -> int:
        return self.element_counts[key_id] * self.element_width

    def key_flat_offsets(self) -> tuple[int, ...]:
        """Element offset of each key inside the flattened model vector."""
        offsets = []
        pos = 0
        for count in self.element_counts:
            offsets.append(pos)
            pos += count
        return tuple(offsets)

    def spec_hash(self) -> bytes:
        """32-byte digest used to detect spec disagreement at registration."""
        h = hashlib.sha256()
        h.update(b"chunkps.model.v1")
        h.update(struct.pack("<II", self.key_count, self.element_width))
        h.update(struct.pack("<%dI" % self.key_count, *self.element_counts))
        return h.digest()


def build_model_spec(key_element_counts: Iterable[int]) -> ModelSpec:
    """Build a spec from per-key element counts, numbering keys in order."""
    counts = tuple(int(c) for c in key_element_counts)
    if not counts:
        raise InvalidSpecError("model must have at least one key")
    for key_id, count in enumerate(counts):
        if count < 1:
            raise InvalidSpecError(f"key {key_id} has non-positive element count {count}")
    return ModelSpec(element_counts=counts)


@dataclass(frozen=True)
class ChunkDescriptor:
    """One chunk of one key: a contiguous element range and its byte size."""

    key_id: int
    chunk_index: int
    element_offset: int
    element_count: int
    byte_size: int

    def __post_init__(self):
        if self.byte_size != self.element_count * ELEMENT_WIDTH:
            raise InvalidSpecError("chunk byte_size must equal element_count * 4")

    @property
    def chunk_id(self) -> tuple[int, int]:
        return (self.key_id, self.chunk_index)


def partition_model(spec: ModelSpec, chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> list[ChunkDescriptor]:
    """Cut every key into chunks of at most ``chunk_bytes`` bytes.

    Descriptors come back in ascending (key_id, chunk_index) order, which is
    the canonical chunk order used everywhere else (wire tables, assignment,
    broadcast). Deterministic: equal inputs give equal lists.
    """
    if chunk_bytes < ELEMENT_WIDTH or chunk_bytes % ELEMENT_WIDTH != 0:
        raise InvalidChunkSizeError(
            f"chunk_bytes must be a positive multiple of {ELEMENT_WIDTH}, got {chunk_bytes}"
        )
    step = chunk_bytes // ELEMENT_WIDTH
    chunks: list[ChunkDescriptor] = []
    for key_id, count in enumerate(spec.element_counts):
        index = 0
        for offset in range(0, count, step):
            take = min(step, count - offset)
            chunks.append(
                ChunkDescriptor(
                    key_id=key_id,
                    chunk_index=index,
                    element_offset=offset,
                    element_count=take,
                    byte_size=take * ELEMENT_WIDTH,
                )
            )
            index += 1
    return chunks


class ModelStore:
    """Mutable float32 parameter arrays, one per owned key.

    A store may hold a subset of the spec's keys (sharded deployments own a
    key range). ``iteration`` counts fully applied update rounds.
    """

    __slots__ = ("spec", "arrays", "iteration")

    def __init__(self, spec: ModelSpec, arrays: dict[int, np.ndarray], iteration: int = 0):
        self.spec = spec
        self.arrays = arrays
        self.iteration = iteration
        for key_id, arr in arrays.items():
            if arr.shape != (spec.element_counts[key_id],):
                raise InvalidSpecError(f"key {key_id} array length does not match spec")

    @classmethod
    def zeros(cls, spec: ModelSpec, keys: Optional[Iterable[int]] = None) -> "ModelStore":
        key_ids = list(keys) if keys is not None else list(range(spec.key_count))
        arrays = {k: np.zeros(spec.element_counts[k], dtype=np.float32) for k in key_ids}
        return cls(spec, arrays)

    @property
    def key_ids(self) -> list[int]:
        return sorted(self.arrays)

    def key(self, key_id: int) -> np.ndarray:
        try:
            return self.arrays[key_id]
        except KeyError:
            raise ChunkLookupError(f"key {key_id} not held by this store") from None

    def chunk_view(self, chunk: ChunkDescriptor) -> np.ndarray:
        """Writable view of the chunk's element range."""
        arr = self.key(chunk.key_id)
        return arr[chunk.element_offset : chunk.element_offset + chunk.element_count]

    def flat(self) -> np.ndarray:
        """Copy of all held keys concatenated in ascending key order."""
        if not self.arrays:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([self.arrays[k] for k in self.key_ids])

    def check_finite(self) -> None:
        for key_id in self.key_ids:
            if not np.isfinite(self.arrays[key_id]).all():
                raise NumericFaultError(f"non-finite values in key {key_id}")
