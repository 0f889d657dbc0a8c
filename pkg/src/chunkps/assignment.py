"""Balanced chunk-to-core placement and contiguous key-range sharding.

Placement is greedy longest-processing-time: chunks sorted by byte size
descending (ties by ascending (key_id, chunk_index)) are placed one by
one on the currently least-loaded core (ties to the lowest core index).
That keeps the spread between the heaviest and lightest core at or below
one chunk.

Cores are organized into contiguous groups (stand-ins for locality
domains) and endpoints are bound round-robin to cores within each group,
so a chunk's core and serving endpoint always live in the same group.
The whole mapping is a pure function of its inputs: identical across
iterations and across runs.
"""

from __future__ import annotations

import bisect
import heapq
from dataclasses import dataclass
from typing import Optional

from .errors import ChunkLookupError, InvalidConfigError
from .model import ChunkDescriptor, ModelSpec


@dataclass(frozen=True)
class CoreLoad:
    chunk_count: int
    byte_load: int


class ChunkAssignment:
    """Immutable chunk -> (core_shard, core_group, endpoint) mapping."""

    def __init__(
        self,
        chunks: list[ChunkDescriptor],
        core_ids: list[int],
        core_count: int,
        group_count: int,
        endpoint_count: int,
    ):
        self.chunks = tuple(chunks)
        self.core_ids = tuple(core_ids)
        self.core_count = core_count
        self.group_count = group_count
        self.endpoint_count = endpoint_count
        self.cores_per_group = core_count // group_count
        self.endpoints_per_group = endpoint_count // group_count
        self._pos = {c.chunk_id: i for i, c in enumerate(self.chunks)}

    def group_of_core(self, core: int) -> int:
        return core // self.cores_per_group

    def endpoint_of_core(self, core: int) -> int:
        group = self.group_of_core(core)
        local = core % self.cores_per_group
        return group * self.endpoints_per_group + (local % self.endpoints_per_group)

    def _position(self, key_id: int, chunk_index: int) -> int:
        try:
            return self._pos[(key_id, chunk_index)]
        except KeyError:
            raise ChunkLookupError(f"chunk ({key_id}, {chunk_index}) not in assignment") from None

    def core_for_chunk(self, key_id: int, chunk_index: int) -> int:
        return self.core_ids[self._position(key_id, chunk_index)]

    def endpoint_for_chunk(self, key_id: int, chunk_index: int) -> int:
        return self.endpoint_of_core(self.core_for_chunk(key_id, chunk_index))

    def group_for_chunk(self, key_id: int, chunk_index: int) -> int:
        return self.group_of_core(self.core_for_chunk(key_id, chunk_index))

    def chunk_endpoints(self) -> tuple[int, ...]:
        """Owning endpoint per chunk, in canonical chunk order."""
        return tuple(self.endpoint_of_core(c) for c in self.core_ids)

    def chunks_for_core(self, core: int) -> list[ChunkDescriptor]:
        return [c for c, owner in zip(self.chunks, self.core_ids) if owner == core]

    def load_report(self) -> list[CoreLoad]:
        counts = [0] * self.core_count
        loads = [0] * self.core_count
        for chunk, core in zip(self.chunks, self.core_ids):
            counts[core] += 1
            loads[core] += chunk.byte_size
        return [CoreLoad(chunk_count=c, byte_load=b) for c, b in zip(counts, loads)]


def assign_chunks(
    chunks: list[ChunkDescriptor],
    core_count: int,
    group_count: int = 1,
    endpoint_count: int = 1,
) -> ChunkAssignment:
    """Place chunks on cores by greedy LPT; bind endpoints within groups."""
    if group_count < 1 or core_count < group_count:
        raise InvalidConfigError(f"need core_count >= group_count >= 1, got {core_count}/{group_count}")
    if endpoint_count < 1:
        raise InvalidConfigError("endpoint_count must be >= 1")
    if core_count % group_count != 0:
        raise InvalidConfigError(f"core_count {core_count} not divisible by group_count {group_count}")
    if endpoint_count % group_count != 0:
        raise InvalidConfigError(
            f"endpoint_count {endpoint_count} not divisible by group_count {group_count}"
        )

    order = sorted(range(len(chunks)), key=lambda i: (-chunks[i].byte_size, chunks[i].chunk_id))
    heap = [(0, core) for core in range(core_count)]  # (byte load, core index)
    heapq.heapify(heap)
    core_ids = [0] * len(chunks)
    for i in order:
        load, core = heapq.heappop(heap)
        core_ids[i] = core
        heapq.heappush(heap, (load + chunks[i].byte_size, core))
    return ChunkAssignment(list(chunks), core_ids, core_count, group_count, endpoint_count)


def _reachable(prefix: list[int], parts: int, floor: int, cap: int) -> list[list[bool]]:
    """layers[p][j]: keys [0, j) split into p contiguous parts, loads in [floor, cap]."""
    key_count = len(prefix) - 1
    cur = [False] * (key_count + 1)
    cur[0] = True
    layers = [cur]
    for _ in range(parts):
        cum = [0]
        for flag in cur:
            cum.append(cum[-1] + flag)
        nxt = [False] * (key_count + 1)
        for j in range(1, key_count + 1):
            lo = bisect.bisect_left(prefix, prefix[j] - cap, 0, j)
            hi = bisect.bisect_right(prefix, prefix[j] - floor, 0, j) - 1
            if lo <= hi and cum[hi + 1] - cum[lo] > 0:
                nxt[j] = True
        layers.append(nxt)
        cur = nxt
    return layers


def _cut_ranges(prefix: list[int], parts: int, floor: int, cap: int) -> Optional[list[range]]:
    """Deterministic partition with every load in [floor, cap], or None."""
    key_count = len(prefix) - 1
    layers = _reachable(prefix, parts, floor, cap)
    if not layers[parts][key_count]:
        return None
    # suffix feasibility: back[q][j] means keys [j, K) split into q in-range parts
    total = prefix[key_count]
    rev_prefix = [total - prefix[key_count - i] for i in range(key_count + 1)]
    rev_layers = _reachable(rev_prefix, parts, floor, cap)
    ranges: list[range] = []
    pos = 0
    for p in range(parts, 0, -1):
        if p == 1:
            ranges.append(range(pos, key_count))
            break
        for j in range(pos + 1, key_count):
            load = prefix[j] - prefix[pos]
            if load < floor:
                continue
            if load > cap:
                return None
            if rev_layers[p - 1][key_count - j]:
                ranges.append(range(pos, j))
                pos = j
                break
        else:
            return None
    return ranges


def shard_keyspace(spec: ModelSpec, shard_count: int) -> list[range]:
    """Split the keyspace into contiguous ranges balanced by total bytes.

    Keys stay in id order; the cut points are chosen so the heaviest shard
    is as light as possible, and among such partitions the byte spread
    (max shard bytes - min shard bytes) is minimized, searching caps up to
    one max-key above the optimum. Deterministic: cuts are placed at the
    earliest feasible positions.
    """
    if shard_count < 1:
        raise InvalidConfigError("shard_count must be >= 1")
    if shard_count > spec.key_count:
        raise InvalidConfigError(
            f"shard_count {shard_count} exceeds key count {spec.key_count}"
        )
    key_count = spec.key_count
    if shard_count == 1:
        return [range(0, key_count)]
    sizes = [spec.key_bytes(k) for k in range(key_count)]
    prefix = [0]
    for size in sizes:
        prefix.append(prefix[-1] + size)
    total = prefix[-1]
    max_key = max(sizes)

    def feasible(floor: int, cap: int) -> bool:
        return _reachable(prefix, shard_count, floor, cap)[shard_count][key_count]

    lo, hi = max_key, total
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(0, mid):
            hi = mid
        else:
            lo = mid + 1
    min_cap = lo

    def best_floor(cap: int) -> int:
        flo, fhi = 0, total // shard_count
        while flo < fhi:
            mid = (flo + fhi + 1) // 2
            if feasible(mid, cap):
                flo = mid
            else:
                fhi = mid - 1
        return flo

    best = (min_cap - best_floor(min_cap), min_cap)  # (spread, cap)
    if best[0] > max_key and key_count <= 64:
        # raising the cap can shrink the spread; sweep achievable caps within
        # one max key of the optimum, pruned by the mean-load lower bound
        candidates = sorted(
            {
                prefix[j] - prefix[i]
                for i in range(key_count)
                for j in range(i + 1, key_count + 1)
                if min_cap < prefix[j] - prefix[i] <= min_cap + max_key
            }
        )
        mean_floor = total // shard_count
        for cap in candidates:
            if cap - mean_floor >= best[0]:
                break
            spread = cap - best_floor(cap)
            if spread < best[0]:
                best = (spread, cap)
    cap = best[1]
    ranges = _cut_ranges(prefix, shard_count, cap - best[0], cap)
    assert ranges is not None
    return ranges
