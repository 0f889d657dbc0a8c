"""Binary framing for all server/worker traffic.

Every frame is a constant 24-byte header followed by the payload. All
integers are little-endian; network byte order is NOT used.

    offset  size  field
    ------  ----  -----------------------------
    0       4     magic = 0x50485542
    4       1     version = 1
    5       1     msg_type
    6       2     worker_id
    8       4     iteration
    12      4     key_id
    16      4     chunk_index
    20      4     payload_len
    24      n     payload (n = payload_len)

Payload contents by message type:

    REGISTER      32-byte SHA-256 digest of the model spec
    REGISTER_ACK  serialized AssignmentTable (layout below)
    PUSH_GRAD     packed little-endian float32 chunk data
    MODEL_CHUNK   packed little-endian float32 chunk data
    FIN           empty
    ERROR         UTF-8 reason string

The fixed header keeps metadata overhead for a full 32 KiB chunk frame at
24 / 32792 < 0.1% of bytes on the wire.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

from .errors import ProtocolError
from .model import ELEMENT_WIDTH

MAGIC = 0x50485542
VERSION = 1
HEADER_FMT = "<IBBHIIII"
HEADER_SIZE = struct.calcsize(HEADER_FMT)  # 24
MAX_PAYLOAD = 1 << 28  # sanity bound for streaming reassembly, not a wire limit

_WIRE_FLOAT = np.dtype("<f4")


class MessageType(IntEnum):
    REGISTER = 1
    REGISTER_ACK = 2
    PUSH_GRAD = 3
    MODEL_CHUNK = 4
    FIN = 5
    ERROR = 6


_TYPE_BY_VALUE = {member.value: member for member in MessageType}


@dataclass(frozen=True)
class Message:
    msg_type: MessageType
    worker_id: int = 0
    iteration: int = 0
    key_id: int = 0
    chunk_index: int = 0
    payload: bytes = b""


def floats_to_bytes(values: np.ndarray) -> bytes:
    """Pack a float32 array as little-endian bytes."""
    return np.ascontiguousarray(values, dtype=_WIRE_FLOAT).tobytes()


def bytes_to_floats(payload: bytes) -> np.ndarray:
    """View wire bytes as a read-only float32 array (no copy on LE hosts)."""
    if len(payload) % ELEMENT_WIDTH != 0:
        raise ProtocolError(f"float payload length {len(payload)} not a multiple of {ELEMENT_WIDTH}")
    return np.frombuffer(payload, dtype=_WIRE_FLOAT).astype(np.float32, copy=False)


def encode_message(m: Message) -> bytes:
    """Serialize one message; total size is 24 + len(payload)."""
    try:
        header = struct.pack(
            HEADER_FMT,
            MAGIC,
            VERSION,
            int(m.msg_type),
            m.worker_id,
            m.iteration,
            m.key_id,
            m.chunk_index,
            len(m.payload),
        )
    except struct.error as exc:
        raise ProtocolError(f"message field out of range: {exc}") from None
    return header + m.payload


def decode_message(buf, offset: int = 0) -> Optional[tuple[Message, int]]:
    """Decode one message starting at ``offset``.

    Returns (message, end_offset), or None when more bytes are needed
    (short header or truncated payload). Raises ProtocolError for bad
    magic, unknown version or message type.
    """
    view = memoryview(buf)
    if len(view) - offset < HEADER_SIZE:
        return None
    magic, version, msg_type, worker_id, iteration, key_id, chunk_index, payload_len = struct.unpack_from(
        HEADER_FMT, view, offset
    )
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise ProtocolError(f"unknown protocol version {version}")
    mtype = _TYPE_BY_VALUE.get(msg_type)
    if mtype is None:
        raise ProtocolError(f"unknown message type {msg_type}")
    if payload_len > MAX_PAYLOAD:
        raise ProtocolError(f"payload_len {payload_len} exceeds sanity bound {MAX_PAYLOAD}")
    end = offset + HEADER_SIZE + payload_len
    if len(view) < end:
        return None
    payload = bytes(view[offset + HEADER_SIZE : end])
    return (
        Message(
            msg_type=mtype,
            worker_id=worker_id,
            iteration=iteration,
            key_id=key_id,
            chunk_index=chunk_index,
            payload=payload,
        ),
        end,
    )


class FrameDecoder:
    """Streaming reassembler: feed arbitrary byte segments, get whole frames.

    Frames decode identically regardless of how the stream was split into
    read segments.
    """

    def __init__(self):
        self._buf = bytearray()
        self._start = 0

    def feed(self, data: bytes) -> list[Message]:
        frames: list[Message] = []
        if self._start == len(self._buf):
            # fast path: parse straight out of the segment, keep only the tail
            pos = 0
            while True:
                decoded = decode_message(data, pos)
                if decoded is None:
                    break
                msg, pos = decoded
                frames.append(msg)
            del self._buf[:]
            self._start = 0
            if pos != len(data):
                self._buf.extend(data[pos:] if pos else data)
            return frames
        self._buf.extend(data)
        while True:
            decoded = decode_message(self._buf, self._start)
            if decoded is None:
                break
            msg, end = decoded
            frames.append(msg)
            self._start = end
        if self._start == len(self._buf):
            del self._buf[:]
            self._start = 0
        elif self._start > 65536 and self._start * 2 > len(self._buf):
            del self._buf[: self._start]
            self._start = 0
        return frames

    @property
    def pending_bytes(self) -> int:
        return len(self._buf) - self._start


_TABLE_FIXED = struct.Struct("<IIfBBH")


@dataclass(frozen=True)
class AssignmentTable:
    """REGISTER_ACK body: everything a worker needs to route its pushes.

    Serialized layout (little-endian):

        u32 chunk_bytes
        u32 worker_count
        f32 learning_rate
        u8  flags (bit0 deterministic aggregation, bit1 average gradients)
        u8  reserved = 0
        u16 endpoint_count
        per endpoint: u16 length + UTF-8 address
        u32 key_count, then per key: u32 key_id, u32 element_count
        u32 chunk_count, then per chunk (ascending (key_id, chunk_index)
            over the listed keys): u16 owning endpoint ordinal
    """

    chunk_bytes: int
    worker_count: int
    learning_rate: float
    deterministic: bool
    average_gradients: bool
    endpoints: tuple[str, ...]
    keys: tuple[tuple[int, int], ...] = field(default_factory=tuple)  # (key_id, element_count)
    chunk_endpoints: tuple[int, ...] = field(default_factory=tuple)

    def expected_chunk_count(self) -> int:
        per_key = []
        for _, count in self.keys:
            nbytes = count * ELEMENT_WIDTH
            per_key.append((nbytes + self.chunk_bytes - 1) // self.chunk_bytes)
        return sum(per_key)

    def to_bytes(self) -> bytes:
        flags = (1 if self.deterministic else 0) | (2 if self.average_gradients else 0)
        out = bytearray()
        out += _TABLE_FIXED.pack(
            self.chunk_bytes,
            self.worker_count,
            np.float32(self.learning_rate),
            flags,
            0,
            len(self.endpoints),
        )
        for addr in self.endpoints:
            raw = addr.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<I", len(self.keys))
        for key_id, count in self.keys:
            out += struct.pack("<II", key_id, count)
        out += struct.pack("<I", len(self.chunk_endpoints))
        out += struct.pack("<%dH" % len(self.chunk_endpoints), *self.chunk_endpoints)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AssignmentTable":
        try:
            chunk_bytes, worker_count, lr, flags, _, n_endpoints = _TABLE_FIXED.unpack_from(data, 0)
            pos = _TABLE_FIXED.size
            endpoints = []
            for _ in range(n_endpoints):
                (alen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                endpoints.append(bytes(data[pos : pos + alen]).decode("utf-8"))
                pos += alen
            (n_keys,) = struct.unpack_from("<I", data, pos)
            pos += 4
            keys = []
            for _ in range(n_keys):
                key_id, count = struct.unpack_from("<II", data, pos)
                pos += 8
                keys.append((key_id, count))
            (n_chunks,) = struct.unpack_from("<I", data, pos)
            pos += 4
            ordinals = struct.unpack_from("<%dH" % n_chunks, data, pos)
            pos += 2 * n_chunks
        except (struct.error, UnicodeDecodeError) as exc:
            raise ProtocolError(f"malformed assignment table: {exc}") from None
        if pos != len(data):
            raise ProtocolError("trailing bytes after assignment table")
        table = cls(
            chunk_bytes=chunk_bytes,
            worker_count=worker_count,
            learning_rate=float(np.float32(lr)),
            deterministic=bool(flags & 1),
            average_gradients=bool(flags & 2),
            endpoints=tuple(endpoints),
            keys=tuple(keys),
            chunk_endpoints=tuple(ordinals),
        )
        if any(o >= len(table.endpoints) for o in table.chunk_endpoints):
            raise ProtocolError("assignment table endpoint ordinal out of range")
        if table.expected_chunk_count() != len(table.chunk_endpoints):
            raise ProtocolError(
                "assignment table must cover every chunk exactly once: "
                f"expected {table.expected_chunk_count()}, got {len(table.chunk_endpoints)}"
            )
        return table


def register_message(worker_id: int, spec_digest: bytes) -> Message:
    if len(spec_digest) != 32:
        raise ProtocolError("spec digest must be 32 bytes")
    return Message(MessageType.REGISTER, worker_id=worker_id, payload=spec_digest)


def error_message(reason: str, worker_id: int = 0, iteration: int = 0) -> Message:
    return Message(
        MessageType.ERROR,
        worker_id=worker_id,
        iteration=iteration,
        payload=reason.encode("utf-8"),
    )
