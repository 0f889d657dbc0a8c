import random

import numpy as np
import pytest

from chunkps.errors import ProtocolError
from chunkps.wire import (
    HEADER_SIZE,
    AssignmentTable,
    FrameDecoder,
    Message,
    MessageType,
    bytes_to_floats,
    decode_message,
    encode_message,
    floats_to_bytes,
    register_message,
)


def random_message(rng: random.Random) -> Message:
    mtype = rng.choice(list(MessageType))
    payload = rng.randbytes(rng.randint(0, 200))
    return Message(
        msg_type=mtype,
        worker_id=rng.randint(0, 65535),
        iteration=rng.randint(0, 2**32 - 1),
        key_id=rng.randint(0, 2**32 - 1),
        chunk_index=rng.randint(0, 2**32 - 1),
        payload=payload,
    )


def test_fin_frame_layout():
    frame = encode_message(Message(MessageType.FIN, worker_id=3, iteration=7))
    assert len(frame) == 24
    assert frame[4] == 1  # version
    assert frame[5] == 5  # FIN
    assert frame[:4] == (0x50485542).to_bytes(4, "little")


def test_push_frame_size_for_full_chunk():
    payload = floats_to_bytes(np.zeros(8192, dtype=np.float32))
    frame = encode_message(Message(MessageType.PUSH_GRAD, payload=payload))
    assert len(frame) == 24 + 32768


def test_header_overhead_below_a_tenth_percent():
    assert HEADER_SIZE == 24
    assert 24 / (24 + 32768) < 0.001


def test_roundtrip_identity_simple():
    msg = Message(MessageType.MODEL_CHUNK, worker_id=9, iteration=4, key_id=2, chunk_index=1, payload=b"\x01\x02")
    decoded, end = decode_message(encode_message(msg))
    assert decoded == msg
    assert end == 24 + 2


def test_roundtrip_identity_randomized_10000():
    rng = random.Random(0xC0FFEE)
    for _ in range(10000):
        msg = random_message(rng)
        decoded, _ = decode_message(encode_message(msg))
        assert decoded == msg


def test_bad_magic_rejected():
    frame = bytearray(encode_message(Message(MessageType.FIN)))
    frame[:4] = b"\x00\x00\x00\x00"
    with pytest.raises(ProtocolError):
        decode_message(bytes(frame))


def test_unknown_version_and_type_rejected():
    frame = bytearray(encode_message(Message(MessageType.FIN)))
    frame[4] = 2
    with pytest.raises(ProtocolError):
        decode_message(bytes(frame))
    frame[4] = 1
    frame[5] = 99
    with pytest.raises(ProtocolError):
        decode_message(bytes(frame))


def test_truncated_payload_needs_more_bytes():
    payload = bytes(32768)
    frame = encode_message(Message(MessageType.PUSH_GRAD, payload=payload))
    assert decode_message(frame[: 24 + 100]) is None
    assert decode_message(frame[:10]) is None


def test_out_of_range_field_rejected():
    with pytest.raises(ProtocolError):
        encode_message(Message(MessageType.FIN, worker_id=70000))


def test_stream_resegmentation_invariance():
    rng = random.Random(31337)
    messages = [random_message(rng) for _ in range(200)]
    blob = b"".join(encode_message(m) for m in messages)
    for _ in range(25):
        decoder = FrameDecoder()
        got = []
        pos = 0
        while pos < len(blob):
            step = rng.randint(1, 97)
            got.extend(decoder.feed(blob[pos : pos + step]))
            pos += step
        assert got == messages
        assert decoder.pending_bytes == 0


def test_decoder_concatenated_single_feed():
    msgs = [Message(MessageType.FIN, worker_id=i) for i in range(5)]
    decoder = FrameDecoder()
    assert decoder.feed(b"".join(encode_message(m) for m in msgs)) == msgs


def test_float_payload_roundtrip():
    values = np.array([1.5, -2.25, 0.0, 3.0e-8], dtype=np.float32)
    assert np.array_equal(bytes_to_floats(floats_to_bytes(values)), values)
    with pytest.raises(ProtocolError):
        bytes_to_floats(b"\x00\x00\x00")


def test_register_message_digest_length():
    msg = register_message(1, bytes(32))
    assert msg.msg_type is MessageType.REGISTER
    with pytest.raises(ProtocolError):
        register_message(1, b"short")


def make_table() -> AssignmentTable:
    return AssignmentTable(
        chunk_bytes=32768,
        worker_count=4,
        learning_rate=0.05,
        deterministic=True,
        average_gradients=True,
        endpoints=("127.0.0.1:7000", "127.0.0.1:7001"),
        keys=((0, 25000), (1, 10)),
        chunk_endpoints=(0, 1, 0, 1, 0),  # 4 chunks for key 0 + 1 for key 1
    )


def test_assignment_table_roundtrip():
    table = make_table()
    again = AssignmentTable.from_bytes(table.to_bytes())
    assert again == AssignmentTable(
        chunk_bytes=table.chunk_bytes,
        worker_count=table.worker_count,
        learning_rate=float(np.float32(0.05)),
        deterministic=True,
        average_gradients=True,
        endpoints=table.endpoints,
        keys=table.keys,
        chunk_endpoints=table.chunk_endpoints,
    )


def test_assignment_table_rejects_bad_ordinal():
    table = make_table()
    broken = AssignmentTable(
        chunk_bytes=table.chunk_bytes,
        worker_count=table.worker_count,
        learning_rate=table.learning_rate,
        deterministic=True,
        average_gradients=True,
        endpoints=table.endpoints,
        keys=table.keys,
        chunk_endpoints=(0, 1, 0, 9, 0),
    )
    with pytest.raises(ProtocolError):
        AssignmentTable.from_bytes(broken.to_bytes())


def test_assignment_table_must_cover_chunks_exactly():
    table = make_table()
    broken = AssignmentTable(
        chunk_bytes=table.chunk_bytes,
        worker_count=table.worker_count,
        learning_rate=table.learning_rate,
        deterministic=True,
        average_gradients=True,
        endpoints=table.endpoints,
        keys=table.keys,
        chunk_endpoints=(0, 1, 0),
    )
    with pytest.raises(ProtocolError):
        AssignmentTable.from_bytes(broken.to_bytes())
