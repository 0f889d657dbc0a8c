import numpy as np
import pytest

from chunkps.aggregation import (
    AggregationBuffer,
    AggregationMode,
    OptimizerConfig,
    PushStatus,
    apply_sgd,
)
from chunkps.errors import (
    DuplicatePushError,
    IncompleteAggregationError,
    InvalidConfigError,
    NumericFaultError,
    ProtocolError,
    StaleIterationError,
)
from chunkps.model import ChunkDescriptor


def chunk(n=2):
    return ChunkDescriptor(key_id=0, chunk_index=0, element_offset=0, element_count=n, byte_size=4 * n)


def arr(*values):
    return np.array(values, dtype=np.float32)


def left_fold_oracle(payloads):
    """Independent reference: fold in ascending worker order, float32."""
    acc = payloads[0].astype(np.float32, copy=True)
    for p in payloads[1:]:
        acc = (acc + p).astype(np.float32)
    return acc


def test_two_worker_sum_fast():
    buf = AggregationBuffer(chunk(), worker_count=2, mode=AggregationMode.FAST)
    assert buf.accept_gradient(0, arr(1, 2)) is PushStatus.PARTIAL
    assert buf.accept_gradient(1, arr(3, 4)) is PushStatus.COMPLETE
    assert np.array_equal(buf.finalize_sum(), arr(4, 6))


def test_single_worker_zero_identity():
    buf = AggregationBuffer(chunk(3), worker_count=1)
    assert buf.accept_gradient(0, arr(0, 0, 0)) is PushStatus.COMPLETE
    assert np.array_equal(buf.finalize_sum(), arr(0, 0, 0))


def test_duplicate_push_rejected():
    buf = AggregationBuffer(chunk(), worker_count=2)
    buf.accept_gradient(0, arr(1, 1))
    with pytest.raises(DuplicatePushError):
        buf.accept_gradient(0, arr(1, 1))


def test_length_and_worker_validation():
    buf = AggregationBuffer(chunk(2), worker_count=2)
    with pytest.raises(ProtocolError):
        buf.accept_gradient(0, arr(1, 2, 3))
    with pytest.raises(ProtocolError):
        buf.accept_gradient(5, arr(1, 2))


def test_iteration_mismatch_fails_fast():
    buf = AggregationBuffer(chunk(), worker_count=1, iteration=3)
    with pytest.raises(StaleIterationError):
        buf.check_iteration(2)
    with pytest.raises(StaleIterationError):
        buf.check_iteration(4)
    buf.check_iteration(3)


def test_deterministic_sum_ordered_by_worker_id():
    buf = AggregationBuffer(chunk(1), worker_count=2, mode=AggregationMode.DETERMINISTIC)
    buf.accept_gradient(1, arr(0.1))
    buf.accept_gradient(0, arr(0.2))
    expected = np.float32(np.float32(0.2) + np.float32(0.1))
    assert buf.finalize_sum()[0] == expected


def test_three_ones():
    buf = AggregationBuffer(chunk(1), worker_count=3)
    for w in range(3):
        buf.accept_gradient(w, arr(1.0))
    assert buf.finalize_sum()[0] == np.float32(3.0)


def test_finalize_before_complete_rejected():
    buf = AggregationBuffer(chunk(), worker_count=2)
    buf.accept_gradient(0, arr(1, 2))
    with pytest.raises(IncompleteAggregationError):
        buf.finalize_sum()


def test_deterministic_matches_left_fold_oracle_bitwise():
    rng = np.random.default_rng(1234)
    for _ in range(50):
        workers = rng.integers(1, 9)
        n = int(rng.integers(1, 64))
        payloads = [rng.uniform(-1, 1, n).astype(np.float32) for _ in range(workers)]
        buf = AggregationBuffer(chunk(n), worker_count=int(workers), mode=AggregationMode.DETERMINISTIC)
        order = list(range(workers))
        rng.shuffle(order)
        for w in order:
            buf.accept_gradient(int(w), payloads[w])
        assert buf.finalize_sum().tobytes() == left_fold_oracle(payloads).tobytes()


def test_arrival_order_permutation_bitwise_identical():
    rng = np.random.default_rng(42)
    payloads = [rng.uniform(-1, 1, 16).astype(np.float32) for _ in range(5)]
    results = []
    orders = [list(range(5)), [4, 3, 2, 1, 0], [2, 0, 4, 1, 3]]
    for order in orders:
        buf = AggregationBuffer(chunk(16), worker_count=5, mode=AggregationMode.DETERMINISTIC)
        for w in order:
            buf.accept_gradient(w, payloads[w])
        results.append(buf.finalize_sum().tobytes())
    assert results[0] == results[1] == results[2]


def test_fast_close_to_deterministic():
    rng = np.random.default_rng(7)
    workers = 6
    payloads = [rng.uniform(-1, 1, 128).astype(np.float32) for _ in range(workers)]
    det = AggregationBuffer(chunk(128), worker_count=workers, mode=AggregationMode.DETERMINISTIC)
    fast = AggregationBuffer(chunk(128), worker_count=workers, mode=AggregationMode.FAST)
    order = [3, 0, 5, 1, 4, 2]
    for w in order:
        det.accept_gradient(w, payloads[w])
        fast.accept_gradient(w, payloads[w])
    bound = workers * np.finfo(np.float32).eps * max(np.abs(p).max() for p in payloads)
    delta = np.abs(det.finalize_sum() - fast.finalize_sum()).max()
    assert delta <= bound


def test_reset_clears_state_and_counts_epochs():
    buf = AggregationBuffer(chunk(1), worker_count=1)
    buf.accept_gradient(0, arr(2.0))
    buf.finalize_sum()
    buf.reset_for_iteration(2)
    assert buf.iteration == 2
    assert buf.contributed_count == 0
    assert buf.completed_epochs == 1
    buf.accept_gradient(0, arr(2.0))
    assert buf.finalize_sum()[0] == np.float32(2.0)


def test_reset_while_partial_rejected():
    buf = AggregationBuffer(chunk(), worker_count=2)
    buf.accept_gradient(0, arr(1, 1))
    with pytest.raises(IncompleteAggregationError):
        buf.reset_for_iteration(2)


def test_repeat_iterations_identical_sums():
    payloads = [arr(0.25, -1.5), arr(3.75, 0.125)]
    buf = AggregationBuffer(chunk(2), worker_count=2)
    outs = []
    for it in (1, 2):
        for w in (0, 1):
            buf.accept_gradient(w, payloads[w])
        outs.append(buf.finalize_sum().tobytes())
        buf.reset_for_iteration(it + 1)
    assert outs[0] == outs[1]


# -- optimizer ---------------------------------------------------------------


def test_sgd_basic_step():
    out = apply_sgd(arr(1.0), arr(0.5), OptimizerConfig(learning_rate=0.1), worker_count=1)
    assert out[0] == np.float32(1.0) - np.float32(0.1) * np.float32(0.5)
    assert abs(float(out[0]) - 0.95) < 1e-7


def test_sgd_zero_gradient_identity():
    w = arr(1.25, -3.5, 0.0)
    out = apply_sgd(w, arr(0, 0, 0), OptimizerConfig(learning_rate=0.1), worker_count=1)
    assert np.array_equal(out, w)


def test_sgd_averages_over_workers():
    out = apply_sgd(arr(1.0), arr(4.0), OptimizerConfig(learning_rate=0.1), worker_count=4)
    assert abs(float(out[0]) - 0.9) < 1e-7


def test_sgd_sum_mode():
    cfg = OptimizerConfig(learning_rate=0.1, average_gradients=False)
    out = apply_sgd(arr(1.0), arr(4.0), cfg, worker_count=4)
    assert abs(float(out[0]) - 0.6) < 1e-7


def test_sgd_non_finite_aborts():
    with pytest.raises(NumericFaultError):
        apply_sgd(arr(np.finfo(np.float32).max), arr(-np.finfo(np.float32).max), OptimizerConfig(learning_rate=1e30), worker_count=1)


def test_sgd_shape_mismatch():
    with pytest.raises(ProtocolError):
        apply_sgd(arr(1.0, 2.0), arr(1.0), OptimizerConfig(), worker_count=1)


def test_optimizer_config_validation():
    with pytest.raises(InvalidConfigError):
        OptimizerConfig(learning_rate=0.0)
    with pytest.raises(InvalidConfigError):
        OptimizerConfig(learning_rate=float("nan"))
    with pytest.raises(InvalidConfigError):
        AggregationBuffer(chunk(), worker_count=0)
