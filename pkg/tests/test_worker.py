import numpy as np
import pytest

from chunkps.errors import InvalidBatchError, InvalidConfigError
from chunkps.model import build_model_spec
from chunkps.worker import (
    LCG_INC,
    LCG_MULT,
    WorkerConfig,
    WorkerMode,
    logreg_gradient,
    logreg_loss,
    synthetic_dataset,
    zero_compute_gradients,
)

# frozen (seed=1, n=4, d=2) fixture, computed with a standalone pure-Python
# implementation of the documented generator contract
SEED1_W_STAR = [-0.15358173847198486, 0.018814802169799805]
SEED1_FEATURES = [
    [0.2967187166213989, -0.23427331447601318],
    [0.590895414352417, 0.0010224580764770508],
    [0.10787069797515869, -0.8691614866256714],
    [0.6794521808624268, -0.603119969367981],
]
SEED1_LABELS = [0.0, 0.0, 0.0, 0.0]

# frozen (seed=7, n=6, d=3) labels: a mixed-label case
SEED7_LABELS = [0.0, 1.0, 0.0, 0.0, 1.0, 1.0]


def reference_lcg_units(seed, count):
    """Independent oracle for the documented value stream."""
    state = seed & 0xFFFFFFFFFFFFFFFF
    out = []
    for _ in range(count):
        state = (state * LCG_MULT + LCG_INC) & 0xFFFFFFFFFFFFFFFF
        u = np.float32(state >> 40)
        out.append(np.float32(u / np.float32(1 << 23) - np.float32(1.0)))
    return out


def test_dataset_matches_frozen_fixture():
    ds = synthetic_dataset(1, 4, 2)
    assert ds.ground_truth.tolist() == SEED1_W_STAR
    assert ds.features.tolist() == SEED1_FEATURES
    assert ds.labels.tolist() == SEED1_LABELS


def test_dataset_mixed_label_fixture():
    assert synthetic_dataset(7, 6, 3).labels.tolist() == SEED7_LABELS


def test_dataset_value_stream_matches_reference_lcg():
    n, d = 5, 3
    ds = synthetic_dataset(9, n, d)
    units = reference_lcg_units(9, d + n * d)
    assert ds.ground_truth.tolist() == [float(u) for u in units[:d]]
    flat = [float(u) for u in units[d:]]
    assert ds.features.flatten().tolist() == flat


def test_dataset_deterministic():
    a = synthetic_dataset(3, 10, 4)
    b = synthetic_dataset(3, 10, 4)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)


def test_dataset_seeds_differ():
    a = synthetic_dataset(1, 10, 4)
    b = synthetic_dataset(2, 10, 4)
    assert not np.array_equal(a.features, b.features)


def test_dataset_validation():
    with pytest.raises(InvalidConfigError):
        synthetic_dataset(1, 0, 4)
    with pytest.raises(InvalidConfigError):
        synthetic_dataset(1, 4, 0)


def test_labels_follow_hyperplane_sign():
    ds = synthetic_dataset(11, 50, 6)
    margins = ds.features.astype(np.float64) @ ds.ground_truth.astype(np.float64)
    assert np.array_equal(ds.labels, (margins > 0).astype(np.float32))


# -- logistic regression -----------------------------------------------------


def test_gradient_at_zero_single_sample():
    # sigmoid(0) = 0.5, so gradient = (0.5 - 1) * x = [-0.5, 0]
    grad = logreg_gradient(
        np.zeros(2, dtype=np.float32),
        np.array([[1.0, 0.0]], dtype=np.float32),
        np.array([1.0], dtype=np.float32),
    )
    assert grad.tolist() == [-0.5, 0.0]


def test_gradient_zero_at_stationarity():
    # labels set exactly to sigmoid(w.x): every per-sample term vanishes
    rng = np.random.default_rng(5)
    X = rng.uniform(-1, 1, (8, 3)).astype(np.float32)
    w = rng.uniform(-1, 1, 3).astype(np.float32)
    z = np.array([np.float32(x @ w) for x in X], dtype=np.float32)
    labels = (np.float32(1.0) / (np.float32(1.0) + np.exp(-z))).astype(np.float32)
    grad = logreg_gradient(w, X, labels)
    assert np.array_equal(grad, np.zeros(3, dtype=np.float32))


def finite_difference_gradient(w, X, y, step=1e-3):
    """Central differences of the float64 mean logistic loss."""
    w64 = w.astype(np.float64)
    X64 = X.astype(np.float64)
    y64 = y.astype(np.float64)

    def loss(vec):
        z = X64 @ vec
        return float(np.mean(np.logaddexp(0.0, -(2.0 * y64 - 1.0) * z)))

    grad = np.zeros_like(w64)
    for i in range(len(w64)):
        up = w64.copy()
        down = w64.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (loss(up) - loss(down)) / (2 * step)
    return grad


def test_gradient_matches_finite_differences():
    ds = synthetic_dataset(21, 40, 5)
    rng = np.random.default_rng(2)
    w = rng.uniform(-0.5, 0.5, 5).astype(np.float32)
    got = logreg_gradient(w, ds.features, ds.labels).astype(np.float64)
    want = finite_difference_gradient(w, ds.features, ds.labels)
    denom = np.maximum(np.abs(want), 1e-6)
    assert (np.abs(got - want) / denom).max() < 1e-3


def test_gradient_empty_batch():
    with pytest.raises(InvalidBatchError):
        logreg_gradient(
            np.zeros(2, dtype=np.float32),
            np.zeros((0, 2), dtype=np.float32),
            np.zeros(0, dtype=np.float32),
        )


def test_loss_at_zero_is_log2():
    ds = synthetic_dataset(1, 16, 4)
    loss = logreg_loss(np.zeros(4, dtype=np.float32), ds.features, ds.labels)
    assert abs(float(loss) - float(np.log(2.0))) < 1e-6


# -- zero-compute engine ------------------------------------------------------


def test_zero_compute_iteration_zero_all_zero():
    spec = build_model_spec([100, 50])
    for _, payload in zero_compute_gradients(spec, 128, 0):
        assert not payload.any()


def test_zero_compute_iteration_three():
    spec = build_model_spec([10])
    [(_, payload)] = zero_compute_gradients(spec, 1024, 3)
    assert np.all(payload == np.float32(0.003))


def test_zero_compute_shapes_match_descriptors():
    spec = build_model_spec([1000, 3])
    pairs = zero_compute_gradients(spec, 256, 5)
    for chunk, payload in pairs:
        assert len(payload) == chunk.element_count
    assert sum(len(p) for _, p in pairs) == spec.total_elements


def test_zero_compute_modulo_wraps():
    spec = build_model_spec([4])
    [(_, p7)] = zero_compute_gradients(spec, 1024, 7)
    assert not p7.any()
    [(_, p8)] = zero_compute_gradients(spec, 1024, 8)
    assert np.all(p8 == np.float32(0.001))


# -- config -------------------------------------------------------------------


def test_worker_config_validation():
    good = WorkerConfig(worker_id=0, connect=("a",), worker_count=2, iters=1)
    good.validate()
    with pytest.raises(InvalidConfigError):
        WorkerConfig(worker_id=2, connect=("a",), worker_count=2, iters=1).validate()
    with pytest.raises(InvalidConfigError):
        WorkerConfig(worker_id=0, connect=(), worker_count=1, iters=1).validate()
    with pytest.raises(InvalidConfigError):
        WorkerConfig(
            worker_id=0, connect=("a",), worker_count=1, iters=1,
            mode=WorkerMode.ZERO_COMPUTE,
        ).validate()
    with pytest.raises(InvalidConfigError):
        WorkerConfig(
            worker_id=0, connect=("a",), worker_count=1, iters=1,
            feature_dim=16, model_elements=(8, 4),
        ).validate()


def test_worker_config_model_defaults_to_dim():
    cfg = WorkerConfig(worker_id=0, connect=("a",), worker_count=1, iters=1, feature_dim=12)
    assert cfg.resolved_model_elements() == (12,)


def test_worker_core_aborts_on_error_frame():
    from chunkps.errors import WorkerAbortError
    from chunkps.wire import error_message
    from chunkps.worker import WorkerCore

    core = WorkerCore(
        WorkerConfig(worker_id=0, connect=("srv",), worker_count=1, iters=1, feature_dim=4)
    )
    conn = object()
    out = core.start([(conn, "srv")])
    assert len(out) == 1  # one REGISTER per connection
    with pytest.raises(WorkerAbortError, match="spec-mismatch"):
        core.on_frame(conn, error_message("spec-mismatch"))
