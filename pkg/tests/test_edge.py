import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import top_k_reference
from tsaga.core import SeededRng
from tsaga.edge import (
    DatasetShard,
    DeviceState,
    ModelState,
    SoftmaxRegression,
    accumulate_and_sparsify,
    choose_alpha,
    compress_and_scale,
    device_weights,
    local_update,
    power_scaling,
    top_k,
)
from tsaga.sensing import build_operator

finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=100)
@given(v=arrays(float, st.integers(1, 40), elements=finite), data=st.data())
def test_top_k_matches_reference(v, data):
    k = data.draw(st.integers(1, v.size))
    assert np.array_equal(top_k(v, k), top_k_reference(v, k))


def test_top_k_ties_take_lower_index():
    assert top_k(np.array([1.0, -2.0, 2.0, 0.5]), 1).tolist() == [0.0, -2.0, 0.0, 0.0]


def test_top_k_rejects_bad_k():
    with pytest.raises(ValueError):
        top_k(np.ones(3), 0)
    with pytest.raises(ValueError):
        top_k(np.ones(3), 4)


def test_error_feedback_identity_and_contraction():
    g = np.random.default_rng(0)
    n = 200
    for trial in range(1000):
        k = int(g.integers(1, n + 1))
        shard = DatasetShard(np.zeros((1, 1)), np.zeros(1, dtype=int))
        dev = DeviceState.fresh(shard, n)
        dev.delta = g.standard_normal(n) * g.exponential()
        grad = g.standard_normal(n) * g.exponential()
        before = dev.delta.copy()
        g_sp = accumulate_and_sparsify(dev, grad, k)
        g_ec = grad + before
        # g_sp + new residual reproduces g + old residual exactly
        assert np.array_equal(g_sp + dev.delta, g_ec)
        assert np.count_nonzero(g_sp) <= k
        assert np.linalg.norm(dev.delta) <= np.sqrt((n - k) / n) * np.linalg.norm(g_ec) * (1 + 1e-12)


def _toy(seed=0, k=40, d=5, c=3):
    g = np.random.default_rng(seed)
    return DatasetShard(g.standard_normal((k, d)), g.integers(0, c, k), n_classes=c)


def test_softmax_gradient_matches_finite_differences():
    shard = _toy()
    obj = SoftmaxRegression(5, 3)
    theta = np.random.default_rng(1).standard_normal(obj.dim) * 0.3
    grad = obj.grad(theta, shard)
    h = 1e-6
    fd = np.array([
        (obj.loss(theta + h * e, shard) - obj.loss(theta - h * e, shard)) / (2 * h) for e in np.eye(obj.dim)
    ])
    assert np.allclose(grad, fd, atol=1e-7)


def test_local_update_matches_manual_descent():
    shard = _toy()
    obj = SoftmaxRegression(5, 3)
    model = ModelState(np.zeros(obj.dim))
    dev = DeviceState.fresh(shard, obj.dim)
    theta = model.theta.copy()
    for _ in range(3):
        theta = theta - 0.1 * obj.grad(theta, shard)
    assert np.allclose(local_update(dev, model, 0.1, 3, obj), theta - model.theta, atol=1e-15)
    assert np.array_equal(model.theta, np.zeros(obj.dim))


def test_initial_loss_is_log_classes():
    shard = _toy()
    obj = SoftmaxRegression(5, 3)
    assert obj.loss(np.zeros(obj.dim), shard) == pytest.approx(np.log(3))


def test_power_budget_respected_and_tight():
    g = np.random.default_rng(3)
    op = build_operator(64, 16, SeededRng(0))
    signals = [op.forward(g.standard_normal(64)) for _ in range(4)]
    counts = [10, 20, 30, 40]
    sc = power_scaling(signals, 5.0, counts)
    energies = [np.sum((sc.amplitude(m) * sig) ** 2) for m, sig in enumerate(signals)]
    assert max(energies) == pytest.approx(5.0, rel=1e-12)
    assert all(e <= 5.0 * (1 + 1e-12) for e in energies)
    tx = compress_and_scale(np.ones(64), op, sc, 1)
    assert np.allclose(tx, sc.amplitude(1) * op.forward(np.ones(64)))


def test_device_weights_average_to_one():
    w = device_weights([1, 2, 3, 6])
    assert w.mean() == pytest.approx(1.0)
    assert w.tolist() == pytest.approx([1 / 3, 2 / 3, 1.0, 2.0])


def test_alpha_with_all_zero_signals():
    assert choose_alpha([np.zeros(4), np.zeros(4)], 10.0) == 1.0


def test_shard_validation():
    with pytest.raises(ValueError):
        DatasetShard(np.zeros((3, 2)), np.zeros(2, dtype=int))
    with pytest.raises(ValueError):
        DatasetShard(np.zeros((2, 2)), np.array([0, 10]))
