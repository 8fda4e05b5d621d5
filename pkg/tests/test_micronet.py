import math

import numpy as np
import pytest

from noteheads.micronet import (
    FLAT_SIZE,
    MAGIC,
    PARAM_SHAPES,
    AdamState,
    LossWeights,
    NonFiniteGradientError,
    TrainConfig,
    WeightsShapeError,
    WeightsTruncatedError,
    WeightsVersionError,
    adam_step,
    backward,
    forward,
    init_params,
    load_weights,
    loss,
    parameter_count,
    save_weights,
    spatial_trace,
    train,
)
from noteheads.sampler import SampleSet


def _manual_param_count():
    # conv: k*k*cin*cout + cout, dense: fan_in*fan_out + fan_out
    convs = [(5, 1, 32), (3, 32, 64), (3, 64, 64), (3, 64, 64)]
    total = sum(k * k * cin * cout + cout for k, cin, cout in convs)
    return total + 2304 * 1 + 1 + 2304 * 4 + 4


def test_spatial_trace_and_count():
    assert spatial_trace() == [51, 47, 23, 21, 10, 8, 6]
    assert FLAT_SIZE == 64 * 6 * 6 == 2304
    assert parameter_count() == _manual_param_count() == 104_709


def test_zero_weights_give_half_and_zero_boxes():
    params = {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}
    x = np.random.default_rng(0).random((3, 51, 51))
    for mode in ("infer", "train"):
        p, b_hat = forward(params, x, mode, dropout_seed=1)
        assert np.all(p == 0.5)
        assert np.all(b_hat == 0)


def test_shape_mismatch():
    params = init_params(0)
    with pytest.raises(ValueError):
        forward(params, np.zeros((2, 50, 50)))
    bad = dict(params, conv2_w=np.zeros((3, 3, 32, 63), dtype=np.float32))
    with pytest.raises(ValueError, match="conv2_w"):
        forward(bad, np.zeros((1, 51, 51)))


def test_dropout_seed_determinism():
    params = init_params(2)
    x = np.random.default_rng(1).random((4, 51, 51)).astype(np.float32)
    a = forward(params, x, "train", dropout_seed=5)
    b = forward(params, x, "train", dropout_seed=5)
    c = forward(params, x, "train", dropout_seed=6)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])
    # infer mode is pure
    assert np.array_equal(forward(params, x)[0], forward(params, x)[0])


def test_outputs_in_range():
    params = init_params(3)
    p, b_hat = forward(params, np.random.default_rng(2).random((5, 51, 51)))
    assert np.all((p > 0) & (p < 1))
    assert np.all(b_hat >= 0)


def test_loss_examples():
    total, ce, mse = loss([0.5], [[3, 1, 2, 5]], [1], [[3, 1, 2, 5]])
    assert total == pytest.approx(math.log(2)) and mse == 0
    assert total == pytest.approx(0.6931, abs=1e-4)
    total, ce, mse = loss([0.5], [[1, 1, 1, 1]], [0], [[0, 0, 0, 0]])
    assert total == pytest.approx(math.log(2) + 0.02)
    assert total == pytest.approx(0.7131, abs=1e-4)
    assert loss([1.0], [[2, 2, 2, 2]], [1], [[2, 2, 2, 2]])[0] == pytest.approx(0, abs=1e-6)


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(-0.1)


def test_zero_lambda_kills_bbox_gradients():
    params = init_params(4, np.float64)
    params["bbox_b"][:] = -50.0  # keeps b_hat at zero
    x = np.random.default_rng(3).random((4, 51, 51))
    grads, _ = backward(params, x, np.zeros(4), np.zeros((4, 4)), "train", 1, LossWeights(0.0))
    assert np.all(grads["bbox_w"] == 0) and np.all(grads["bbox_b"] == 0)


def test_duplicated_sample_gives_same_gradient():
    params = init_params(5, np.float64)
    x = np.random.default_rng(4).random((1, 51, 51))
    c, b = np.ones(1), np.array([[2.0, 3.0, 1.0, 4.0]])
    g1, _ = backward(params, x, c, b, "infer")
    g2, _ = backward(params, np.concatenate([x, x]), np.r_[c, c], np.r_[b, b], "infer")
    for name in g1:
        np.testing.assert_allclose(g1[name], g2[name], rtol=1e-10, atol=1e-15)


def test_gradients_match_finite_differences_on_sampled_entries():
    # quick version of the acceptance check; binary ink shapes like real patches
    # (uniform noise puts max-pool windows within a step of a tie)
    rng = np.random.default_rng(6)
    params = init_params(6, np.float64)
    # zero biases leave blank regions exactly tied across dropout patterns
    for name in params:
        if name.endswith("_b"):
            params[name] = rng.normal(0, 0.1, params[name].shape)
    yy, xx = np.mgrid[:51, :51]
    x = np.stack([((yy - cy) / 6.0) ** 2 + ((xx - cx) / 9.0) ** 2 <= 1 for cy, cx in [(25, 25), (20, 30)]])
    x = x.astype(np.float64)
    x[1, 5:46, 40:42] = 1.0
    c, b = np.array([1.0, 0.0]), np.array([[4.0, 5.0, 3.0, 2.0], [0, 0, 0, 0]])
    grads, _ = backward(params, x, c, b, "train", 3)

    def objective():
        return loss(*forward(params, x, "train", 3), c, b)[0]

    for name in ("conv1_b", "conv3_w", "clf_w", "bbox_b"):
        flat = params[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            up = objective()
            flat[i] = old - 1e-5
            down = objective()
            flat[i] = old
            num, ana = (up - down) / 2e-5, grads[name].reshape(-1)[i]
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-8), name


def test_adam_first_step():
    params = {"w": np.array([1.0])}
    adam_step(params, {"w": np.array([1.0])}, state := AdamState())
    assert state.step == 1
    assert params["w"][0] == pytest.approx(1.0 - 0.001, abs=1e-8)


def test_adam_zero_gradient_and_identical_updates():
    params = {"a": np.array([0.3, -2.0]), "b": np.array([0.3, -2.0])}
    adam_step(params, {"a": np.zeros(2), "b": np.zeros(2)}, AdamState())
    assert np.array_equal(params["a"], [0.3, -2.0])
    g = np.array([0.7, -0.1])
    state = AdamState()
    for _ in range(3):
        adam_step(params, {"a": g, "b": g.copy()}, state)
    assert np.array_equal(params["a"], params["b"])


def test_adam_rejects_non_finite():
    params = {"w": np.zeros(2)}
    with pytest.raises(NonFiniteGradientError):
        adam_step(params, {"w": np.array([0.0, np.nan])}, AdamState())


def _separable(n=64, seed=0):
    rng = np.random.default_rng(seed)
    X = (rng.random((n, 51, 51)) < 0.05).astype(np.float32)
    c = np.arange(n) % 2
    X[c == 1, 20:31, 18:33] = 1.0
    b = np.zeros((n, 4))
    b[c == 1] = (5, 7, 5, 7)
    return SampleSet(X, np.zeros((n, 2), dtype=int), c.astype(float), b)


def test_separable_overfit():
    samples = _separable()
    params, log = train(samples, TrainConfig(epochs=20, batch_size=16, seed=1, lr=3e-4))
    p, _ = forward(params, samples.X)
    assert np.mean((p >= 0.5) == (samples.c == 1)) == 1.0
    losses = [r["train_loss"] for r in log]
    assert all(b <= a + 1e-3 for a, b in zip(losses[1:], losses[2:]))


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(_separable().subset(slice(0, 0)))


def test_zero_epochs_returns_initialisation():
    params, log = train(_separable(8), TrainConfig(epochs=0, seed=3))
    init = init_params(np.random.default_rng(3))
    assert log == []
    for k in PARAM_SHAPES:
        assert np.array_equal(params[k], init[k])


def test_training_is_deterministic():
    samples = _separable(16)
    a, log_a = train(samples, TrainConfig(epochs=2, batch_size=8, seed=9))
    b, log_b = train(samples, TrainConfig(epochs=2, batch_size=8, seed=9), validation=None)
    for k in PARAM_SHAPES:
        assert np.array_equal(a[k], b[k])
    assert [r["batch_loss"] for r in log_a] == [r["batch_loss"] for r in log_b]


def test_validation_selects_best_epoch():
    samples = _separable(16)
    records = []
    params, log = train(samples, TrainConfig(epochs=3, batch_size=8, seed=2), validation=samples, on_epoch=records.append)
    assert records == log
    best = min(r["val_loss"] for r in log)
    p, b_hat = forward(params, samples.X)
    assert loss(p, b_hat, samples.c, samples.b)[0] == pytest.approx(best, rel=1e-6)


def test_weights_roundtrip(tmp_path):
    params = init_params(7)
    save_weights(params, tmp_path / "w.bin")
    loaded = load_weights(tmp_path / "w.bin")
    for k in PARAM_SHAPES:
        assert loaded[k].dtype == np.float32
        assert np.array_equal(loaded[k], params[k])


def test_weights_bad_magic(tmp_path):
    save_weights(init_params(0), tmp_path / "w.bin")
    data = bytearray((tmp_path / "w.bin").read_bytes())
    data[:6] = b"MNETv9"
    (tmp_path / "w.bin").write_bytes(bytes(data))
    with pytest.raises(WeightsVersionError):
        load_weights(tmp_path / "w.bin")


def test_weights_wrong_conv2_shape(tmp_path):
    save_weights(init_params(0), tmp_path / "w.bin")
    data = (tmp_path / "w.bin").read_bytes()
    data = data.replace(b'["conv2_w", [3, 3, 32, 64]]', b'["conv2_w", [3, 3, 32, 65]]')
    (tmp_path / "w.bin").write_bytes(data)  # same header length
    with pytest.raises(WeightsShapeError, match="conv2"):
        load_weights(tmp_path / "w.bin")


def test_weights_truncated(tmp_path):
    save_weights(init_params(0), tmp_path / "w.bin")
    data = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "w.bin").write_bytes(data[:-10])
    with pytest.raises(WeightsTruncatedError):
        load_weights(tmp_path / "w.bin")
    assert data.startswith(MAGIC)
