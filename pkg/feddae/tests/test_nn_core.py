"""Tests for the dense network substrate: forward/backward, dropout, optimizers."""

import numpy as np
import pytest
from errors import ConfigurationError, PoisonedUpdateError, ShapeMismatchError
from nn_core import AdamState, DenseLayer, DenseNet, adam_step, backward, forward, sgd_step, softmax


def _net(dims=(5, 4, 3), seed=0):
    return DenseNet.build(list(dims), seed, "net")


def _loss(net, x, c):
    y, _ = forward(net, x)
    return float(c @ y)


class TestBuild:
    def test_layer_shapes_follow_dims(self):
        net = _net((7, 5, 4))
        assert net.shapes() == ((5, 7), (4, 5))
        assert net.activations == ["tanh", "identity"]
        assert net.dims == [7, 5, 4]

    def test_same_seed_same_weights(self):
        a, b = _net(seed=4), _net(seed=4)
        for key, value in a.named_parameters().items():
            np.testing.assert_array_equal(value, b.named_parameters()[key])

    def test_glorot_bound(self):
        net = _net((50, 30, 20))
        limit = np.sqrt(6.0 / 80)
        assert np.all(np.abs(net.layers[0].weight) <= limit)
        assert np.all(net.layers[0].bias == 0.0)

    def test_streams_isolate_networks(self):
        a = DenseNet.build([4, 3], 1, "a", stream=("client", 0))
        b = DenseNet.build([4, 3], 1, "a", stream=("client", 1))
        assert not np.array_equal(a.layers[0].weight, b.layers[0].weight)

    def test_non_chaining_layers_rejected(self):
        with pytest.raises(ShapeMismatchError):
            DenseNet([DenseLayer(np.zeros((3, 4)), np.zeros(3)), DenseLayer(np.zeros((2, 5)), np.zeros(2))])

    def test_unknown_activation_rejected(self):
        with pytest.raises(ConfigurationError):
            DenseLayer(np.zeros((2, 2)), np.zeros(2), "relu")


class TestForward:
    def test_wrong_input_length(self):
        with pytest.raises(ShapeMismatchError):
            forward(_net(), np.zeros(4))

    def test_identity_network(self):
        net = DenseNet.from_arrays([np.eye(3)], [np.zeros(3)], ["identity"])
        y, _ = forward(net, np.array([1.0, -2.0, 3.0]))
        np.testing.assert_array_equal(y, [1.0, -2.0, 3.0])

    def test_dropout_only_in_train_mode(self):
        net = _net()
        x = np.ones(5)
        y_eval, tape = forward(net, x, train_mode=False, dropout_rate=0.5)
        assert tape.dropout_scale is None
        y_plain, _ = forward(net, x)
        np.testing.assert_array_equal(y_eval, y_plain)

    def test_dropout_scales_kept_entries(self):
        net = _net((1000, 2))
        rng = np.random.default_rng(0)
        _, tape = forward(net, np.ones(1000), train_mode=True, dropout_rate=0.25, rng=rng)
        kept = tape.dropout_scale[tape.dropout_scale > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert 0.2 < np.mean(tape.dropout_scale == 0) < 0.3

    def test_matches_naive_loops(self):
        net = _net((6, 5, 4, 3), seed=9)
        x = np.random.default_rng(9).normal(size=6)
        y, _ = forward(net, x)

        h = list(x)
        for layer in net.layers:
            out = []
            for i in range(layer.out_dim):
                total = layer.bias[i]
                for j in range(layer.in_dim):
                    total += layer.weight[i, j] * h[j]
                out.append(np.tanh(total) if layer.activation == "tanh" else total)
            h = out
        np.testing.assert_allclose(y, h, rtol=1e-12, atol=1e-14)

    def test_zero_dropout_matches_eval(self):
        net = _net()
        x = np.linspace(-1.0, 1.0, 5)
        y_train, _ = forward(net, x, train_mode=True, dropout_rate=0.0, rng=np.random.default_rng(0))
        y_eval, _ = forward(net, x)
        np.testing.assert_array_equal(y_train, y_eval)

    def test_dropout_preserves_expectation(self):
        net = _net((8, 2))
        x = np.arange(1.0, 9.0)
        rng = np.random.default_rng(12)
        n_masks = 10_000
        masked = np.array(
            [forward(net, x, train_mode=True, dropout_rate=0.25, rng=rng)[1].inputs[0] for _ in range(n_masks)]
        )
        # Each scaled entry is 0 or x / 0.75, so its variance is x^2 / 3
        sigma = np.sqrt(np.sum(x**2) / 3.0 / n_masks) / x.size
        assert abs(masked.mean(axis=0).mean() - x.mean()) <= 3 * sigma
        assert masked.min() == 0.0

    def test_dropout_rate_out_of_range(self):
        with pytest.raises(ConfigurationError):
            forward(_net(), np.ones(5), train_mode=True, dropout_rate=1.0, rng=np.random.default_rng(0))


class TestSoftmax:
    def test_is_distribution(self):
        p = softmax(np.array([1000.0, 0.0, -1000.0]))
        assert np.isclose(p.sum(), 1.0)
        assert p[0] == pytest.approx(1.0)

    def test_symmetric_logits(self):
        np.testing.assert_array_equal(softmax(np.zeros(2)), [0.5, 0.5])

    def test_large_logits_do_not_overflow(self):
        np.testing.assert_allclose(softmax(np.array([1000.0, 1000.0 + np.log(3.0)])), [0.25, 0.75], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            x = rng.normal(size=10)
            shifted = softmax(x + rng.uniform(-50.0, 50.0))
            np.testing.assert_allclose(shifted, softmax(x), rtol=0, atol=1e-12)
            assert abs(shifted.sum() - 1.0) <= 1e-12


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        net = _net((5, 4, 3), seed=2)
        x, c = rng.normal(size=5), rng.normal(size=3)
        _, tape = forward(net, x)
        dx = backward(net, tape, c)

        h = 1e-6
        for key, param in net.named_parameters().items():
            grad = net.named_grads()[key]
            it = np.nditer(param, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = param[idx]
                param[idx] = old + h
                up = _loss(net, x, c)
                param[idx] = old - h
                down = _loss(net, x, c)
                param[idx] = old
                assert grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)

        numeric_dx = np.array(
            [(_loss(net, x + h * e, c) - _loss(net, x - h * e, c)) / (2 * h) for e in np.eye(5)]
        )
        np.testing.assert_allclose(dx, numeric_dx, rtol=1e-5, atol=1e-8)

    def test_gradients_accumulate(self):
        net = _net()
        x, c = np.ones(5), np.ones(3)
        _, tape = forward(net, x)
        backward(net, tape, c)
        once = net.layers[0].grad_weight.copy()
        backward(net, tape, c)
        np.testing.assert_allclose(net.layers[0].grad_weight, 2 * once)
        net.zero_grads()
        assert not net.layers[0].grad_weight.any()

    def test_stale_tape_rejected(self):
        _, tape = forward(_net((5, 4, 3)), np.ones(5))
        with pytest.raises(ShapeMismatchError):
            backward(_net((5, 6, 3)), tape, np.ones(3))


class TestOptimizers:
    def test_sgd_step(self):
        net = DenseNet.from_arrays([np.ones((2, 2))], [np.zeros(2)], ["identity"])
        net.layers[0].grad_weight[...] = 2.0
        net.layers[0].grad_bias[...] = -1.0
        sgd_step(net, lr=0.5)
        np.testing.assert_array_equal(net.layers[0].weight, np.zeros((2, 2)))
        np.testing.assert_array_equal(net.layers[0].bias, [0.5, 0.5])

    def test_adam_first_step_moves_by_lr(self):
        net = DenseNet.from_arrays([np.zeros((1, 1))], [np.zeros(1)], ["identity"])
        net.layers[0].grad_weight[...] = 3.0
        net.layers[0].grad_bias[...] = -0.2
        state = AdamState()
        adam_step(net, state, lr=0.01)
        # Bias-corrected first step is lr * g / (|g| + eps)
        assert net.layers[0].weight[0, 0] == pytest.approx(-0.01, rel=1e-6)
        assert net.layers[0].bias[0] == pytest.approx(0.01, rel=1e-6)
        assert state.step == 1

    def test_adam_zero_gradient_moves_nothing(self):
        net = _net()
        before = {k: v.copy() for k, v in net.named_parameters().items()}
        state = AdamState()
        adam_step(net, state, lr=0.1)
        assert state.step == 1
        for key, value in net.named_parameters().items():
            np.testing.assert_array_equal(value, before[key])

    def test_adam_minimizes_scalar_quadratic(self):
        net = DenseNet.from_arrays([np.zeros((1, 1))], [np.zeros(1)], ["identity"])
        state = AdamState()
        for _ in range(100):
            w = net.layers[0].weight[0, 0]
            grads = {"layers.0.weight": np.array([[2.0 * (w - 3.0)]]), "layers.0.bias": np.zeros(1)}
            adam_step(net, state, grads, lr=0.1)
        assert abs(net.layers[0].weight[0, 0] - 3.0) < 0.1

    def test_adam_with_external_gradients_leaves_buffers(self):
        net = DenseNet.from_arrays([np.zeros((1, 2))], [np.zeros(1)], ["identity"])
        grads = {"layers.0.weight": np.ones((1, 2)), "layers.0.bias": np.ones(1)}
        adam_step(net, AdamState(), grads, lr=0.1)
        assert not net.layers[0].grad_weight.any()
        assert net.layers[0].weight[0, 0] < 0

    def test_poisoned_gradient_moves_nothing(self):
        net = _net()
        before = {k: v.copy() for k, v in net.named_parameters().items()}
        net.layers[1].grad_bias[0] = np.nan
        with pytest.raises(PoisonedUpdateError) as excinfo:
            adam_step(net, AdamState(), lr=0.1)
        assert excinfo.value.tensor_name == "layers.1.bias"
        for key, value in net.named_parameters().items():
            np.testing.assert_array_equal(value, before[key])

    def test_gradient_shape_checked(self):
        net = _net()
        grads = {k: np.zeros(1) for k in net.named_parameters()}
        with pytest.raises(ShapeMismatchError):
            sgd_step(net, grads, lr=0.1)


class TestCopyAndLoad:
    def test_copy_is_independent(self):
        net = _net()
        twin = net.copy()
        twin.layers[0].weight += 1.0
        assert not np.array_equal(net.layers[0].weight, twin.layers[0].weight)

    def test_load_parameters_round_trip(self):
        a, b = _net(seed=1), _net(seed=2)
        b.load_parameters(a.named_parameters())
        for key, value in a.named_parameters().items():
            np.testing.assert_array_equal(value, b.named_parameters()[key])

    def test_load_parameters_missing_tensor(self):
        with pytest.raises(ShapeMismatchError):
            _net().load_parameters({})

    def test_parameter_count(self):
        assert _net((5, 4, 3)).parameter_count() == 5 * 4 + 4 + 4 * 3 + 3
