import math

import numpy as np
import pytest

from library.errors import ConfigurationError, InternalError, NumericError
from library.nn import BiLstmStack, Direction, Gradients, Linear, LstmLayer, Parameter, dropout_apply, \
    linear_backward, linear_forward, log_softmax, maxpool_time, maxpool_time_backward, reduce_gradients, softmax


def test_lstm_shapes():
    layer = LstmLayer("l", 3, 5, rng=np.random.default_rng(0))
    hidden, cache = layer.forward(np.ones((7, 3)))
    assert hidden.shape == (7, 5)
    assert len(cache) == 7


def test_backward_direction_is_forward_on_reversed_input():
    rng = np.random.default_rng(1)
    fwd = LstmLayer("f", 3, 4, Direction.FORWARD, rng)
    bwd = LstmLayer("b", 3, 4, Direction.BACKWARD, rng)
    for a, b in zip(fwd.parameters(), bwd.parameters()):
        b.assign(a.value)
    x = rng.normal(size=(6, 3))
    expected, _ = fwd.forward(x[::-1].copy())
    actual, _ = bwd.forward(x)
    np.testing.assert_allclose(actual, expected[::-1], rtol=0, atol=1e-12)


@pytest.mark.parametrize("direction", [Direction.FORWARD, Direction.BACKWARD])
def test_lstm_gradients(direction, finite_difference, rel_error):
    rng = np.random.default_rng(2)
    layer = LstmLayer("l", 3, 2, direction, rng)
    x = rng.normal(size=(5, 3))
    weights = rng.normal(size=(5, 2))

    def loss():
        return float(np.sum(layer.forward(x)[0] * weights))

    _, cache = layer.forward(x)
    grads = Gradients()
    dx = layer.backward(cache, weights, grads)
    assert rel_error(dx, finite_difference(loss, x)) < 1e-4
    for param in layer.parameters():
        assert rel_error(grads[param.name], finite_difference(loss, param.value)) < 1e-4


def test_lstm_step_matches_sequence():
    rng = np.random.default_rng(3)
    layer = LstmLayer("l", 2, 3, rng=rng)
    x = rng.normal(size=(4, 2))
    hidden, _ = layer.forward(x)
    h = c = np.zeros(3)
    for t in range(4):
        h, c, _ = layer.step(x[t], h, c)
        np.testing.assert_allclose(h, hidden[t], atol=1e-14)


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def test_lstm_matches_scalar_recomputation():
    rng = np.random.default_rng(12)
    layer = LstmLayer("l", 2, 2, rng=rng)
    for param in layer.parameters():
        param.assign(rng.normal(size=param.shape))
    x = rng.normal(size=(3, 2))
    hidden, _ = layer.forward(x)
    w_in, w_h, b = layer.w_input.value, layer.w_hidden.value, layer.bias.value
    h, c = [0.0, 0.0], [0.0, 0.0]
    for t in range(3):
        pre = [b[k] + sum(x[t, d] * w_in[d, k] for d in range(2)) + sum(h[j] * w_h[j, k] for j in range(2))
               for k in range(8)]
        c = [_sigmoid(pre[2 + u]) * c[u] + _sigmoid(pre[u]) * math.tanh(pre[4 + u]) for u in range(2)]
        h = [_sigmoid(pre[6 + u]) * math.tanh(c[u]) for u in range(2)]
        np.testing.assert_allclose(hidden[t], h, rtol=0, atol=1e-12)


def test_all_zero_lstm_stays_at_zero():
    layer = LstmLayer("l", 3, 4, rng=np.random.default_rng(0))
    for param in layer.parameters():
        param.assign(np.zeros(param.shape))
    hidden, _ = layer.forward(np.random.default_rng(1).normal(size=(5, 3)))
    np.testing.assert_array_equal(hidden, 0.0)


def test_stale_cache_rejected():
    layer = LstmLayer("l", 2, 2, rng=np.random.default_rng(0))
    _, cache = layer.forward(np.ones((3, 2)))
    layer.bias.assign(layer.bias.value + 1.0)
    with pytest.raises(InternalError):
        layer.backward(cache, np.ones((3, 2)))


def test_cache_from_other_layer_rejected():
    a = LstmLayer("a", 2, 2, rng=np.random.default_rng(0))
    b = LstmLayer("b", 2, 2, rng=np.random.default_rng(0))
    _, cache = a.forward(np.ones((3, 2)))
    with pytest.raises(InternalError):
        b.backward(cache, np.ones((3, 2)))


def test_wrong_input_width_rejected():
    layer = LstmLayer("l", 2, 2, rng=np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        layer.forward(np.ones((3, 4)))


def test_forget_bias_initialized_to_one():
    layer = LstmLayer("l", 2, 3, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(layer.bias.value[3:6], 1.0)
    np.testing.assert_array_equal(layer.bias.value[:3], 0.0)


def test_stack_output_and_dropout_only_in_training():
    rng = np.random.default_rng(4)
    stack = BiLstmStack("s", 3, 4, 3, rng)
    x = rng.normal(size=(5, 3))
    out, caches = stack.forward(x, 0.5, training=False)
    assert out.shape == (5, 8)
    assert all(mask is None for mask, _, _ in caches)
    again, _ = stack.forward(x, 0.5, training=False)
    np.testing.assert_array_equal(out, again)
    _, caches = stack.forward(x, 0.5, training=True, rng=np.random.default_rng(0))
    assert caches[0][0] is None
    assert caches[1][0] is not None and caches[2][0] is not None


def test_stack_gradients_with_dropout(finite_difference, rel_error):
    rng = np.random.default_rng(5)
    stack = BiLstmStack("s", 2, 2, 2, rng)
    x = rng.normal(size=(4, 2))
    weights = rng.normal(size=(4, 4))

    def loss():
        out, _ = stack.forward(x, 0.3, training=True, rng=np.random.default_rng(11))
        return float(np.sum(out * weights))

    _, caches = stack.forward(x, 0.3, training=True, rng=np.random.default_rng(11))
    grads = Gradients()
    dx = stack.backward(caches, weights, grads)
    assert rel_error(dx, finite_difference(loss, x)) < 1e-4
    name = "s.layer1.bwd.w_input"
    param = {p.name: p for p in stack.parameters()}[name]
    assert rel_error(grads[name], finite_difference(loss, param.value)) < 1e-4


def test_linear_gradients(finite_difference, rel_error):
    rng = np.random.default_rng(6)
    layer = Linear("proj", 4, 3, rng)
    x = rng.normal(size=(5, 4))
    weights = rng.normal(size=(5, 3))

    def loss():
        return float(np.sum(layer.forward(x) * weights))

    grads = Gradients()
    dx = layer.backward(x, weights, grads)
    assert rel_error(dx, finite_difference(loss, x)) < 1e-4
    assert rel_error(grads["proj.weight"], finite_difference(loss, layer.weight.value)) < 1e-4
    assert rel_error(grads["proj.bias"], finite_difference(loss, layer.bias.value)) < 1e-4


def test_linear_shape_mismatch():
    with pytest.raises(ConfigurationError):
        linear_forward(np.ones((2, 3)), np.ones((4, 5)), np.zeros(5))


def test_log_softmax_rows_normalized():
    logits = np.random.default_rng(7).normal(size=(6, 5)) * 30
    probs = np.exp(log_softmax(logits))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(logits), probs)


def test_log_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        log_softmax(np.array([[0.0, np.nan]]))


def test_dropout():
    x = np.ones((100, 10))
    out, mask = dropout_apply(x, 0.0, None)
    assert out is x
    out, mask = dropout_apply(x, 0.25, np.random.default_rng(0))
    assert set(np.unique(mask)) <= {0.0, 1.0 / 0.75}
    with pytest.raises(ConfigurationError):
        dropout_apply(x, 1.0, np.random.default_rng(0))


def test_dropout_preserves_expectation():
    x = np.full(100_000, 2.0)
    out, _ = dropout_apply(x, 0.25, np.random.default_rng(3))
    assert out.mean() == pytest.approx(2.0, rel=0.01)


def test_linear_backward_matches_layer():
    rng = np.random.default_rng(9)
    layer = Linear("out", 3, 2, rng)
    x = rng.normal(size=(4, 3))
    grad_out = rng.normal(size=(4, 2))
    grads = Gradients()
    expected_input = layer.backward(x, grad_out, grads)
    grad_input, grad_weight, grad_bias = linear_backward(x, grad_out, layer.weight.value)
    np.testing.assert_array_equal(grad_input, expected_input)
    np.testing.assert_allclose(grad_weight, x.T @ grad_out)
    np.testing.assert_allclose(grad_bias, grad_out.sum(axis=0))
    np.testing.assert_array_equal(grads["out.weight"], grad_weight)


def test_maxpool_ties_go_to_earlier_step():
    pooled, source = maxpool_time(np.array([[1.0, 2.0], [1.0, 3.0], [5.0, 0.0]]))
    np.testing.assert_array_equal(pooled, [[1.0, 3.0], [5.0, 0.0]])
    np.testing.assert_array_equal(source, [[0, 1], [2, 2]])


def test_maxpool_gradient(finite_difference, rel_error):
    rng = np.random.default_rng(8)
    x = rng.permutation(35).reshape(7, 5).astype(np.float64)
    weights = rng.normal(size=(4, 5))

    def loss():
        return float(np.sum(maxpool_time(x)[0] * weights))

    _, source = maxpool_time(x)
    grad = maxpool_time_backward(weights, source, 7)
    assert rel_error(grad, finite_difference(loss, x)) < 1e-4


def test_reduce_gradients_sums_buffers():
    params = {"w": Parameter("w", np.zeros(2))}
    buffers = [Gradients(), Gradients()]
    buffers[0].add(params["w"], np.array([1.0, 2.0]))
    buffers[1].add(params["w"], np.array([0.5, 0.5]))
    buffers[1].add(params["w"], np.array([0.5, 0.5]))
    reduce_gradients(params, buffers)
    np.testing.assert_array_equal(params["w"].grad, [2.0, 3.0])


def test_parameter_assign_checks_shape():
    param = Parameter("p", np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        param.assign(np.zeros(3))
