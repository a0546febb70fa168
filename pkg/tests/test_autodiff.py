"""
Tests for the tape-based autodiff, the LSTM/affine layers and attention.
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.autodiff import (ComputationTape, Tensor, concat, gradients, grad_check, matmul, mean, mul, reshape,
                          sigmoid, slice_, softmax, sqrt, square, stack, sum_, tanh, transpose)
from src.errors import ShapeError
from src.layers import AffineMap, LstmStack, scaled_dot_attention


def random_params(shapes, seed=0):
    rng = np.random.default_rng(seed)
    return {name: rng.normal(size=shape) for name, shape in shapes.items()}


class TestPrimitives:
    def test_product_rule(self):
        tape = ComputationTape()
        x = tape.variable(np.array([1.0, 2.0, 3.0]))
        y = tape.variable(np.array([4.0, 5.0, 6.0]))
        tape.backward(sum_(x * y))
        np.testing.assert_array_equal(x.grad, [4.0, 5.0, 6.0])
        np.testing.assert_array_equal(y.grad, [1.0, 2.0, 3.0])

    def test_broadcast_gradient_is_reduced(self):
        tape = ComputationTape()
        x = tape.variable(np.ones((3, 4)))
        b = tape.variable(np.ones(4))
        tape.backward(sum_(x + b))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_reused_tensor_accumulates(self):
        tape = ComputationTape()
        x = tape.variable(np.array(3.0))
        tape.backward(x * x + x)
        assert x.grad == pytest.approx(7.0)

    def test_backward_needs_scalar(self):
        tape = ComputationTape()
        x = tape.variable(np.ones(3))
        with pytest.raises(ShapeError):
            tape.backward(x * 2.0)

    def test_constants_are_not_recorded(self):
        tape = ComputationTape()
        y = Tensor(np.ones(3)) * 2.0
        assert y.tape is None and len(tape) == 0

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r'\(2, 3\).*\(2, 3\)'):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_softmax_rows_sum_to_one(self):
        y = softmax(Tensor(np.array([[1000.0, 1001.0], [0.0, 0.0]])))
        np.testing.assert_allclose(y.value.sum(axis=-1), 1.0)

    def test_gradients_helper(self):
        value, grads = gradients(lambda p: sum_(square(p['w'])), {'w': np.array([1.0, -2.0])})
        assert value == pytest.approx(5.0)
        np.testing.assert_allclose(grads['w'], [2.0, -4.0])

    @pytest.mark.parametrize('op', ['sigmoid', 'tanh', 'sqrt', 'softmax', 'slice', 'stack', 'concat',
                                    'matmul', 'mean', 'reshape', 'transpose'])
    def test_primitive_gradients_match_finite_differences(self, op):
        rng = np.random.default_rng(1)
        params = {'a': rng.uniform(0.5, 1.5, size=(3, 4)), 'b': rng.normal(size=(4, 2))}

        def closure(p):
            a, b = p['a'], p['b']
            out = {
                'sigmoid': lambda: sigmoid(a),
                'tanh': lambda: tanh(a),
                'sqrt': lambda: sqrt(a),
                'softmax': lambda: softmax(a, axis=-1) * np.arange(4.0),
                'slice': lambda: slice_(a, (slice(None), slice(1, 3))),
                'stack': lambda: stack([a, a * 2.0], axis=1),
                'concat': lambda: concat([a, transpose(b)], axis=0),
                'matmul': lambda: matmul(a, b),
                'mean': lambda: mean(a, axis=0),
                'reshape': lambda: reshape(a, (2, 6)),
                'transpose': lambda: transpose(a),
            }[op]()
            weights = np.linspace(-1.0, 1.0, out.value.size).reshape(out.shape)
            return sum_(mul(out, weights)) + sum_(b)

        report = grad_check(closure, params, tolerance=1e-6)
        assert report.passed, report.errors


class TestLayers:
    def test_affine_map(self):
        layer = AffineMap('fc', 3, 2)
        params = {k: Tensor(v) for k, v in random_params(layer.parameter_shapes()).items()}
        x = np.ones((5, 3))
        out = layer(Tensor(x), params)
        expected = x @ params['fc.weight'].value.T + params['fc.bias'].value
        np.testing.assert_allclose(out.value, expected)

    def test_affine_rejects_wrong_width(self):
        layer = AffineMap('fc', 3, 2)
        params = {k: Tensor(v) for k, v in random_params(layer.parameter_shapes()).items()}
        with pytest.raises(ShapeError):
            layer(Tensor(np.ones((5, 4))), params)

    def test_lstm_forget_bias_initialized_to_one(self):
        layer = LstmStack('enc', 1, 4, num_layers=2)
        params = layer.init(np.random.default_rng(0))
        np.testing.assert_array_equal(params['enc.l0.bias'][4:8], 1.0)
        np.testing.assert_array_equal(params['enc.l1.bias'][:4], 0.0)

    def test_lstm_matches_reference_cell(self):
        h = 3
        layer = LstmStack('enc', 2, h, num_layers=1)
        raw = random_params(layer.parameter_shapes(), seed=2)
        params = {k: Tensor(v) for k, v in raw.items()}
        x = np.random.default_rng(3).normal(size=(1, 4, 2))
        out, states = layer.forward(x, params)

        def sig(z):
            return 1.0 / (1.0 + np.exp(-z))

        hidden, cell = np.zeros(h), np.zeros(h)
        for t in range(4):
            z = raw['enc.l0.w_ih'] @ x[0, t] + raw['enc.l0.w_hh'] @ hidden + raw['enc.l0.bias']
            i, f, g, o = sig(z[:h]), sig(z[h:2 * h]), np.tanh(z[2 * h:3 * h]), sig(z[3 * h:])
            cell = f * cell + i * g
            hidden = o * np.tanh(cell)
            np.testing.assert_allclose(out.value[0, t], hidden, atol=1e-12)
        np.testing.assert_allclose(states[0][1].value[0], cell, atol=1e-12)

    def test_lstm_rejects_bad_input(self):
        layer = LstmStack('enc', 1, 3)
        params = {k: Tensor(v) for k, v in random_params(layer.parameter_shapes()).items()}
        with pytest.raises(ShapeError):
            layer.forward(np.ones((2, 5)), params)

    def test_lstm_gradients(self):
        layer = LstmStack('enc', 1, 3, num_layers=2)
        params = random_params(layer.parameter_shapes(), seed=4)
        x = np.random.default_rng(5).normal(size=(2, 5, 1))

        def closure(p):
            out, _ = layer.forward(x, p)
            return sum_(mul(out, np.linspace(-1.0, 1.0, out.value.size).reshape(out.shape)))

        report = grad_check(closure, params, tolerance=1e-6)
        assert report.passed, report.errors


class TestAttention:
    def test_weights_form_distribution(self):
        rng = np.random.default_rng(0)
        context, weights = scaled_dot_attention(rng.normal(size=(2, 4)), rng.normal(size=(2, 6, 4)),
                                                rng.normal(size=(2, 6, 4)))
        assert context.shape == (2, 4) and weights.shape == (2, 6)
        np.testing.assert_allclose(weights.value.sum(axis=-1), 1.0)

    def test_identical_keys_average_values(self):
        values = np.arange(12.0).reshape(1, 3, 4)
        context, weights = scaled_dot_attention(np.ones((1, 4)), np.ones((1, 3, 4)), values)
        np.testing.assert_allclose(weights.value, 1.0 / 3.0)
        np.testing.assert_allclose(context.value[0], values[0].mean(axis=0))

    def test_misaligned_shapes(self):
        with pytest.raises(ShapeError):
            scaled_dot_attention(np.ones((1, 4)), np.ones((1, 3, 5)), np.ones((1, 3, 5)))

    def test_attention_gradients(self):
        rng = np.random.default_rng(6)
        params = {'q': rng.normal(size=(2, 3)), 'k': rng.normal(size=(2, 5, 3)), 'v': rng.normal(size=(2, 5, 3))}

        def closure(p):
            context, _ = scaled_dot_attention(p['q'], p['k'], p['v'])
            return sum_(square(context))

        assert grad_check(closure, params, tolerance=1e-6).passed
