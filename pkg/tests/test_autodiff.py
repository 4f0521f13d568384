# -*- coding: utf-8 -*-
"""
计算带与向量-雅可比积测试
"""

import numpy as np
import pytest

from core.autodiff import TapeRecorder, backward, register_primitive, vjp
from core.errors import ShapeError, TapeError
from core.graph import LayerSpec, build_graph
from core.network import bias_id, finite_diff_jacobian, forward, forward_record, layer_id, weight_id
from tests.toy_models import batchnorm, conv, dense, mlp, unary


def _away_from_zero(x):
    return x + 0.05 * np.sign(x)


def _primitive_cases():
    rng = np.random.default_rng(0)
    return {
        "dense": (
            build_graph((3,), [dense("fc", "input", rng.normal(size=(2, 3)), rng.normal(size=2))], ["fc"]),
            ["input", weight_id("fc"), bias_id("fc")],
        ),
        "conv2d": (
            build_graph((2, 5, 5), [conv("c", "input", rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3),
                                         stride=2, pad=1)], ["c"]),
            ["input", weight_id("c"), bias_id("c")],
        ),
        "relu": (build_graph((6,), [unary("r", "relu", "input")], ["r"]), ["input"]),
        "add": (
            build_graph((5,), [
                unary("s", "sigmoid", "input"),
                unary("r", "relu", "input"),
                LayerSpec("a", "add", ("s", "r")),
            ], ["a"]),
            ["input"],
        ),
        "concat": (
            build_graph((2, 2, 2), [
                unary("s", "sigmoid", "input"),
                unary("r", "relu", "input"),
                LayerSpec("c", "concat", ("s", "r")),
            ], ["c"]),
            ["input"],
        ),
        "batchnorm": (build_graph((3, 2, 2), [batchnorm("bn", "input", rng, 3)], ["bn"]), ["input"]),
        "softmax": (build_graph((5,), [unary("p", "softmax", "input")], ["p"]), ["input"]),
        "sigmoid": (build_graph((5,), [unary("s", "sigmoid", "input")], ["s"]), ["input"]),
        "flatten": (
            build_graph((2, 2, 2), [unary("f", "flatten", "input"), unary("s", "sigmoid", "f")], ["s"]),
            ["input"],
        ),
        "avgpool": (
            build_graph((2, 4, 4), [unary("p", "avgpool", "input", kernel=2, stride=1)], ["p"]),
            ["input"],
        ),
    }


class TestForward:

    def test_identity_dense(self):
        graph = build_graph((2,), [dense("fc", "input", np.eye(2), np.zeros(2))], ["fc"])
        np.testing.assert_array_equal(forward(graph, np.array([1.0, 2.0])), [1.0, 2.0])

    def test_dense_relu_matches_hand_computation(self):
        w1 = np.array([[1.0, -1.0], [0.5, 2.0], [-1.0, 0.0]])
        b1 = np.array([0.0, -1.0, 0.5])
        w2 = np.array([[1.0, 2.0, -1.0]])
        graph = build_graph((2,), [
            dense("fc1", "input", w1, b1),
            unary("act", "relu", "fc1"),
            dense("fc2", "act", w2),
        ], ["act", "fc2"])
        x = np.array([3.0, 1.0])
        expected = w2 @ np.maximum(w1 @ x + b1, 0.0)
        np.testing.assert_allclose(forward(graph, x), expected, rtol=1e-15)

    def test_batch_rows_match_single_samples(self, mlp_graph, rng):
        batch = rng.normal(size=(5, 4))
        outputs = forward(mlp_graph, batch)
        assert outputs.shape == (5, 3)
        for row, x in zip(outputs, batch):
            np.testing.assert_allclose(row, forward(mlp_graph, x), rtol=1e-14, atol=1e-15)

    def test_comparison_activations_returned(self, mlp_graph, rng):
        _, activations, output = forward_record(mlp_graph, rng.normal(size=4))
        assert list(activations) == list(mlp_graph.comparison_points)
        np.testing.assert_array_equal(activations["fc3"], output)

    def test_replay_is_bit_exact(self, residual_graph, rng):
        tape, _, output = forward_record(residual_graph, rng.normal(size=4))
        np.testing.assert_array_equal(tape.replay(), output)

    def test_deterministic(self, conv_bn_graph, rng):
        x = rng.normal(size=conv_bn_graph.input_shape)
        np.testing.assert_array_equal(forward(conv_bn_graph, x), forward(conv_bn_graph, x))

    def test_wrong_input_shape(self, mlp_graph):
        with pytest.raises(ShapeError):
            forward(mlp_graph, np.zeros(5))

    def test_non_finite_input_rejected(self, mlp_graph):
        with pytest.raises(ShapeError):
            forward(mlp_graph, np.array([0.0, np.nan, 1.0, 2.0]))


class TestVjp:

    def test_linear_adjoint(self, rng):
        w = rng.normal(size=(3, 4))
        graph = build_graph((4,), [dense("fc", "input", w, rng.normal(size=3))], ["fc"])
        tape, _, _ = forward_record(graph, rng.normal(size=4))
        v = rng.normal(size=3)
        np.testing.assert_allclose(vjp(tape, v, ["input"])["input"], w.T @ v, rtol=1e-14)

    def test_zero_seed_gives_zero_gradients(self, mlp_graph, rng):
        tape, _, output = forward_record(mlp_graph, rng.normal(size=4))
        targets = [weight_id(layer.name) for layer in mlp_graph.weighted_layers()]
        grads = vjp(tape, np.zeros_like(output), targets)
        for target in targets:
            assert grads[target].shape == tape.shape(target)
            assert not np.any(grads[target])

    def test_linearity(self, residual_graph, rng):
        tape, _, output = forward_record(residual_graph, rng.normal(size=4))
        v1, v2 = rng.normal(size=output.shape), rng.normal(size=output.shape)
        targets = ["input", weight_id("fc1"), layer_id("act1")]
        combined = vjp(tape, 2.5 * v1 - 0.75 * v2, targets)
        g1, g2 = vjp(tape, v1, targets), vjp(tape, v2, targets)
        for target in targets:
            np.testing.assert_allclose(combined[target], 2.5 * g1[target] - 0.75 * g2[target], atol=1e-10)

    def test_three_layer_net_against_finite_differences(self, rng):
        graph = mlp(np.random.default_rng(1), sizes=(3, 4, 4, 2), activation="sigmoid")
        x = rng.normal(size=3)
        tape, _, output = forward_record(graph, x)
        v = rng.normal(size=output.shape)
        for layer in graph.weighted_layers():
            target = weight_id(layer.name)
            expected = v @ finite_diff_jacobian(graph, x, target)
            got = vjp(tape, v, [target])[target].ravel()
            np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-9)

    @pytest.mark.parametrize("kind", sorted(_primitive_cases()))
    def test_primitive_gradient_check(self, kind, rng):
        graph, targets = _primitive_cases()[kind]
        x = _away_from_zero(rng.normal(size=graph.input_shape))
        tape, _, output = forward_record(graph, x)
        v = rng.normal(size=output.shape)
        grads = vjp(tape, v, targets)
        for target in targets:
            expected = v.ravel() @ finite_diff_jacobian(graph, x, target)
            np.testing.assert_allclose(grads[target].ravel(), expected, rtol=1e-5, atol=1e-9)

    def test_conv_net_row_matches_jacobian(self, conv_bn_graph, rng):
        x = rng.normal(size=conv_bn_graph.input_shape)
        tape, _, output = forward_record(conv_bn_graph, x)
        jacobian = finite_diff_jacobian(conv_bn_graph, x, weight_id("conv"))
        for row in range(output.size):
            v = np.zeros(output.size)
            v[row] = 1.0
            got = vjp(tape, v.reshape(output.shape), [weight_id("conv")])[weight_id("conv")]
            np.testing.assert_allclose(got.ravel(), jacobian[row], atol=1e-4)

    def test_relu_subgradient_at_zero(self):
        graph = build_graph((3,), [unary("r", "relu", "input")], ["r"])
        tape, _, _ = forward_record(graph, np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(vjp(tape, np.ones(3), ["input"])["input"], [0.0, 0.0, 1.0])

    def test_multi_seed_backward_sums(self, residual_graph, rng):
        tape, activations, output = forward_record(residual_graph, rng.normal(size=4))
        seeds = {tape.output_id: rng.normal(size=output.shape),
                 layer_id("act1"): rng.normal(size=activations["act1"].shape)}
        both = backward(tape, seeds, ["input"])["input"]
        first = backward(tape, {tape.output_id: seeds[tape.output_id]}, ["input"])["input"]
        second = backward(tape, {layer_id("act1"): seeds[layer_id("act1")]}, ["input"])["input"]
        np.testing.assert_allclose(both, first + second, atol=1e-12)

    def test_batched_gradients_are_per_row(self, mlp_graph, rng):
        batch = rng.normal(size=(3, 4))
        tape, _, output = forward_record(mlp_graph, batch)
        v = rng.normal(size=output.shape)
        grads = backward(tape, {tape.output_id: v}, ["input"])["input"]
        for index in range(3):
            single, _, _ = forward_record(mlp_graph, batch[index])
            np.testing.assert_allclose(grads[index], vjp(single, v[index], ["input"])["input"], atol=1e-12)


class TestErrors:

    def test_seed_shape_mismatch(self, mlp_graph):
        tape, _, _ = forward_record(mlp_graph, np.zeros(4))
        with pytest.raises(ShapeError):
            vjp(tape, np.zeros(4), ["input"])

    def test_target_not_on_tape(self, mlp_graph):
        tape, _, output = forward_record(mlp_graph, np.zeros(4))
        with pytest.raises(TapeError):
            vjp(tape, np.zeros_like(output), ["weight:missing"])

    def test_duplicate_primitive(self):
        with pytest.raises(TapeError):
            register_primitive("dense", lambda inputs, attrs: inputs[0], lambda *args: [None])

    def test_duplicate_tensor_id(self):
        recorder = TapeRecorder()
        recorder.leaf("x", np.zeros(2))
        with pytest.raises(TapeError):
            recorder.leaf("x", np.ones(2))


class TestFiniteDifferenceJacobian:

    def test_scalar_doubling(self):
        graph = build_graph((1,), [dense("fc", "input", [[2.0]])], ["fc"])
        np.testing.assert_allclose(finite_diff_jacobian(graph, np.array([0.3]), "input"), [[2.0]], atol=1e-9)

    def test_dense_jacobian_is_weight(self, rng):
        w = rng.normal(size=(2, 2))
        graph = build_graph((2,), [dense("fc", "input", w)], ["fc"])
        np.testing.assert_allclose(finite_diff_jacobian(graph, rng.normal(size=2), "input"), w, atol=1e-6)

    def test_oversized_target(self, rng):
        graph = build_graph((30,), [dense("fc", "input", rng.normal(size=(20, 30)))], ["fc"])
        with pytest.raises(ShapeError):
            finite_diff_jacobian(graph, np.zeros(30), weight_id("fc"))

    def test_batch_input_rejected(self, mlp_graph):
        with pytest.raises(ShapeError):
            finite_diff_jacobian(mlp_graph, np.zeros((2, 4)), "input")
