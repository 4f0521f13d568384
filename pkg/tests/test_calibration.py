# -*- coding: utf-8 -*-
"""
HMSE 阈值搜索、激活范围搜索与初始量化状态
"""

import logging

import numpy as np
import pytest

from core.calibration import (
    ThresholdSearchSpec,
    hmse,
    initialize_quant_state,
    select_activation_range,
    select_threshold,
)
from core.errors import CalibrationError, ShapeError
from core.graph import Dataset, assign_bit_widths
from core.hessian import lfh_weight_diags
from core.network import comparison_activations
from core.quantizers import WeightQuantParams, quantize_weights_nearest
from core.run_config import EptqConfig
from tests.toy_models import mlp


def _grid_errors(channel, h, bits):
    """逐个候选阈值的 HMSE，暴力基准"""
    alphas = ThresholdSearchSpec().alphas
    no_clip = np.max(np.abs(channel)) * 2 ** (bits - 1) / (2 ** (bits - 1) - 1)
    errors = []
    for alpha in alphas:
        p = WeightQuantParams(np.array([alpha * no_clip]), bits)
        errors.append(hmse(channel, quantize_weights_nearest(channel[None, :], p)[0], h))
    return alphas * no_clip, np.array(errors)


class TestHmse:

    def test_weighted_sum(self):
        assert hmse(np.array([1.0, 2.0]), np.array([0.5, 2.0]), np.array([4.0, 1.0])) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hmse(np.zeros(3), np.zeros(2), np.ones(3))

    def test_negative_weights(self):
        with pytest.raises(CalibrationError):
            hmse(np.zeros(2), np.zeros(2), np.array([1.0, -1.0]))


class TestThresholdGrid:

    def test_default_grid(self):
        alphas = ThresholdSearchSpec().alphas
        assert alphas.size == 96
        assert alphas[0] == 1.0
        assert alphas[-1] == pytest.approx(1.0 - 95 / 128)
        assert np.all(np.diff(alphas) < 0)

    def test_invalid_spec(self):
        with pytest.raises(CalibrationError):
            ThresholdSearchSpec(metric="kl")
        with pytest.raises(CalibrationError):
            ThresholdSearchSpec(n_steps=200)


class TestSelectThreshold:

    def test_exactly_representable_channel(self):
        s = 0.25
        w = np.array([[7 * s, -3 * s, 2 * s, 0.0, -8 * s + s]])
        selection = select_threshold(w, np.ones(w.size), 4)
        np.testing.assert_allclose(selection.thresholds, [8 * s])
        assert selection.objective[0] == pytest.approx(0.0, abs=1e-20)

    def test_matches_exhaustive_search(self, rng):
        w = rng.normal(size=(3, 40))
        h = rng.uniform(0.0, 2.0, w.shape)
        selection = select_threshold(w, h, 3)
        for c in range(3):
            candidates, errors = _grid_errors(w[c], h[c], 3)
            best = int(np.argmin(errors))
            assert selection.thresholds[c] == pytest.approx(candidates[best])
            assert selection.objective[c] == pytest.approx(errors.min())

    def test_hessian_weight_protects_outlier(self, rng):
        channel = rng.normal(scale=0.3, size=2000)
        channel[0] = 10.0
        h = np.ones(channel.size)
        h[0] = 1e6
        w = channel[None, :]
        with_hessian = select_threshold(w, h, 4)
        plain = select_threshold(w, h, 4, ThresholdSearchSpec(metric="mse"))
        no_clip = 10.0 * 8 / 7
        np.testing.assert_allclose(with_hessian.thresholds, [no_clip])
        assert plain.thresholds[0] < with_hessian.thresholds[0]

        def weighted_error(selection):
            p = WeightQuantParams(selection.thresholds, 4)
            return hmse(w, quantize_weights_nearest(w, p), h)

        assert weighted_error(with_hessian) <= weighted_error(plain)

    def test_uniform_equals_mse_metric(self, rng):
        w = rng.normal(size=(2, 30))
        uniform = select_threshold(w, "uniform", 4)
        mse = select_threshold(w, rng.uniform(size=w.size), 4, ThresholdSearchSpec(metric="mse"))
        np.testing.assert_array_equal(uniform.thresholds, mse.thresholds)

    def test_invariant_to_hessian_scale(self, rng):
        w = rng.normal(size=(4, 25))
        h = rng.uniform(0.1, 3.0, w.shape)
        np.testing.assert_array_equal(select_threshold(w, h, 4).thresholds, select_threshold(w, 4 * h, 4).thresholds)

    def test_scales_with_weights(self, rng):
        w = rng.normal(size=(4, 25))
        h = rng.uniform(0.1, 3.0, w.shape)
        np.testing.assert_allclose(select_threshold(2 * w, h, 4).thresholds, 2 * select_threshold(w, h, 4).thresholds)

    def test_conv_weights_per_output_channel(self, rng):
        w = rng.normal(size=(3, 2, 3, 3))
        selection = select_threshold(w, np.ones(w.size), 4)
        assert selection.thresholds.shape == (3,)
        no_clip = np.max(np.abs(w.reshape(3, -1)), axis=1) * 8 / 7
        assert np.all(selection.thresholds <= no_clip + 1e-12)
        assert np.all(selection.thresholds >= (1 - 95 / 128) * no_clip - 1e-12)

    def test_zero_channel_flagged(self, rng, caplog):
        w = rng.normal(size=(3, 10))
        w[1] = 0.0
        with caplog.at_level(logging.WARNING, logger="core.calibration"):
            selection = select_threshold(w, np.ones(w.size), 4)
        assert selection.zero_channels == (1,)
        assert selection.thresholds[1] == pytest.approx((1 - 95 / 128) * 1e-8)
        assert np.all(selection.thresholds > 0)
        assert "全零" in caplog.text

    def test_invalid_bits(self):
        with pytest.raises(CalibrationError):
            select_threshold(np.ones((1, 3)), "uniform", 1)
        with pytest.raises(CalibrationError):
            select_threshold(np.ones((1, 3)), "uniform", 32)

    def test_hessian_size_mismatch(self):
        with pytest.raises(ShapeError):
            select_threshold(np.ones((2, 3)), np.ones(5), 4)

    def test_negative_hessian(self):
        with pytest.raises(CalibrationError):
            select_threshold(np.ones((1, 3)), np.array([1.0, -1.0, 1.0]), 4)


class TestActivationRange:

    def test_grid_values_keep_full_range(self):
        delta = 3.0 / 7
        z = -1.0 + np.arange(8) * delta
        selection = select_activation_range(np.tile(z, 5), 3)
        assert selection.params.lo == -1.0
        assert selection.params.hi == pytest.approx(2.0)
        assert selection.error == pytest.approx(0.0, abs=1e-20)
        assert not selection.degenerate

    def test_outlier_is_clipped(self, rng):
        z = np.append(rng.uniform(0.0, 1.0, 10000), 50.0)
        selection = select_activation_range(z, 4)
        assert selection.params.hi < 50.0

    def test_positive_data_keeps_lower_end(self, rng):
        z = 0.2 + 0.7 * rng.uniform(0.0, 1.0, 5000)
        selection = select_activation_range(z, 4)
        assert selection.params.lo == pytest.approx(z.min())
        assert z.min() <= selection.params.hi <= z.max()

    def test_negative_data_keeps_upper_end(self, rng):
        z = -3.0 - rng.exponential(1.0, 5000)
        selection = select_activation_range(z, 4)
        assert selection.params.hi == pytest.approx(z.max())
        assert z.min() <= selection.params.lo < selection.params.hi

    def test_candidates_stay_inside_observed_range(self, rng):
        for z in (rng.uniform(0.5, 1.0, 300), rng.normal(size=300), -rng.uniform(1.0, 2.0, 300)):
            selection = select_activation_range(z, 3)
            assert z.min() - 1e-12 <= selection.params.lo < selection.params.hi <= z.max() + 1e-12

    def test_list_of_tensors(self, rng):
        parts = [rng.normal(size=(4, 3)), rng.normal(size=7)]
        joined = select_activation_range(np.concatenate([p.ravel() for p in parts]), 6)
        split = select_activation_range(parts, 6)
        assert split.params.lo == joined.params.lo and split.params.hi == joined.params.hi

    def test_constant_tensor_is_degenerate(self, caplog):
        with caplog.at_level(logging.WARNING, logger="core.calibration"):
            selection = select_activation_range(np.zeros(20), 8)
        assert selection.degenerate
        assert selection.params.lo == 0.0
        assert selection.params.hi == pytest.approx(1e-6)
        assert "退化" in caplog.text

    def test_empty(self):
        with pytest.raises(CalibrationError):
            select_activation_range([], 8)


class TestInitialState:

    def test_covers_quantized_layers_and_points(self, mlp_graph, mlp_data):
        graph = assign_bit_widths(mlp_graph, 4, 8)
        result = initialize_quant_state(graph, mlp_data, EptqConfig(metric="mse"))
        assert set(result.state.weights) == {"fc1", "fc2", "fc3"}
        assert set(result.state.activations) == set(graph.comparison_points)
        assert all(p.rounding is None for p in result.state.weights.values())
        assert result.state.weights["fc2"].bits == 4
        assert result.state.weights["fc1"].bits == 8

    def test_float_layers_skipped(self, mlp_graph, mlp_data):
        graph = assign_bit_widths(mlp_graph, 4, 32, overrides={"fc2": 32})
        result = initialize_quant_state(graph, mlp_data, EptqConfig(metric="mse"))
        assert "fc2" not in result.state.weights
        assert result.state.activations == {}

    def test_hmse_requires_diagonals(self, mlp_graph, mlp_data):
        graph = assign_bit_widths(mlp_graph, 4, 8)
        with pytest.raises(CalibrationError):
            initialize_quant_state(graph, mlp_data, EptqConfig(metric="hmse"))

    def test_hmse_uses_given_diagonals(self, mlp_graph, mlp_data):
        graph = assign_bit_widths(mlp_graph, 4, 8)
        diags = {layer.name: np.ones(layer.weight.size) for layer in graph.weighted_layers()}
        with_ones = initialize_quant_state(graph, mlp_data, EptqConfig(metric="hmse"), diags)
        plain = initialize_quant_state(graph, mlp_data, EptqConfig(metric="mse"))
        for name in with_ones.state.weights:
            np.testing.assert_array_equal(with_ones.state.weights[name].thresholds,
                                          plain.state.weights[name].thresholds)

    def test_ranges_from_float_activations(self, mlp_graph, mlp_data):
        graph = assign_bit_widths(mlp_graph, 4, 8)
        result = initialize_quant_state(graph, mlp_data, EptqConfig(metric="mse"))
        activations = comparison_activations(graph, mlp_data.inputs)
        for point, selection in result.ranges.items():
            expected = select_activation_range(activations[point], graph.layer(point).bits_activation)
            assert selection.params == expected.params

    def test_hessian_thresholds_never_lose_on_weighted_error(self):
        for seed in range(20):
            graph = assign_bit_widths(mlp(np.random.default_rng(seed), sizes=(4, 8, 8, 3)), 3, 32,
                                      edge_layers_8bit=False)
            data = Dataset(np.random.default_rng(100 + seed).normal(size=(16, 4)))
            diags = lfh_weight_diags(graph, data, M=8, seed=seed)
            with_hessian = initialize_quant_state(graph, data, EptqConfig(metric="hmse"), diags).state
            plain = initialize_quant_state(graph, data, EptqConfig(metric="mse")).state
            for layer in graph.weighted_layers():
                h = diags[layer.name].reshape(layer.weight.shape)

                def weighted_error(state):
                    quantized = quantize_weights_nearest(layer.weight, state.weights[layer.name])
                    return hmse(layer.weight, quantized, h)

                assert weighted_error(with_hessian) <= weighted_error(plain) * (1 + 1e-12) + 1e-15
