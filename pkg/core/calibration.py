# -*- coding: utf-8 -*-
"""
校准模块
按 Hessian 加权 MSE (HMSE) 或普通 MSE 搜索逐通道权重阈值，按 MSE 搜索激活量化范围，
并组装优化前的初始量化状态
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import (
    DEGENERATE_RANGE_WIDTH,
    FLOAT_BITS,
    MAX_BITS,
    MIN_BITS,
    THRESHOLD_GRID_DENOMINATOR,
    THRESHOLD_GRID_STEPS,
    THRESHOLD_METRICS,
    ZERO_CHANNEL_THRESHOLD,
)
from .errors import CalibrationError, ShapeError
from .graph import Dataset, NetworkGraph
from .network import comparison_activations
from .quantizers import ActQuantParams, QuantState, WeightQuantParams, quantize_activation, round_half_away
from .run_config import EptqConfig

logger = logging.getLogger(__name__)

HessianWeights = Union[np.ndarray, str]


def hmse(w: np.ndarray, w_q: np.ndarray, h: np.ndarray) -> float:
    """Σ_i h_i (w_i − w̃_i)²，省略常数 c"""
    w, w_q, h = (np.asarray(a, dtype=np.float64).ravel() for a in (w, w_q, h))
    if not (w.shape == w_q.shape == h.shape):
        raise ShapeError(f"HMSE 形状不一致: {w.shape}, {w_q.shape}, {h.shape}")
    if np.any(h < 0):
        raise CalibrationError("Hessian 权重不能为负")
    return float(np.sum(h * (w - w_q) ** 2))


@dataclass(frozen=True)
class ThresholdSearchSpec:
    """阈值候选网格 α_j = 1 − j/denominator，j = 0..n_steps−1"""
    n_steps: int = THRESHOLD_GRID_STEPS
    denominator: int = THRESHOLD_GRID_DENOMINATOR
    metric: str = "hmse"

    def __post_init__(self):
        if self.metric not in THRESHOLD_METRICS:
            raise CalibrationError(f"未知阈值度量: {self.metric}")
        if not 1 <= self.n_steps <= self.denominator:
            raise CalibrationError(f"网格步数 {self.n_steps} 必须在 1..{self.denominator} 内")

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - np.arange(self.n_steps) / self.denominator


@dataclass(frozen=True, eq=False)
class ThresholdSelection:
    """逐通道阈值搜索结果"""
    thresholds: np.ndarray
    objective: np.ndarray  # 每个通道在最优阈值处的目标值
    zero_channels: Tuple[int, ...] = ()

    @property
    def total_objective(self) -> float:
        return float(np.sum(self.objective))


@dataclass(frozen=True)
class RangeSelection:
    """激活范围搜索结果"""
    params: ActQuantParams
    error: float
    degenerate: bool = False


def _no_clip_threshold(max_abs: np.ndarray, bits: int) -> np.ndarray:
    # α = 1 时最大绝对值正好落在 2^(b−1)−1 上
    half = 2.0 ** (bits - 1)
    return max_abs * half / (half - 1.0)


def select_threshold(w: np.ndarray, h: HessianWeights, bits: int,
                     spec: Optional[ThresholdSearchSpec] = None) -> ThresholdSelection:
    """
    逐通道搜索权重阈值

    Args:
        w: 权重，第 0 轴为输出通道
        h: 与 w 同元素数的 Hessian 对角，或 "uniform"（普通 MSE）
        bits: 权重位宽
        spec: 候选网格；metric 为 "mse" 时忽略 h

    Returns:
        ThresholdSelection，平局取较大阈值
    """
    spec = spec or ThresholdSearchSpec()
    if not MIN_BITS <= bits <= MAX_BITS:
        raise CalibrationError(f"阈值搜索需要 {MIN_BITS}..{MAX_BITS} 位，实际 {bits}")
    w = np.asarray(w, dtype=np.float64)
    if isinstance(h, str):
        if h != "uniform":
            raise CalibrationError(f"未知 Hessian 权重: {h}")
        weights = np.ones_like(w)
    elif spec.metric == "mse":
        weights = np.ones_like(w)
    else:
        weights = np.asarray(h, dtype=np.float64)
        if weights.size != w.size:
            raise ShapeError(f"Hessian 对角元素数 {weights.size} 与权重 {w.size} 不一致")
        weights = weights.reshape(w.shape)
        if np.any(weights < 0):
            raise CalibrationError("Hessian 权重不能为负")

    channels = w.reshape(w.shape[0], -1)
    weights = weights.reshape(w.shape[0], -1)
    alphas = spec.alphas
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1

    thresholds = np.empty(channels.shape[0])
    objective = np.zeros(channels.shape[0])
    zero_channels = []
    for c in range(channels.shape[0]):
        max_abs = np.max(np.abs(channels[c]))
        if max_abs <= ZERO_CHANNEL_THRESHOLD:
            thresholds[c] = alphas[-1] * ZERO_CHANNEL_THRESHOLD
            zero_channels.append(c)
            continue
        candidates = alphas * _no_clip_threshold(max_abs, bits)
        steps = (candidates / 2.0 ** (bits - 1))[:, np.newaxis]
        quantized = np.clip(round_half_away(channels[c] / steps), qmin, qmax) * steps
        errors = np.sum(weights[c] * (channels[c] - quantized) ** 2, axis=1)
        best = int(np.argmin(errors))  # 首次出现即较大阈值
        thresholds[c] = candidates[best]
        objective[c] = errors[best]

    if zero_channels:
        logger.warning("%d 个全零权重通道，使用最小阈值 %.3g", len(zero_channels), thresholds[zero_channels[0]])
    return ThresholdSelection(thresholds, objective, tuple(zero_channels))


def _flatten_samples(samples: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        values = samples.ravel()
    else:
        if len(samples) == 0:
            raise CalibrationError("激活范围搜索至少需要一个校准张量")
        values = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in samples])
    if values.size == 0:
        raise CalibrationError("激活范围搜索至少需要一个校准张量")
    return values.astype(np.float64)


def select_activation_range(samples: Union[np.ndarray, Sequence[np.ndarray]], bits: int,
                            n_steps: int = THRESHOLD_GRID_STEPS,
                            denominator: int = THRESHOLD_GRID_DENOMINATOR) -> RangeSelection:
    """
    在观测范围 [min z, max z] 内按 α 收缩的候选范围中选均方量化误差最小者

    收缩以 0 截断到观测范围后的点为中心：跨零的数据收缩到 α·[min, max]，
    全正（或全负）的数据固定靠近零的一端，只收缩另一端。
    常数张量退化为宽度 ε 的范围并标记。
    """
    values = _flatten_samples(samples)
    low, high = float(values.min()), float(values.max())
    if high - low <= DEGENERATE_RANGE_WIDTH:
        logger.warning("激活范围退化 [%g, %g]，使用宽度 %g 的回退范围", low, high, DEGENERATE_RANGE_WIDTH)
        params = ActQuantParams(low, low + DEGENERATE_RANGE_WIDTH, bits)
        error = float(np.mean((values - quantize_activation(values, params)) ** 2))
        return RangeSelection(params, error, degenerate=True)

    alphas = ThresholdSearchSpec(n_steps, denominator, "mse").alphas
    center = min(max(0.0, low), high)
    best_params, best_error = None, np.inf
    for alpha in alphas:
        lo, hi = center + alpha * (low - center), center + alpha * (high - center)
        if not lo < hi:
            continue
        params = ActQuantParams(lo, hi, bits)
        error = float(np.mean((values - quantize_activation(values, params)) ** 2))
        if error < best_error:
            best_params, best_error = params, error
    return RangeSelection(best_params, best_error)


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    """初始量化状态及每层的搜索记录"""
    state: QuantState
    thresholds: Mapping[str, ThresholdSelection] = field(default_factory=dict)
    ranges: Mapping[str, RangeSelection] = field(default_factory=dict)


def initialize_quant_state(graph: NetworkGraph, dataset: Dataset, cfg: EptqConfig,
                           weight_diags: Optional[Mapping[str, np.ndarray]] = None,
                           spec: Optional[ThresholdSearchSpec] = None) -> CalibrationResult:
    """
    组装优化前的量化状态：带权层阈值 + 比较点激活范围，舍入为就近舍入

    Args:
        graph: 已分配位宽的网络图
        dataset: 校准数据（激活范围）
        cfg: 优化配置（阈值度量、渐进模式、种子）
        weight_diags: 层名 -> Hessian 对角；metric 为 hmse 时必需
        spec: 阈值网格，默认按 cfg.metric 构造
    """
    spec = spec or ThresholdSearchSpec(metric=cfg.metric)
    thresholds: Dict[str, ThresholdSelection] = {}
    weights = {}

    for layer in graph.weighted_layers():
        if layer.bits_weight == FLOAT_BITS:
            continue
        if spec.metric == "hmse":
            if weight_diags is None or layer.name not in weight_diags:
                raise CalibrationError(f"HMSE 阈值搜索缺少层 {layer.name} 的 Hessian 对角")
            h: HessianWeights = weight_diags[layer.name]
        else:
            h = "uniform"
        selection = select_threshold(layer.weight, h, layer.bits_weight, spec)
        thresholds[layer.name] = selection
        weights[layer.name] = WeightQuantParams(selection.thresholds, layer.bits_weight)
        logger.debug("层 %s 阈值搜索完成 (%s)，目标值 %.4g", layer.name, spec.metric, selection.total_objective)

    ranges: Dict[str, RangeSelection] = {}
    quantized_points = [p for p in graph.comparison_points if graph.layer(p).bits_activation != FLOAT_BITS]
    if quantized_points:
        if len(dataset) == 0:
            raise CalibrationError("激活范围校准需要非空数据集")
        activations = comparison_activations(graph, dataset.inputs)
        for point in quantized_points:
            ranges[point] = select_activation_range(activations[point], graph.layer(point).bits_activation)

    state = QuantState(
        weights=weights,
        activations={point: selection.params for point, selection in ranges.items()},
        schedule=cfg.schedule(),
        gradual=cfg.gradual,
        mask_seed=cfg.mask_stream_seed,
    )
    return CalibrationResult(state, thresholds, ranges)
