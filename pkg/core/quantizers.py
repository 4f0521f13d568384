# -*- coding: utf-8 -*-
"""
量化器模块
逐通道对称权重量化（含可学习软舍入）、逐张量均匀激活量化以及渐进式激活量化
"""

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np
from scipy.special import expit

from config.settings import (
    FLOAT_BITS,
    ROUNDING_UNDECIDED_HIGH,
    ROUNDING_UNDECIDED_LOW,
    SOFT_ROUNDING_GAMMA,
    SOFT_ROUNDING_ZETA,
)
from .autodiff import register_primitive
from .errors import QuantizationError, ShapeError

logger = logging.getLogger(__name__)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """四舍五入，平局远离零"""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _per_channel(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((-1,) + (1,) * (ndim - 1))


@dataclass(frozen=True, eq=False)
class WeightQuantParams:
    """
    逐通道对称权重量化参数

    thresholds 为校准得到的阈值 t；log_scale 为可学习的逐通道对数缩放，实际步长为
    t·exp(log_scale)/2^(bits−1)。rounding 为软舍入变量 v，None 表示就近舍入。
    """
    thresholds: np.ndarray
    bits: int
    rounding: Optional[np.ndarray] = None
    log_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(~(self.thresholds > 0)):
            raise QuantizationError("阈值必须为正")
        if self.log_scale is None:
            object.__setattr__(self, "log_scale", np.zeros_like(self.thresholds))

    @property
    def quantized(self) -> bool:
        return self.bits != FLOAT_BITS

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def grid_step(self) -> np.ndarray:
        """舍入网格的步长（由校准阈值决定）"""
        return self.thresholds / 2.0 ** (self.bits - 1)

    @property
    def step(self) -> np.ndarray:
        """实际步长 s_c"""
        return self.grid_step * np.exp(self.log_scale)

    @property
    def effective_thresholds(self) -> np.ndarray:
        return self.thresholds * np.exp(self.log_scale)

    def check(self, weight: np.ndarray) -> None:
        if weight.shape[0] != self.thresholds.shape[0]:
            raise ShapeError(
                f"权重通道数 {weight.shape[0]} 与阈值个数 {self.thresholds.shape[0]} 不一致"
            )
        if self.rounding is not None and self.rounding.shape != weight.shape:
            raise ShapeError(f"舍入变量形状 {self.rounding.shape} 与权重 {weight.shape} 不一致")


@dataclass(frozen=True)
class ActQuantParams:
    """逐张量均匀仿射激活量化参数"""
    lo: float
    hi: float
    bits: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise QuantizationError(f"激活量化范围退化: [{self.lo}, {self.hi}]")

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    @property
    def delta(self) -> float:
        return (self.hi - self.lo) / (self.levels - 1)


@dataclass(frozen=True)
class GradualSchedule:
    """渐进式激活量化的浮点比例 P 的线性衰减计划"""
    total_iterations: int
    decay_iterations: int
    default_initial: float = 1.0
    initial: Mapping[str, float] = field(default_factory=dict)

    def initial_for(self, layer: str) -> float:
        return float(self.initial.get(layer, self.default_initial))


def schedule_P(schedule: GradualSchedule, layer: str, iteration: int) -> float:
    """P^(ℓ)(i) = P0^(ℓ)·max(0, 1 − i/N_decay)"""
    initial = schedule.initial_for(layer)
    if schedule.decay_iterations <= 0:
        return 0.0
    return initial * max(0.0, 1.0 - iteration / schedule.decay_iterations)


def rectified_sigmoid(v: np.ndarray) -> np.ndarray:
    """h(v) = clamp(sigmoid(v)·(ζ−γ)+γ, 0, 1)"""
    return np.clip(expit(v) * (SOFT_ROUNDING_ZETA - SOFT_ROUNDING_GAMMA) + SOFT_ROUNDING_GAMMA, 0.0, 1.0)


def rectified_sigmoid_grad(v: np.ndarray) -> np.ndarray:
    sig = expit(v)
    raw = sig * (SOFT_ROUNDING_ZETA - SOFT_ROUNDING_GAMMA) + SOFT_ROUNDING_GAMMA
    inside = (raw > 0.0) & (raw < 1.0)
    return (SOFT_ROUNDING_ZETA - SOFT_ROUNDING_GAMMA) * sig * (1.0 - sig) * inside


def rounding_offset(v: np.ndarray, hard: bool) -> np.ndarray:
    if hard:
        return (v >= 0).astype(np.float64)
    return rectified_sigmoid(v)


def quantize_weights_nearest(w: np.ndarray, p: WeightQuantParams) -> np.ndarray:
    """w̃_c = clamp(round(w_c/s_c), −2^(b−1), 2^(b−1)−1)·s_c"""
    p.check(w)
    if not p.quantized:
        return w.copy()
    step = _per_channel(p.step, w.ndim)
    return np.clip(round_half_away(w / step), p.qmin, p.qmax) * step


def init_rounding(w: np.ndarray, p: WeightQuantParams) -> np.ndarray:
    """
    初始化 v，使 h(v) 等于网格残差 r = w/s − floor(w/s)

    软输出在初始化时等于原权重（未截断部分），硬舍入 1[v≥0] 则等于就近舍入。
    """
    p.check(w)
    scaled = w / _per_channel(p.grid_step, w.ndim)
    residual = np.clip(scaled - np.floor(scaled), 1e-6, 1.0 - 1e-6)
    span = SOFT_ROUNDING_ZETA - SOFT_ROUNDING_GAMMA
    return -np.log(span / (residual - SOFT_ROUNDING_GAMMA) - 1.0)


def _soft_codes(w: np.ndarray, p: WeightQuantParams, hard: bool) -> np.ndarray:
    floor = np.floor(w / _per_channel(p.grid_step, w.ndim))
    return floor + rounding_offset(p.rounding, hard)


def quantize_weights_soft(w: np.ndarray, p: WeightQuantParams, hard: bool) -> np.ndarray:
    """w̃ = clamp(floor(w/s) + h(v), −2^(b−1), 2^(b−1)−1)·s；hard 时 h(v) 取 1[v≥0]"""
    if p.rounding is None:
        raise QuantizationError("软舍入需要舍入变量 v")
    p.check(w)
    if not p.quantized:
        return w.copy()
    codes = np.clip(_soft_codes(w, p, hard), p.qmin, p.qmax)
    return codes * _per_channel(p.step, w.ndim)


def weight_codes(w: np.ndarray, p: WeightQuantParams) -> np.ndarray:
    """导出用的整数码：有 v 时硬舍入，否则就近舍入"""
    p.check(w)
    if p.rounding is None:
        codes = round_half_away(w / _per_channel(p.step, w.ndim))
    else:
        codes = _soft_codes(w, p, hard=True)
    return np.clip(codes, p.qmin, p.qmax)


def quantize_activation(z: np.ndarray, p: ActQuantParams) -> np.ndarray:
    """q = clamp(round((z−lo)/Δ), 0, 2^b−1)，z̃ = q·Δ + lo"""
    if p.bits == FLOAT_BITS:
        return z.copy()
    delta = p.delta
    q = np.clip(round_half_away((z - p.lo) / delta), 0, p.levels - 1)
    return q * delta + p.lo


def gradual_mix(z_float: np.ndarray, z_quant: np.ndarray, P: Union[float, np.ndarray]) -> np.ndarray:
    """
    z̃ = P·z + (1−P)·Q(z)

    P 为标量时是确定性混合；为 0/1 掩码数组时逐元素选择浮点或量化激活，
    形状需能广播到激活形状
    """
    if z_float.shape != z_quant.shape:
        raise ShapeError(f"混合形状不一致: {z_float.shape} vs {z_quant.shape}")
    P = np.asarray(P, dtype=np.float64)
    if P.ndim:
        try:
            broadcast = np.broadcast_shapes(P.shape, z_float.shape)
        except ValueError as e:
            raise ShapeError(f"掩码形状 {P.shape} 无法广播到 {z_float.shape}") from e
        if broadcast != z_float.shape:
            raise ShapeError(f"掩码形状 {P.shape} 无法广播到 {z_float.shape}")
    if not np.all((P >= 0.0) & (P <= 1.0)):
        raise QuantizationError(f"混合比例 P 必须在 [0,1] 内，实际范围 [{P.min()}, {P.max()}]")
    return P * z_float + (1.0 - P) * z_quant


def rounding_sharpness(v: np.ndarray) -> float:
    """h(v) 仍处于 (0.01, 0.99) 的比例"""
    h = rectified_sigmoid(v)
    undecided = (h > ROUNDING_UNDECIDED_LOW) & (h < ROUNDING_UNDECIDED_HIGH)
    return float(np.mean(undecided)) if h.size else 0.0


@dataclass(frozen=True, eq=False)
class QuantState:
    """
    整个网络的量化状态

    iteration 为 None 表示部署状态（激活完全量化）；soft 为 True 时权重走软舍入路径。
    """
    weights: Mapping[str, WeightQuantParams]
    activations: Mapping[str, ActQuantParams]
    schedule: GradualSchedule
    biases: Mapping[str, np.ndarray] = field(default_factory=dict)
    gradual: str = "linear"
    iteration: Optional[int] = None
    soft: bool = False
    mask_seed: int = 0

    def activation_mix(self, layer: str) -> float:
        """当前迭代中该层保留浮点激活的比例 P"""
        if self.iteration is None or self.gradual == "none":
            return 0.0
        return schedule_P(self.schedule, layer, self.iteration)


# ---------------------------------------------------------------------------
# 计算带原语
# ---------------------------------------------------------------------------

def _soft_round_forward(inputs, attrs):
    rounding, log_scale = inputs
    params = WeightQuantParams(attrs["thresholds"], attrs["bits"], rounding, log_scale)
    return quantize_weights_soft(attrs["weight"], params, attrs["hard"])


def _soft_round_backward(grad, inputs, output, attrs):
    rounding, log_scale = inputs
    weight = attrs["weight"]
    params = WeightQuantParams(attrs["thresholds"], attrs["bits"], rounding, log_scale)
    raw = _soft_codes(weight, params, attrs["hard"])
    codes = np.clip(raw, params.qmin, params.qmax)
    step = _per_channel(params.step, weight.ndim)
    inside = (raw >= params.qmin) & (raw <= params.qmax)
    if attrs["hard"]:
        grad_rounding = np.zeros_like(rounding)
    else:
        grad_rounding = grad * step * inside * rectified_sigmoid_grad(rounding)
    axes = tuple(range(1, weight.ndim))
    grad_log_scale = np.sum(grad * codes * step, axis=axes)
    return [grad_rounding, grad_log_scale]


def _keep_fraction(attrs) -> Union[float, np.ndarray]:
    """保留浮点激活的比例：随机模式下是 0/1 掩码，否则是标量 P"""
    return attrs["mask"] if attrs.get("mask") is not None else attrs["mix"]


def _act_quant_forward(inputs, attrs):
    z = inputs[0]
    return gradual_mix(z, quantize_activation(z, attrs["params"]), _keep_fraction(attrs))


def _act_quant_backward(grad, inputs, output, attrs):
    # 直通估计：范围内梯度为 1，范围外为 0
    z = inputs[0]
    params = attrs["params"]
    inside = (z >= params.lo) & (z <= params.hi)
    keep = _keep_fraction(attrs)
    return [grad * (keep + (1.0 - keep) * inside)]


register_primitive("soft_round_weight", _soft_round_forward, _soft_round_backward)
register_primitive("act_quant", _act_quant_forward, _act_quant_backward)
