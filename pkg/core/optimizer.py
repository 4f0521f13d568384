# -*- coding: utf-8 -*-
"""
舍入优化模块
以逐样本逐层注意力加权的知识蒸馏损失加舍入正则项，用 RAdam 优化软舍入变量
（以及可选的逐通道对数缩放和偏置），训练期间逐步量化激活
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from config.settings import RADAM_BETAS, RADAM_EPS
from .autodiff import backward
from .errors import OptimizationError, ShapeError
from .graph import Dataset, NetworkGraph
from .hessian import HessianScores
from .network import bias_id, comparison_activations, forward_record, layer_id, log_scale_id, rounding_id
from .progress_tracker import TrainingTracker
from .quantizers import QuantState, init_rounding, rectified_sigmoid, rectified_sigmoid_grad
from .run_config import EptqConfig

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# 舍入正则与 β 退火
# ---------------------------------------------------------------------------

def f_reg(v: np.ndarray, beta: float) -> float:
    """Σ_i (1 − |2h(v_i) − 1|^β)；h ∈ {0,1} 时为 0，h = 0.5 时最大"""
    if not beta > 0:
        raise OptimizationError(f"β 必须为正，实际 {beta}")
    return float(np.sum(1.0 - np.abs(2.0 * rectified_sigmoid(v) - 1.0) ** beta))


def f_reg_grad(v: np.ndarray, beta: float) -> np.ndarray:
    centered = 2.0 * rectified_sigmoid(v) - 1.0
    magnitude = np.abs(centered)
    power = np.where(magnitude > 0, magnitude, 1.0) ** (beta - 1.0) * (magnitude > 0)
    return -beta * power * np.sign(centered) * 2.0 * rectified_sigmoid_grad(v)


def anneal_beta(iteration: int, cfg: EptqConfig) -> float:
    """预热期内保持 β_start，之后线性退火到 β_end"""
    warmup = cfg.warmup_iterations
    if iteration < warmup or cfg.iterations <= warmup:
        return float(cfg.beta_start)
    progress = (iteration - warmup) / (cfg.iterations - warmup)
    return float(cfg.beta_end + (cfg.beta_start - cfg.beta_end) * max(0.0, 1.0 - progress))


def regularizer_active(iteration: int, cfg: EptqConfig) -> bool:
    return iteration >= cfg.warmup_iterations


# ---------------------------------------------------------------------------
# RAdam
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """RAdam 的一阶/二阶矩与步数"""
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    betas: Tuple[float, float] = RADAM_BETAS
    eps: float = RADAM_EPS


def radam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState,
               lr: float, degenerated_to_sgd: bool = True) -> Tuple[Params, OptimState]:
    """
    一步 RAdam 更新

    方差修正项 N_sma ≥ 5 时使用自适应步长。N_sma < 5 的前几步里，
    degenerated_to_sgd 为 True 时退化为带动量的 SGD，为 False 时只累积矩估计、不更新参数。

    Args:
        params: 参数字典
        grads: 与参数同形状的梯度，缺失的按零处理
        state: 上一步的优化器状态
        lr: 学习率
        degenerated_to_sgd: 方差修正不可用时是否执行 SGD 更新

    Returns:
        (新参数, 新状态)；输入不被修改
    """
    if not lr > 0:
        raise OptimizationError(f"学习率必须为正，实际 {lr}")
    beta1, beta2 = state.betas
    step = state.step + 1
    beta2_t = beta2 ** step
    n_sma_max = 2.0 / (1.0 - beta2) - 1.0
    n_sma = n_sma_max - 2.0 * step * beta2_t / (1.0 - beta2_t)
    if n_sma >= 5:
        step_size = lr * np.sqrt(
            (1.0 - beta2_t) * (n_sma - 4.0) / (n_sma_max - 4.0) * (n_sma - 2.0) / n_sma
            * n_sma_max / (n_sma_max - 2.0)
        ) / (1.0 - beta1 ** step)
    elif degenerated_to_sgd:
        step_size = lr / (1.0 - beta1 ** step)
    else:
        step_size = -1.0

    new_params: Params = {}
    exp_avg: Dict[str, np.ndarray] = {}
    exp_avg_sq: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        if grad.shape != value.shape:
            raise ShapeError(f"参数 {name} 的梯度形状 {grad.shape} 与参数 {value.shape} 不一致")
        if not np.all(np.isfinite(grad)):
            raise OptimizationError(f"参数 {name} 的梯度含非有限值")
        m = beta1 * state.exp_avg.get(name, np.zeros_like(value)) + (1.0 - beta1) * grad
        v = beta2 * state.exp_avg_sq.get(name, np.zeros_like(value)) + (1.0 - beta2) * grad * grad
        if n_sma >= 5:
            new_params[name] = value - step_size * m / (np.sqrt(v) + state.eps)
        elif step_size > 0:
            new_params[name] = value - step_size * m
        else:
            new_params[name] = value.copy()
        exp_avg[name], exp_avg_sq[name] = m, v
    return new_params, OptimState(step, exp_avg, exp_avg_sq, state.betas, state.eps)


# ---------------------------------------------------------------------------
# 蒸馏损失
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KdResult:
    """一个批次上的损失与梯度"""
    loss: float
    distill: float
    reg: float
    grads: Mapping[str, np.ndarray]


def sample_weights(graph: NetworkGraph, scores: Optional[HessianScores], samples: int,
                   mode: str) -> Dict[str, np.ndarray]:
    """
    每个比较点每个样本的权重 u

    mode 为 "average" 时取 1/L；为 "sla" 时取 u_max，再整体除以一个常数，
    使每个样本跨比较点的权重和平均为 1，与 "average" 的量级一致
    """
    points = graph.comparison_points
    if mode == "average":
        return {point: np.full(samples, 1.0 / len(points)) for point in points}
    if scores is None:
        raise OptimizationError("SLA 加权需要预先计算的 Hessian 分数")
    scores.check_coverage(points, samples)
    raw = {point: np.asarray(scores.sla[point], dtype=np.float64) for point in points}
    scale = float(np.mean(sum(raw.values())))
    if not scale > 0:
        raise OptimizationError("SLA 分数全为零，无法加权")
    return {point: u / scale for point, u in raw.items()}


def _squared_error(diff: np.ndarray) -> np.ndarray:
    return np.sum(diff.reshape(diff.shape[0], -1) ** 2, axis=1)


def kd_loss(graph: NetworkGraph, inputs: np.ndarray, float_acts: Mapping[str, np.ndarray],
            state: QuantState, weights: Mapping[str, np.ndarray], lambda_reg: float, beta: float,
            targets: Optional[List[str]] = None, reg_active: bool = True) -> KdResult:
    """
    批次上的蒸馏损失 (1/B)·Σ_b Σ_ℓ u_b^(ℓ)·‖z^(ℓ) − z̃^(ℓ)‖² + λ_reg·f_reg(v)

    Args:
        graph: 网络图
        inputs: 批量输入 (B, *input_shape)
        float_acts: 浮点网络在该批次上的比较点激活
        state: 量化状态（训练时 soft=True 且带 iteration）
        weights: 比较点 -> 每个样本的 u（长度 B）
        lambda_reg: 正则系数
        beta: 正则锐度
        targets: 需要梯度的张量 id；None 时取所有舍入变量
        reg_active: 预热期内为 False

    Returns:
        KdResult
    """
    batch = inputs.shape[0]
    tape, acts, _ = forward_record(graph, inputs, state)
    if tape.squeeze_batch:
        raise ShapeError("蒸馏损失需要批量输入")

    distill = 0.0
    seeds = {}
    for point in graph.comparison_points:
        if point not in weights:
            raise OptimizationError(f"缺少比较点 {point} 的 SLA 分数")
        u = np.asarray(weights[point], dtype=np.float64)
        if u.shape != (batch,):
            raise ShapeError(f"比较点 {point} 的权重形状 {u.shape} 与批大小 {batch} 不一致")
        diff = acts[point] - float_acts[point]
        distill += float(np.sum(u * _squared_error(diff))) / batch
        seeds[layer_id(point)] = 2.0 * u.reshape((-1,) + (1,) * (diff.ndim - 1)) * diff / batch

    rounding = {rounding_id(name): p.rounding for name, p in state.weights.items() if p.rounding is not None}
    reg = sum(f_reg(v, beta) for v in rounding.values()) if reg_active else 0.0
    loss = distill + lambda_reg * reg
    if not np.isfinite(loss):
        raise OptimizationError(f"损失出现非有限值 (distill={distill}, reg={reg})")

    targets = list(rounding) if targets is None else targets
    grads = dict(backward(tape, seeds, targets))
    if reg_active and lambda_reg > 0:
        for tensor_id, v in rounding.items():
            if tensor_id in grads:
                grads[tensor_id] = grads[tensor_id] + lambda_reg * f_reg_grad(v, beta)
    return KdResult(loss, distill, reg, grads)


def distillation_loss(graph: NetworkGraph, inputs: np.ndarray, float_acts: Mapping[str, np.ndarray],
                      state: QuantState, weights: Mapping[str, np.ndarray]) -> float:
    """整个校准集上的加权蒸馏项（不含正则）"""
    _, acts, _ = forward_record(graph, inputs, state)
    total = 0.0
    for point in graph.comparison_points:
        total += float(np.sum(weights[point] * _squared_error(acts[point] - float_acts[point])))
    return total / inputs.shape[0]


# ---------------------------------------------------------------------------
# 优化主循环
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OptimizeResult:
    state: QuantState
    log: List[dict]
    initial_loss: float
    final_loss: float


def _initial_params(graph: NetworkGraph, quant: QuantState, cfg: EptqConfig) -> Params:
    params: Params = {}
    for layer in graph.weighted_layers():
        weight_params = quant.weights.get(layer.name)
        if weight_params is None or not weight_params.quantized:
            continue
        rounding = weight_params.rounding
        params[rounding_id(layer.name)] = init_rounding(layer.weight, weight_params) if rounding is None \
            else rounding.copy()
        if cfg.optimize_scale:
            params[log_scale_id(layer.name)] = weight_params.log_scale.copy()
        bias = quant.biases.get(layer.name, layer.bias)
        if cfg.optimize_bias and bias is not None:
            params[bias_id(layer.name)] = np.array(bias, dtype=np.float64)
    return params


def apply_params(graph: NetworkGraph, quant: QuantState, params: Mapping[str, np.ndarray]) -> QuantState:
    """把扁平参数字典写回量化状态"""
    weights = dict(quant.weights)
    biases = dict(quant.biases)
    for layer in graph.weighted_layers():
        name = layer.name
        if name in weights and rounding_id(name) in params:
            weights[name] = replace(
                weights[name],
                rounding=params[rounding_id(name)],
                log_scale=params.get(log_scale_id(name), weights[name].log_scale),
            )
        if bias_id(name) in params:
            biases[name] = params[bias_id(name)]
    return replace(quant, weights=weights, biases=biases)


def deployed(state: QuantState, soft: bool = False) -> QuantState:
    """部署状态：激活完全量化，默认硬舍入"""
    return replace(state, iteration=None, soft=soft)


def optimize(graph: NetworkGraph, dataset: Dataset, quant_init: QuantState,
             scores: Optional[HessianScores], cfg: EptqConfig,
             tracker: Optional[TrainingTracker] = None) -> OptimizeResult:
    """
    网络级舍入优化

    Args:
        graph: 已分配位宽的浮点网络（教师）
        dataset: 校准数据，与 SLA 分数逐样本对应
        quant_init: 校准得到的初始量化状态
        scores: Hessian 分数（sla 模式必需）
        cfg: 优化配置
        tracker: 训练日志记录器

    Returns:
        OptimizeResult，state 为硬舍入后的部署状态

    Raises:
        OptimizationError: 损失发散，附带最后一个有限状态
    """
    tracker = tracker or TrainingTracker(cfg.iterations, cfg.log_every)
    weights = sample_weights(graph, scores, len(dataset), cfg.sla)
    float_acts = comparison_activations(graph, dataset.inputs)
    initial_loss = distillation_loss(graph, dataset.inputs, float_acts, deployed(quant_init), weights)
    if cfg.iterations == 0:
        return OptimizeResult(quant_init, [], initial_loss, initial_loss)

    params = _initial_params(graph, quant_init, cfg)
    if not params:
        logger.info("没有可训练的量化参数，跳过舍入优化")
        return OptimizeResult(quant_init, [], initial_loss, initial_loss)
    targets = sorted(params)
    base = replace(quant_init, gradual=cfg.gradual, mask_seed=cfg.mask_stream_seed, schedule=cfg.schedule())

    rng = np.random.default_rng(cfg.seed)
    batch_size = min(cfg.batch_size, len(dataset))
    optim_state = OptimState()
    tracker.start()
    for iteration in range(cfg.iterations):
        indices = np.sort(rng.choice(len(dataset), size=batch_size, replace=False))
        state = replace(apply_params(graph, base, params), iteration=iteration, soft=True)
        beta = anneal_beta(iteration, cfg)
        try:
            result = kd_loss(
                graph,
                dataset.subset(indices).inputs,
                {point: acts[indices] for point, acts in float_acts.items()},
                state,
                {point: u[indices] for point, u in weights.items()},
                cfg.lambda_reg,
                beta,
                targets=targets,
                reg_active=regularizer_active(iteration, cfg),
            )
            params, optim_state = radam_step(params, result.grads, optim_state, cfg.learning_rate,
                                             degenerated_to_sgd=False)
        except OptimizationError as e:
            last = deployed(apply_params(graph, base, params))
            raise OptimizationError(f"第 {iteration} 次迭代发散: {e}", last_state=last, iteration=iteration) from e

        p_mean = float(np.mean([state.activation_mix(point) for point in graph.comparison_points]))
        tracker.record(iteration, result.distill, result.reg, p_mean, cfg.learning_rate)

    final_state = deployed(apply_params(graph, base, params))
    final_loss = distillation_loss(graph, dataset.inputs, float_acts, final_state, weights)
    tracker.finish(final_loss)
    if not final_loss <= initial_loss:
        logger.warning("优化后蒸馏损失 %.6g 高于初始值 %.6g，回退到初始状态", final_loss, initial_loss)
        return OptimizeResult(quant_init, tracker.records, initial_loss, initial_loss)
    return OptimizeResult(final_state, tracker.records, initial_loss, final_loss)
