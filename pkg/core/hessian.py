# -*- coding: utf-8 -*-
"""
无标签 Hessian 模块
输出损失的闭式 Hessian 与上界、Hutchinson 权重 Hessian 对角估计、
逐样本逐层注意力分数 (SLA) 以及基于有限差分的 Gauss-Newton 基准
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax, softmax

from config.settings import GAUSSIAN_NLL_VARIANCE, HUTCHINSON_PROBES, LOSS_KINDS
from .autodiff import backward, vjp
from .errors import HessianError
from .graph import Dataset, NetworkGraph
from .network import finite_diff_jacobian, forward_record, layer_id, weight_id

logger = logging.getLogger(__name__)

ProbeSampler = Callable[[np.random.Generator, Tuple[int, ...]], np.ndarray]


def _gaussian_probes(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.standard_normal(shape)


def _rademacher_probes(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.choice(np.array([-1.0, 1.0]), size=shape)


_SAMPLERS: Dict[str, ProbeSampler] = {
    "gaussian": _gaussian_probes,
    "rademacher": _rademacher_probes,
}


def resolve_probe_sampler(probes: Union[str, ProbeSampler]) -> ProbeSampler:
    """探针分布：'gaussian'（默认）、'rademacher' 或自定义可调用对象"""
    if callable(probes):
        return probes
    try:
        return _SAMPLERS[probes]
    except KeyError:
        raise HessianError(f"未知探针分布: {probes}（可选 {sorted(_SAMPLERS)}）") from None


def _sample_rng(seed: int, sample_index: int) -> np.random.Generator:
    # 每个样本独立的随机流
    return np.random.default_rng([int(seed), int(sample_index)])


# ---------------------------------------------------------------------------
# 输出损失与闭式 Hessian
# ---------------------------------------------------------------------------

def _check_kind(kind: str) -> None:
    if kind not in LOSS_KINDS:
        raise HessianError(f"未知损失类型: {kind}（可选 {LOSS_KINDS}）")


def _check_variance(sigma2: float) -> None:
    if not sigma2 > 0:
        raise HessianError(f"高斯 NLL 的方差必须为正，实际 {sigma2}")


def default_target(kind: str, r: np.ndarray) -> np.ndarray:
    """没有给定目标时的默认目标（Hessian 与目标无关）"""
    if kind == "ce_softmax":
        return np.full(r.shape, 1.0 / r.size)
    if kind == "bce_sigmoid":
        return np.full(r.shape, 0.5)
    return np.zeros(r.shape)


def loss_value(kind: str, r: np.ndarray, y: Optional[np.ndarray] = None,
               sigma2: float = GAUSSIAN_NLL_VARIANCE) -> float:
    """
    单个输出向量上的损失

    Args:
        kind: 损失类型
        r: 网络输出（logits 或回归值）
        y: 目标；ce_softmax 为概率向量，bce_sigmoid 为 [0,1] 内的向量
        sigma2: 高斯 NLL 的方差

    Returns:
        标量损失
    """
    _check_kind(kind)
    r = np.asarray(r, dtype=np.float64).ravel()
    y = default_target(kind, r) if y is None else np.asarray(y, dtype=np.float64).ravel()
    if y.shape != r.shape:
        raise HessianError(f"目标形状 {y.shape} 与输出 {r.shape} 不一致")
    if kind == "mse":
        return float(np.mean((r - y) ** 2))
    if kind == "ce_softmax":
        return float(-np.sum(y * log_softmax(r)))
    if kind == "bce_sigmoid":
        # log σ(r) = −log(1+e^{−r})
        return float(np.sum(y * np.logaddexp(0.0, -r) + (1.0 - y) * np.logaddexp(0.0, r)))
    if kind == "gaussian_nll":
        _check_variance(sigma2)
        return float(np.sum((r - y) ** 2) / sigma2)
    return float(np.sum(np.exp(r) - y * r))


def loss_hessian(kind: str, r: np.ndarray, sigma2: float = GAUSSIAN_NLL_VARIANCE) -> np.ndarray:
    """
    损失对输出的闭式 Hessian A(r)，与目标无关

    Returns:
        (d₀, d₀) 对称半正定矩阵
    """
    _check_kind(kind)
    r = np.asarray(r, dtype=np.float64).ravel()
    d0 = r.size
    if kind == "mse":
        return (2.0 / d0) * np.eye(d0)
    if kind == "ce_softmax":
        p = softmax(r)
        return np.diag(p) - np.outer(p, p)
    if kind == "bce_sigmoid":
        s = expit(r)
        return np.diag(s * (1.0 - s))
    if kind == "gaussian_nll":
        _check_variance(sigma2)
        return (2.0 / sigma2) * np.eye(d0)
    return np.diag(np.exp(r))


def loss_bound(kind: str, d0: Optional[int] = None, sigma2: float = GAUSSIAN_NLL_VARIANCE) -> float:
    """A(r) ⪯ c·I 的常数 c；poisson_nll 无上界"""
    _check_kind(kind)
    if kind == "mse":
        if d0 is None or d0 < 1:
            raise HessianError("mse 的上界需要输出维度 d₀")
        return 2.0 / d0
    if kind in ("ce_softmax", "bce_sigmoid"):
        return 1.0
    if kind == "gaussian_nll":
        _check_variance(sigma2)
        return 2.0 / sigma2
    raise HessianError(f"{kind} 的 Hessian 无上界 (unbounded)")


# ---------------------------------------------------------------------------
# Hutchinson 估计
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HessianScores:
    """
    Hessian 估计结果

    weight_diag: 带权层名 -> 展平的 h^(ℓ)
    sla: 比较点名 -> 每个样本的 u_max（按数据集顺序）
    """
    weight_diag: Mapping[str, np.ndarray] = field(default_factory=dict)
    sla: Mapping[str, np.ndarray] = field(default_factory=dict)
    probes: int = HUTCHINSON_PROBES
    seed: int = 0

    def check_coverage(self, points: Sequence[str], samples: int) -> None:
        for point in points:
            if point not in self.sla:
                raise HessianError(f"缺少比较点 {point} 的 SLA 分数")
            if len(self.sla[point]) != samples:
                raise HessianError(
                    f"比较点 {point} 的 SLA 分数覆盖 {len(self.sla[point])} 个样本，需要 {samples} 个"
                )


def _check_probe_count(M: int) -> None:
    if M < 1:
        raise HessianError(f"探针数 M 必须 ≥ 1，实际 {M}")


def lfh_weight_diags(graph: NetworkGraph, data: Dataset, M: int = HUTCHINSON_PROBES, seed: int = 0,
                     probes: Union[str, ProbeSampler] = "gaussian",
                     layers: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
    """
    所有（或指定）带权层的无标签 Hessian 对角

    h^(ℓ) = 1/(M·|D|) Σ_x Σ_m (v_mᵀJ)⊙(v_mᵀJ)，同一组探针一次反向得到所有层的梯度

    Args:
        graph: 网络图
        data: 代表性数据（不读取标签）
        M: 每个样本的探针数
        seed: 随机种子
        probes: 探针分布
        layers: 只估计这些层，None 为全部带权层

    Returns:
        层名 -> 展平的非负对角向量
    """
    _check_probe_count(M)
    if len(data) == 0:
        raise HessianError("数据集为空，无法估计 Hessian")
    names = [layer.name for layer in graph.weighted_layers()] if layers is None else list(layers)
    weighted = {layer.name for layer in graph.weighted_layers()}
    for name in names:
        if name not in weighted:
            raise HessianError(f"层 {name} 不是带权层")
    sampler = resolve_probe_sampler(probes)

    totals = {name: np.zeros(graph.layer(name).weight.size) for name in names}
    targets = [weight_id(name) for name in names]
    for index in range(len(data)):
        tape, _, output = forward_record(graph, data.inputs[index])
        vectors = sampler(_sample_rng(seed, index), (M,) + output.shape)
        for m in range(M):
            grads = vjp(tape, vectors[m], targets)
            for name in names:
                totals[name] += grads[weight_id(name)].ravel() ** 2
    scale = 1.0 / (M * len(data))
    return {name: totals[name] * scale for name in names}


def lfh_weight_diag(graph: NetworkGraph, data: Dataset, layer: str, M: int = HUTCHINSON_PROBES,
                    seed: int = 0, probes: Union[str, ProbeSampler] = "gaussian") -> np.ndarray:
    """单个带权层的无标签 Hessian 对角"""
    return lfh_weight_diags(graph, data, M, seed, probes, layers=[layer])[layer]


def sla_scores(graph: NetworkGraph, data: Dataset, M: int = HUTCHINSON_PROBES, seed: int = 0,
               probes: Union[str, ProbeSampler] = "gaussian") -> Dict[str, np.ndarray]:
    """
    逐样本逐比较点的注意力分数 u_max = max_i [(1/M) Σ_m (v_mᵀJ)²]_i

    每个样本复制 M 份成一个批次，M 个探针一次反向同时得到所有比较点的梯度。

    Returns:
        比较点名 -> 长度为样本数的非负向量
    """
    _check_probe_count(M)
    if len(data) == 0:
        raise HessianError("数据集为空，无法计算 SLA 分数")
    if not graph.comparison_points:
        raise HessianError("网络没有比较点")
    sampler = resolve_probe_sampler(probes)

    targets = [layer_id(point) for point in graph.comparison_points]
    scores = {point: np.zeros(len(data)) for point in graph.comparison_points}
    for index in range(len(data)):
        batch = np.repeat(data.inputs[index][np.newaxis], M, axis=0)
        tape, _, output = forward_record(graph, batch)
        vectors = sampler(_sample_rng(seed, index), output.shape)
        grads = backward(tape, {tape.output_id: vectors}, targets)
        for point in graph.comparison_points:
            per_element = np.mean(grads[layer_id(point)] ** 2, axis=0)
            scores[point][index] = float(np.max(per_element))
    return scores


# ---------------------------------------------------------------------------
# 精确基准（有限差分）
# ---------------------------------------------------------------------------

def exact_jtj_diag(graph: NetworkGraph, input: np.ndarray, target: str) -> np.ndarray:
    """单个样本的 diag(JᵀJ)，J 为输出对 target 的有限差分雅可比"""
    jacobian = finite_diff_jacobian(graph, input, target)
    return np.sum(jacobian ** 2, axis=0)


def exact_weight_diag(graph: NetworkGraph, data: Dataset, layer: str) -> np.ndarray:
    """数据集平均的 diag(JᵀJ)，与 lfh_weight_diag 对应的精确值"""
    if len(data) == 0:
        raise HessianError("数据集为空")
    total = sum(exact_jtj_diag(graph, x, weight_id(layer)) for x in data.inputs)
    return total / len(data)


def exact_sla(graph: NetworkGraph, input: np.ndarray) -> Dict[str, float]:
    """单个样本每个比较点的 max diag(JᵀJ)"""
    return {
        point: float(np.max(exact_jtj_diag(graph, input, layer_id(point))))
        for point in graph.comparison_points
    }


def exact_gn_hessian(graph: NetworkGraph, input: np.ndarray, target: str, kind: str,
                     sigma2: float = GAUSSIAN_NLL_VARIANCE) -> np.ndarray:
    """
    Gauss-Newton 矩阵 Jᵀ A(f(x)) J

    Raises:
        ShapeError: target 超过有限差分元素上限
    """
    jacobian = finite_diff_jacobian(graph, input, target)
    _, _, output = forward_record(graph, input)
    return jacobian.T @ loss_hessian(kind, output, sigma2) @ jacobian


def exact_gn_diag(graph: NetworkGraph, data: Dataset, target: str, kind: str,
                  sigma2: float = GAUSSIAN_NLL_VARIANCE) -> np.ndarray:
    """数据集平均的 GN 对角"""
    if len(data) == 0:
        raise HessianError("数据集为空")
    total = sum(np.diag(exact_gn_hessian(graph, x, target, kind, sigma2)) for x in data.inputs)
    return total / len(data)


# ---------------------------------------------------------------------------
# 报告辅助
# ---------------------------------------------------------------------------

def log_normalize(scores: np.ndarray) -> np.ndarray:
    """(ln v − min) / (max − min)，结果落在 [0, 1] 且保序"""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0 or np.any(~(scores > 0)):
        raise HessianError("对数归一化要求所有分数为正")
    logs = np.log(scores)
    low, high = logs.min(), logs.max()
    if high == low:
        raise HessianError("对数归一化要求分数不全相等")
    return (logs - low) / (high - low)


def layer_traces(weight_diag: Mapping[str, np.ndarray]) -> Dict[str, float]:
    """每层的 Hessian 迹代理（对角之和）"""
    return {name: float(np.sum(diag)) for name, diag in weight_diag.items()}
