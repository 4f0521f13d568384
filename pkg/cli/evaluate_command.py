# -*- coding: utf-8 -*-
"""
评估命令
在数据集上计算 top-1 准确率、指定损失的均值以及各比较点与浮点参考模型的激活距离
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config.settings import LOSS_KINDS
from core.errors import ConfigError, GraphError, ShapeError
from core.graph import Dataset, NetworkGraph, fold_batchnorm
from core.hessian import loss_value
from core.network import comparison_activations, forward
from core.quantizers import QuantState
from core.serialization import is_quantized_manifest, load_dataset, load_model, quant_state_from_graph, read_manifest
from .common import check_dataset_shape, stage

logger = logging.getLogger(__name__)

EVAL_METRICS = ["accuracy", "loss", "distance"]
LABEL_METRICS = {"accuracy", "loss"}


def resolve_metrics(requested: Optional[Sequence[str]], has_labels: bool) -> List[str]:
    """未指定时按是否有标签选择默认指标；显式要求标签指标但无标签时报错"""
    if not requested:
        return EVAL_METRICS if has_labels else ["distance"]
    unknown = [m for m in requested if m not in EVAL_METRICS]
    if unknown:
        raise ConfigError(f"未知评估指标: {unknown}（可选 {EVAL_METRICS}）")
    missing = [m for m in requested if m in LABEL_METRICS and not has_labels]
    if missing:
        raise ConfigError(f"指标 {missing} 需要标签，但数据集没有标签")
    return list(dict.fromkeys(requested))


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    if labels.size and labels.max() >= classes:
        raise ShapeError(f"标签 {int(labels.max())} 超出输出维度 {classes}")
    targets = np.zeros((labels.size, classes))
    targets[np.arange(labels.size), labels] = 1.0
    return targets


def evaluate_model(graph: NetworkGraph, dataset: Dataset, quant: Optional[QuantState] = None,
                   reference: Optional[NetworkGraph] = None, metrics: Optional[Sequence[str]] = None,
                   loss_kind: str = "ce_softmax") -> Dict[str, Any]:
    """
    评估模型

    Args:
        graph: 待评估模型
        dataset: 评估数据
        quant: 量化状态（激活量化器），None 为浮点执行
        reference: 计算激活距离用的浮点参考模型，None 时与自身的浮点执行比较
        metrics: 指标子集
        loss_kind: loss 指标使用的损失类型（对 one-hot 标签）

    Returns:
        报告字典
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"未知损失类型: {loss_kind}")
    check_dataset_shape(graph, dataset)
    metrics = resolve_metrics(metrics, dataset.has_labels)
    report: Dict[str, Any] = {"samples": len(dataset), "metrics": metrics}

    outputs = forward(graph, dataset.inputs, quant).reshape(len(dataset), -1)
    if "accuracy" in metrics:
        predictions = np.argmax(outputs, axis=1)
        report["accuracy"] = float(np.mean(predictions == dataset.labels))
    if "loss" in metrics:
        targets = _one_hot(dataset.labels, outputs.shape[1])
        losses = [loss_value(loss_kind, outputs[i], targets[i]) for i in range(len(dataset))]
        report["loss"] = {"kind": loss_kind, "mean": float(np.mean(losses))}
    if "distance" in metrics:
        reference = fold_batchnorm(reference) if reference is not None else graph
        check_dataset_shape(reference, dataset)
        float_acts = comparison_activations(reference, dataset.inputs)
        quant_acts = comparison_activations(graph, dataset.inputs, quant)
        distances = {}
        for point in graph.comparison_points:
            if point not in float_acts:
                raise GraphError(f"参考模型没有比较点 {point}")
            diff = (quant_acts[point] - float_acts[point]).reshape(len(dataset), -1)
            distances[point] = float(np.mean(np.sum(diff ** 2, axis=1)))
        report["distance"] = distances
    return report


def cmd_evaluate(model: Path, data: Path, reference: Optional[Path] = None,
                 metrics: Optional[Sequence[str]] = None, loss_kind: str = "ce_softmax") -> Dict[str, Any]:
    """
    evaluate 子命令

    量化模型按清单中的激活范围重建激活量化器；--reference 缺省时使用清单记录的源模型
    """
    with stage("load_model"):
        graph = load_model(model)
        manifest = read_manifest(model)
        quant = quant_state_from_graph(graph) if is_quantized_manifest(model) else None
    with stage("load_dataset"):
        dataset = load_dataset(data)
    with stage("load_reference"):
        if reference is None and manifest.get("source_model"):
            candidate = Path(manifest["source_model"])
            reference = candidate if candidate.is_absolute() else Path(model).parent / candidate
        reference_graph = load_model(reference) if reference is not None else None
    with stage("evaluate"):
        report = evaluate_model(graph, dataset, quant, reference_graph, metrics, loss_kind)
    report["model"] = str(model)
    report["quantized"] = quant is not None
    if "config_hash" in manifest:
        report["config_hash"] = manifest["config_hash"]
    logger.info("评估完成: %d 个样本", len(dataset))
    return report
