# -*- coding: utf-8 -*-
"""
Hessian 报告命令
输出各层无标签 Hessian 对角的迹、对数归一化结果，以及（可选）与有限差分 Gauss-Newton 基准的秩相关
"""

import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from config.settings import FINITE_DIFF_MAX_ELEMENTS, HMSE_SAMPLES, HUTCHINSON_PROBES
from core.errors import HessianError
from core.graph import NetworkGraph, fold_batchnorm
from core.hessian import exact_gn_diag, exact_sla, layer_traces, lfh_weight_diags, log_normalize, sla_scores
from core.network import weight_id
from core.serialization import load_dataset, load_model
from .common import check_dataset_shape, stage

logger = logging.getLogger(__name__)


def _spearman(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """秩相关；样本不足或常数向量时返回 None"""
    if len(a) < 2:
        return None
    rho = spearmanr(np.asarray(a), np.asarray(b)).correlation
    return None if np.isnan(rho) else float(rho)


def _normalized(values: Mapping[str, float]) -> Optional[Dict[str, float]]:
    names = list(values)
    try:
        scaled = log_normalize(np.array([values[n] for n in names]))
    except HessianError:
        return None
    return {name: float(v) for name, v in zip(names, scaled)}


def check_oracle_size(graph: NetworkGraph) -> None:
    """有限差分基准只接受元素数不超过上限的张量"""
    for layer in graph.weighted_layers():
        if layer.weight.size > FINITE_DIFF_MAX_ELEMENTS:
            raise HessianError(
                f"层 {layer.name} 有 {layer.weight.size} 个权重，超过基准上限 {FINITE_DIFF_MAX_ELEMENTS}"
            )
    for point in graph.comparison_points:
        size = int(np.prod(graph.shapes[point]))
        if size > FINITE_DIFF_MAX_ELEMENTS:
            raise HessianError(f"比较点 {point} 有 {size} 个元素，超过基准上限 {FINITE_DIFF_MAX_ELEMENTS}")


def hessian_report(graph: NetworkGraph, data, M: int = HUTCHINSON_PROBES, seed: int = 0,
                   with_oracle: bool = False, loss_kind: str = "mse",
                   probes: str = "gaussian") -> Dict[str, Any]:
    """
    计算报告内容

    Returns:
        {"layers": 每层记录, "traces": 各层迹, "sla": 各比较点 SLA, ...}
    """
    if with_oracle:
        check_oracle_size(graph)
    diags = lfh_weight_diags(graph, data, M, seed, probes)
    traces = layer_traces(diags)
    sla = sla_scores(graph, data, M, seed, probes)

    rows = []
    layers: Dict[str, Any] = {}
    oracle_traces: Dict[str, float] = {}
    for name, diag in diags.items():
        entry: Dict[str, Any] = {"elements": int(diag.size), "lfh_diag": diag.tolist(), "lfh_trace": traces[name]}
        if with_oracle:
            oracle = exact_gn_diag(graph, data, weight_id(name), loss_kind)
            oracle_traces[name] = float(np.sum(oracle))
            entry["oracle_diag"] = oracle.tolist()
            entry["oracle_trace"] = oracle_traces[name]
            entry["spearman"] = _spearman(diag, oracle)
        layers[name] = entry
        rows.append({"layer": name, "lfh_trace": traces[name], "oracle_trace": oracle_traces.get(name)})

    report: Dict[str, Any] = {
        "probes": M,
        "seed": seed,
        "samples": len(data),
        "layers": layers,
        "traces": {
            "lfh": traces,
            "lfh_log_normalized": _normalized(traces),
        },
        "sla": {point: {"lfh_mean": float(np.mean(values)), "lfh": values.tolist()}
                for point, values in sla.items()},
    }
    if with_oracle:
        report["loss"] = loss_kind
        report["traces"]["oracle"] = oracle_traces
        report["traces"]["oracle_log_normalized"] = _normalized(oracle_traces)
        report["traces"]["spearman"] = _spearman(list(traces.values()), list(oracle_traces.values()))
        all_lfh = np.concatenate([diags[n] for n in diags])
        all_oracle = np.concatenate([np.asarray(layers[n]["oracle_diag"]) for n in diags])
        report["spearman"] = _spearman(all_lfh, all_oracle)
        exact = [exact_sla(graph, x) for x in data.inputs]
        for point in graph.comparison_points:
            values = [per_sample[point] for per_sample in exact]
            report["sla"][point]["oracle"] = values
            report["sla"][point]["spearman"] = _spearman(sla[point], values)

    table = pd.DataFrame(rows)
    logger.info("各层 Hessian 迹:\n%s", table.to_string(index=False))
    return report


def cmd_hessian_report(model: Path, data: Path, M: int = HUTCHINSON_PROBES, seed: int = 0,
                       with_oracle: bool = False, loss_kind: str = "mse",
                       samples: int = HMSE_SAMPLES, probes: str = "gaussian") -> Dict[str, Any]:
    """hessian-report 子命令"""
    with stage("load_model"):
        graph = fold_batchnorm(load_model(model))
    with stage("load_dataset"):
        dataset = load_dataset(data, limit=samples)
        check_dataset_shape(graph, dataset)
    with stage("hessian_report"):
        return hessian_report(graph, dataset, M, seed, with_oracle, loss_kind, probes)
