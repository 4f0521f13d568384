# -*- coding: utf-8 -*-
"""
量化命令
加载 → 折叠 BatchNorm → 权重 Hessian 对角 → 阈值与激活范围校准 → SLA 分数 → 舍入优化 → 导出
"""

import logging
from typing import Any, Dict

from config.settings import FLOAT_BITS, METRICS_FILE, MODEL_MANIFEST_SUFFIX, QUANTIZED_MODEL_STEM, TRAIN_LOG_FILE
from core.calibration import CalibrationResult, initialize_quant_state
from core.file_handler import ArtifactManager
from core.graph import NetworkGraph, assign_bit_widths, fold_batchnorm
from core.hessian import HessianScores, lfh_weight_diags, sla_scores
from core.optimizer import OptimizeResult, optimize
from core.progress_tracker import IterationRecord, TrainingTracker
from core.quantizers import rounding_sharpness
from core.run_config import RunConfig
from core.serialization import blob_path_for, load_dataset, load_model, save_quantized_model
from core.utils import hash_config
from .common import check_dataset_shape, file_hashes, stage
from .evaluate_command import evaluate_model

logger = logging.getLogger(__name__)


def _layer_metrics(graph: NetworkGraph, calibration: CalibrationResult,
                   result: OptimizeResult) -> Dict[str, Dict[str, Any]]:
    layers: Dict[str, Dict[str, Any]] = {}
    for layer in graph.layers:
        entry: Dict[str, Any] = {}
        if layer.is_weighted:
            entry["bits_weight"] = layer.bits_weight
            params = result.state.weights.get(layer.name)
            if params is not None and params.quantized:
                selection = calibration.thresholds[layer.name]
                entry["thresholds"] = selection.thresholds.tolist()
                entry["effective_thresholds"] = params.effective_thresholds.tolist()
                entry["threshold_objective"] = selection.total_objective
                entry["zero_channels"] = list(selection.zero_channels)
                if params.rounding is not None:
                    entry["undecided_fraction"] = rounding_sharpness(params.rounding)
        if layer.name in calibration.ranges:
            selection = calibration.ranges[layer.name]
            entry["bits_activation"] = layer.bits_activation
            entry["act_range"] = [selection.params.lo, selection.params.hi]
            entry["act_range_degenerate"] = selection.degenerate
        if entry:
            layers[layer.name] = entry
    return layers


def cmd_quantize(config: RunConfig) -> Dict[str, Any]:
    """
    quantize 子命令

    任一阶段失败时删除已写出的产物并抛出带阶段名的 StageError。

    Returns:
        写入 metrics.json 的内容
    """
    cfg = config.eptq
    with stage("load_model"):
        graph = load_model(config.model)
    with stage("load_dataset"):
        dataset = load_dataset(config.data)
        check_dataset_shape(graph, dataset)
        eval_dataset = load_dataset(config.eval_data) if config.eval_data is not None else None
    with stage("config_hash"):
        config_hash = hash_config(config.hash_payload(),
                                  file_hashes(config.model, config.data, config.eval_data))

    manager = ArtifactManager(config.out_dir)
    try:
        with stage("fold_batchnorm"):
            graph = fold_batchnorm(graph)
        with stage("assign_bits"):
            graph = assign_bit_widths(graph, config.bits_weight, config.bits_activation,
                                      config.bit_overrides, config.edge_layers_8bit)
        calib = dataset.take(cfg.calibration_samples)
        hessian_data = dataset.take(cfg.hessian_samples)
        quantized_layers = [layer.name for layer in graph.weighted_layers() if layer.bits_weight != FLOAT_BITS]

        diags = {}
        if cfg.metric == "hmse" and quantized_layers:
            with stage("hessian_weights"):
                diags = lfh_weight_diags(graph, hessian_data, cfg.probes, cfg.seed,
                                         cfg.probe_distribution, layers=quantized_layers)
        with stage("calibrate"):
            calibration = initialize_quant_state(graph, calib, cfg, diags)

        sla = {}
        if cfg.sla == "sla":
            with stage("sla_scores"):
                sla = sla_scores(graph, calib, cfg.probes, cfg.seed, cfg.probe_distribution)
        scores = HessianScores(weight_diag=diags, sla=sla, probes=cfg.probes, seed=cfg.seed)

        with stage("optimize"):
            tracker = TrainingTracker(cfg.iterations, cfg.log_every)
            result = optimize(graph, calib, calibration.state, scores, cfg, tracker)

        with stage("export"):
            model_path = manager.path(QUANTIZED_MODEL_STEM + MODEL_MANIFEST_SUFFIX)
            manager.track(blob_path_for(model_path))
            save_quantized_model(graph, result.state, model_path, extra={
                "config_hash": config_hash,
                "source_model": str(config.model.resolve()),
            })
            manager.write_jsonl(TRAIN_LOG_FILE, result.log, columns=IterationRecord.__dataclass_fields__)

            metrics: Dict[str, Any] = {
                "config_hash": config_hash,
                "bits_weight": config.bits_weight,
                "bits_activation": config.bits_activation,
                "iterations": cfg.iterations,
                "metric": cfg.metric,
                "sla": cfg.sla,
                "gradual": cfg.gradual,
                "initial_distill_loss": result.initial_loss,
                "final_distill_loss": result.final_loss,
                "layers": _layer_metrics(graph, calibration, result),
            }
        if eval_dataset is not None:
            with stage("evaluate"):
                metrics["evaluation"] = evaluate_model(graph, eval_dataset, result.state)
        with stage("export"):
            manager.write_json(METRICS_FILE, metrics)
    except BaseException:
        manager.cleanup_partial()
        raise

    logger.info("量化完成: 蒸馏损失 %.6g -> %.6g，产物写入 %s",
                result.initial_loss, result.final_loss, config.out_dir)
    return metrics
