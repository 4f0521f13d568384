# -*- coding: utf-8 -*-
"""
命令行主界面
解析子命令与参数，合并配置文件，分派到各命令并统一处理错误
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config.settings import (
    EVALUATION_FILE,
    GRADUAL_MODES,
    HESSIAN_REPORT_FILE,
    LOSS_KINDS,
    PROBE_DISTRIBUTIONS,
    SLA_MODES,
    THRESHOLD_METRICS,
)
from core.errors import EptqError
from core.file_handler import ArtifactManager
from core.run_config import RunConfig, build_run_config, load_config_file
from .evaluate_command import EVAL_METRICS, cmd_evaluate
from .quantize_command import cmd_quantize
from .report_command import cmd_hessian_report

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# 命令行参数名 -> 配置字段名
_ARG_TO_FIELD = {
    "model": "model",
    "data": "data",
    "seed": "seed",
    "probes": "probes",
    "probe_distribution": "probe_distribution",
    "bits_w": "bits_weight",
    "bits_a": "bits_activation",
    "iterations": "iterations",
    "lambda_reg": "lambda_reg",
    "learning_rate": "learning_rate",
    "metric": "metric",
    "sla": "sla",
    "gradual": "gradual",
    "out": "out_dir",
    "eval_data": "eval_data",
    "calibration_samples": "calibration_samples",
    "hessian_samples": "hessian_samples",
    "batch_size": "batch_size",
    "optimize_scale": "optimize_scale",
    "optimize_bias": "optimize_bias",
    "edge_layers_8bit": "edge_layers_8bit",
}


class MainInterface:
    """命令行主界面类"""

    def __init__(self):
        self.parser = self._build_parser()

    def _build_parser(self) -> argparse.ArgumentParser:
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("--model", type=Path, help="模型清单 (.eptq.json)")
        common.add_argument("--data", type=Path, help="数据集 (.eptqd)")
        common.add_argument("--config", type=Path, help="扁平 TOML 配置文件，命令行参数优先")
        common.add_argument("--seed", type=int)
        common.add_argument("--probes", type=int, help="Hutchinson 探针数 M")
        common.add_argument("--probe-distribution", choices=PROBE_DISTRIBUTIONS)
        common.add_argument("--log-level", default="INFO",
                            choices=["DEBUG", "INFO", "WARNING", "ERROR"])

        parser = argparse.ArgumentParser(prog="eptq", description="无标签 Hessian 引导的训练后量化")
        subparsers = parser.add_subparsers(dest="command", required=True)

        quantize = subparsers.add_parser("quantize", parents=[common], help="量化模型")
        quantize.add_argument("--bits-w", type=int, help="权重位宽（首尾层至少 8 位）")
        quantize.add_argument("--bits-a", type=int, help="激活位宽")
        quantize.add_argument("--iterations", type=int)
        quantize.add_argument("--lambda-reg", type=float)
        quantize.add_argument("--learning-rate", type=float)
        quantize.add_argument("--metric", choices=THRESHOLD_METRICS)
        quantize.add_argument("--sla", choices=SLA_MODES)
        quantize.add_argument("--gradual", choices=GRADUAL_MODES)
        quantize.add_argument("--calibration-samples", type=int)
        quantize.add_argument("--hessian-samples", type=int)
        quantize.add_argument("--batch-size", type=int)
        quantize.add_argument("--eval-data", type=Path, help="量化后额外评估的数据集")
        quantize.add_argument("--no-optimize-scale", dest="optimize_scale", action="store_const", const=False)
        quantize.add_argument("--no-optimize-bias", dest="optimize_bias", action="store_const", const=False)
        quantize.add_argument("--no-edge-8bit", dest="edge_layers_8bit", action="store_const", const=False)
        quantize.add_argument("--out", type=Path, help="输出目录")

        evaluate = subparsers.add_parser("evaluate", parents=[common], help="评估模型")
        evaluate.add_argument("--reference", type=Path, help="计算激活距离用的浮点参考模型")
        evaluate.add_argument("--metrics", nargs="+", choices=EVAL_METRICS)
        evaluate.add_argument("--loss", choices=LOSS_KINDS, default="ce_softmax")
        evaluate.add_argument("--out", type=Path, help="报告输出目录")

        report = subparsers.add_parser("hessian-report", parents=[common], help="Hessian 分数报告")
        report.add_argument("--with-oracle", action="store_true", help="同时计算有限差分 Gauss-Newton 基准")
        report.add_argument("--loss", choices=LOSS_KINDS, default="mse")
        report.add_argument("--hessian-samples", type=int)
        report.add_argument("--out", type=Path, help="报告输出目录")
        return parser

    def _resolve_config(self, args: argparse.Namespace) -> RunConfig:
        values: Dict[str, Any] = load_config_file(args.config) if args.config is not None else {}
        overrides = {
            field: getattr(args, arg)
            for arg, field in _ARG_TO_FIELD.items()
            if hasattr(args, arg) and not (args.command != "quantize" and arg == "out")
        }
        return build_run_config(values, overrides).validate()

    def run(self, argv: Optional[List[str]] = None) -> int:
        """
        执行命令

        Returns:
            退出码：0 成功，1 运行错误（参数错误由 argparse 以 2 退出）
        """
        args = self.parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
        try:
            config = self._resolve_config(args)
            if args.command == "quantize":
                cmd_quantize(config)
                return 0
            if args.command == "evaluate":
                report = cmd_evaluate(config.model, config.data, args.reference, args.metrics, args.loss)
                self._emit(report, args.out, EVALUATION_FILE)
                return 0
            report = cmd_hessian_report(
                config.model, config.data, config.eptq.probes, config.eptq.seed,
                args.with_oracle, args.loss, config.eptq.hessian_samples, config.eptq.probe_distribution,
            )
            self._emit(report, args.out, HESSIAN_REPORT_FILE)
            return 0
        except (EptqError, OSError) as e:
            logger.error("%s", e)
            return 1

    @staticmethod
    def _emit(report: Dict[str, Any], out_dir: Optional[Path], name: str) -> None:
        if out_dir is not None:
            path = ArtifactManager(out_dir).write_json(name, report)
            logger.info("报告已写入 %s", path)
        else:
            sys.stdout.write(json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def main(argv: Optional[List[str]] = None) -> int:
    """主函数入口"""
    return MainInterface().run(argv)


if __name__ == "__main__":
    sys.exit(main())
