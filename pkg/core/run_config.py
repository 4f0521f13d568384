# -*- coding: utf-8 -*-
"""
运行配置模块
EptqConfig（优化超参数）与 RunConfig（一次命令行运行），从扁平 TOML 文件加载并由命令行参数覆盖
"""

import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from config.settings import (
    BATCH_SIZE,
    BETA_END,
    BETA_START,
    CALIBRATION_SAMPLES,
    DEFAULT_ACTIVATION_BITS,
    DEFAULT_SEED,
    DEFAULT_WEIGHT_BITS,
    FLOAT_BITS,
    GRADUAL_MODES,
    HMSE_SAMPLES,
    HUTCHINSON_PROBES,
    INITIAL_FLOAT_FRACTION,
    ITERATIONS,
    LAMBDA_REG,
    LEARNING_RATE,
    LOG_EVERY,
    MAX_BITS,
    MIN_BITS,
    PROBE_DISTRIBUTIONS,
    SLA_MODES,
    THRESHOLD_METRICS,
    WARMUP_FRACTION,
)
from .errors import ConfigError
from .quantizers import GradualSchedule

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)


@dataclass
class EptqConfig:
    """舍入优化与 Hessian 估计的超参数"""
    iterations: int = ITERATIONS
    batch_size: int = BATCH_SIZE
    learning_rate: float = LEARNING_RATE
    lambda_reg: float = LAMBDA_REG
    beta_start: float = BETA_START
    beta_end: float = BETA_END
    warmup_fraction: float = WARMUP_FRACTION
    initial_float_fraction: float = INITIAL_FLOAT_FRACTION
    layer_float_fraction: Dict[str, float] = field(default_factory=dict)
    decay_iterations: Optional[int] = None  # None 表示在前一半迭代内衰减到 0
    probes: int = HUTCHINSON_PROBES
    probe_distribution: str = "gaussian"
    hessian_samples: int = HMSE_SAMPLES
    calibration_samples: int = CALIBRATION_SAMPLES
    seed: int = DEFAULT_SEED
    mask_seed: Optional[int] = None  # 随机掩码的种子，None 时与 seed 相同
    optimize_scale: bool = True
    optimize_bias: bool = True
    gradual: str = "linear"
    sla: str = "sla"
    metric: str = "hmse"
    log_every: int = LOG_EVERY

    def validate(self) -> "EptqConfig":
        if self.iterations < 0:
            raise ConfigError(f"iterations 不能为负: {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size 必须 ≥ 1: {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate 必须为正: {self.learning_rate}")
        if self.lambda_reg < 0:
            raise ConfigError(f"lambda_reg 不能为负: {self.lambda_reg}")
        if not (self.beta_start > 0 and self.beta_end > 0):
            raise ConfigError("beta_start 与 beta_end 必须为正")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction 必须在 [0, 1) 内: {self.warmup_fraction}")
        fractions = dict(self.layer_float_fraction, default=self.initial_float_fraction)
        for name, value in fractions.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"初始浮点比例 P0 必须在 [0, 1] 内 ({name}={value})")
        if self.decay_iterations is not None and self.decay_iterations < 0:
            raise ConfigError(f"decay_iterations 不能为负: {self.decay_iterations}")
        for name, value in (("probes", self.probes), ("hessian_samples", self.hessian_samples),
                            ("calibration_samples", self.calibration_samples)):
            if value < 1:
                raise ConfigError(f"{name} 必须 ≥ 1: {value}")
        self._check_choice("probe_distribution", self.probe_distribution, PROBE_DISTRIBUTIONS)
        self._check_choice("gradual", self.gradual, GRADUAL_MODES)
        self._check_choice("sla", self.sla, SLA_MODES)
        self._check_choice("metric", self.metric, THRESHOLD_METRICS)
        return self

    @staticmethod
    def _check_choice(name: str, value: str, choices: List[str]) -> None:
        if value not in choices:
            raise ConfigError(f"{name} 必须是 {choices} 之一，实际 {value!r}")

    @property
    def decay_steps(self) -> int:
        return self.iterations // 2 if self.decay_iterations is None else self.decay_iterations

    @property
    def mask_stream_seed(self) -> int:
        return self.seed if self.mask_seed is None else self.mask_seed

    @property
    def warmup_iterations(self) -> int:
        return int(self.warmup_fraction * self.iterations)

    def schedule(self) -> GradualSchedule:
        return GradualSchedule(
            total_iterations=self.iterations,
            decay_iterations=self.decay_steps,
            default_initial=self.initial_float_fraction,
            initial=dict(self.layer_float_fraction),
        )


@dataclass
class RunConfig:
    """一次命令行运行的完整配置"""
    model: Optional[Path] = None
    data: Optional[Path] = None
    eval_data: Optional[Path] = None
    out_dir: Path = Path("eptq_out")
    bits_weight: int = DEFAULT_WEIGHT_BITS
    bits_activation: int = DEFAULT_ACTIVATION_BITS
    bit_overrides: Dict[str, int] = field(default_factory=dict)
    edge_layers_8bit: bool = True
    metrics: List[str] = field(default_factory=list)
    eptq: EptqConfig = field(default_factory=EptqConfig)

    def validate(self, require_files: bool = True) -> "RunConfig":
        for name in ("bits_weight", "bits_activation"):
            bits = getattr(self, name)
            if bits != FLOAT_BITS and not MIN_BITS <= bits <= MAX_BITS:
                raise ConfigError(f"{name} 非法: {bits}")
        if require_files:
            for name in ("model", "data"):
                if getattr(self, name) is None:
                    raise ConfigError(f"缺少 {name} 路径")
        self.eptq.validate()
        return self

    def hash_payload(self) -> Dict[str, Any]:
        """参与配置哈希的字段：不含路径与输出目录，文件内容由文件哈希代表"""
        payload = asdict(self)
        for name in ("model", "data", "eval_data", "out_dir"):
            payload.pop(name)
        return payload


_RUN_FIELDS = {f.name for f in fields(RunConfig)} - {"eptq"}
_EPTQ_FIELDS = {f.name for f in fields(EptqConfig)}
_PATH_FIELDS = {"model", "data", "eval_data", "out_dir"}


def load_config_file(path: Path) -> Dict[str, Any]:
    """
    读取扁平 TOML 配置文件

    Raises:
        ConfigError: 文件不存在、语法错误或含未知键
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    try:
        with open(path, "rb") as f:
            values = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"配置文件解析失败 ({path}): {e}") from e
    unknown = sorted(set(values) - _RUN_FIELDS - _EPTQ_FIELDS)
    if unknown:
        raise ConfigError(f"配置文件含未知键: {unknown}")
    # 相对路径按配置文件所在目录解析
    for name in _PATH_FIELDS & set(values):
        candidate = Path(values[name])
        values[name] = candidate if candidate.is_absolute() else path.parent / candidate
    return values


def build_run_config(values: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    合并配置文件值与命令行覆盖（None 表示未指定），命令行优先

    Args:
        values: 配置文件中的键值
        overrides: 命令行参数

    Returns:
        未校验的 RunConfig
    """
    merged = dict(values)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    unknown = sorted(set(merged) - _RUN_FIELDS - _EPTQ_FIELDS)
    if unknown:
        raise ConfigError(f"未知配置项: {unknown}")

    eptq = EptqConfig(**{k: v for k, v in merged.items() if k in _EPTQ_FIELDS})
    run_values = {k: v for k, v in merged.items() if k in _RUN_FIELDS}
    for name in _PATH_FIELDS & set(run_values):
        run_values[name] = Path(run_values[name])
    try:
        config = RunConfig(eptq=eptq, **run_values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    config.bit_overrides = {str(k): int(v) for k, v in config.bit_overrides.items()}
    return config
