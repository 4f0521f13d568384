# -*- coding: utf-8 -*-
"""
异常定义模块
"""

from typing import Any, Optional


class EptqError(Exception):
    """量化引擎异常基类"""
    pass


class TapeError(EptqError):
    """自动微分记录错误"""
    pass


class ShapeError(EptqError):
    """张量形状不匹配"""
    pass


class GraphError(EptqError):
    """网络图结构错误"""
    pass


class ModelFormatError(EptqError):
    """模型文件格式错误"""
    pass


class DatasetFormatError(EptqError):
    """数据集文件格式错误"""
    pass


class QuantizationError(EptqError):
    """量化参数错误"""
    pass


class HessianError(EptqError):
    """Hessian 估计错误"""
    pass


class CalibrationError(EptqError):
    """阈值校准错误"""
    pass


class ConfigError(EptqError):
    """配置错误"""
    pass


class OptimizationError(EptqError):
    """舍入优化发散等错误，附带最后一个有限状态"""

    def __init__(self, message: str, last_state: Any = None, iteration: Optional[int] = None):
        super().__init__(message)
        self.last_state = last_state
        self.iteration = iteration


class StageError(EptqError):
    """流水线阶段错误，记录出错的阶段名"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
