# -*- coding: utf-8 -*-
"""
命令行公共组件
流水线阶段包装与输入校验
"""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, Optional

from core.errors import EptqError, ShapeError, StageError
from core.graph import Dataset, NetworkGraph
from core.serialization import blob_path_for
from core.utils import calculate_file_hash

logger = logging.getLogger(__name__)


@contextmanager
def stage(name: str) -> Iterator[None]:
    """把阶段内的错误包装为带阶段名的 StageError"""
    logger.debug("阶段开始: %s", name)
    try:
        yield
    except StageError:
        raise
    except (EptqError, OSError) as e:
        raise StageError(name, e) from e


def check_dataset_shape(graph: NetworkGraph, dataset: Dataset) -> None:
    if dataset.sample_shape != graph.input_shape:
        raise ShapeError(f"数据集样本形状 {dataset.sample_shape} 与模型输入 {graph.input_shape} 不一致")


def file_hashes(model: Path, data: Path, eval_data: Optional[Path] = None) -> Dict[str, str]:
    """参与配置哈希的输入文件内容哈希"""
    hashes = {
        "model": calculate_file_hash(model),
        "model_blob": calculate_file_hash(blob_path_for(model)),
        "data": calculate_file_hash(data),
    }
    if eval_data is not None:
        hashes["eval_data"] = calculate_file_hash(eval_data)
    return hashes
