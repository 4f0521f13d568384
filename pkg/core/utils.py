# -*- coding: utf-8 -*-
"""
工具函数模块
提供通用的辅助函数
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np


def calculate_file_hash(file_path: Union[str, Path]) -> str:
    """计算文件的 SHA-256 哈希值"""
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"无法序列化的类型: {type(value).__name__}")


def canonical_json(payload: Any) -> str:
    """键排序、无多余空白的 JSON，用于哈希"""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_to_jsonable)


def hash_config(payload: Mapping[str, Any], file_hashes: Mapping[str, str]) -> str:
    """配置与输入文件内容共同决定的哈希"""
    combined = {"config": payload, "files": dict(file_hashes)}
    return hashlib.sha256(canonical_json(combined).encode("utf-8")).hexdigest()


def ensure_directory_exists(directory_path: Union[str, Path]) -> bool:
    """确保目录存在，不存在则创建"""
    try:
        Path(directory_path).mkdir(parents=True, exist_ok=True)
        return True
    except OSError:
        return False


def format_duration(seconds: float) -> str:
    """格式化时长显示"""
    total_seconds = int(seconds)
    if total_seconds < 60:
        return f"{total_seconds}秒"
    elif total_seconds < 3600:
        minutes = total_seconds // 60
        return f"{minutes}分{total_seconds % 60}秒"
    else:
        hours = total_seconds // 3600
        minutes = (total_seconds % 3600) // 60
        return f"{hours}时{minutes}分"
