# -*- coding: utf-8 -*-
"""
文件处理器模块
负责输出目录中产物的写入、登记和失败时的清理
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Optional, Sequence, Union

import pandas as pd

from .utils import ensure_directory_exists

logger = logging.getLogger(__name__)


class ArtifactManager:
    """产物管理器类"""

    def __init__(self, out_dir: Union[str, Path]):
        """
        初始化产物管理器

        Args:
            out_dir: 输出目录，不存在则创建
        """
        self.out_dir = Path(out_dir)
        self._created_dir = not self.out_dir.exists()
        if not ensure_directory_exists(self.out_dir):
            raise OSError(f"无法创建输出目录: {self.out_dir}")
        self._written: List[Path] = []

    def path(self, name: str) -> Path:
        """输出目录下的文件路径，并登记为本次运行的产物"""
        target = self.out_dir / name
        self.track(target)
        return target

    def track(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        if path not in self._written:
            self._written.append(path)
        return path

    def write_json(self, name: str, payload: Mapping[str, Any]) -> Path:
        """写 JSON 文件（键排序，保证同样的内容得到同样的字节）"""
        target = self.path(name)
        target.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                          encoding="utf-8")
        return target

    def write_jsonl(self, name: str, records: Sequence[Mapping[str, Any]],
                    columns: Optional[Iterable[str]] = None) -> Path:
        """写 JSON-lines 文件，每条记录一行"""
        target = self.path(name)
        frame = pd.DataFrame(list(records), columns=list(columns) if columns is not None else None)
        if frame.empty:
            target.write_text("", encoding="utf-8")
        else:
            text = frame.to_json(orient="records", lines=True, double_precision=15)
            target.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        return target

    def cleanup_partial(self) -> int:
        """
        删除本次运行已写出的产物

        Returns:
            删除的文件数量
        """
        removed = 0
        for path in self._written:
            try:
                if path.exists():
                    path.unlink()
                    removed += 1
            except OSError as e:
                logger.warning("删除部分产物失败 %s: %s", path, e)
        self._written.clear()
        if self._created_dir:
            try:
                if not os.listdir(self.out_dir):
                    self.out_dir.rmdir()
            except OSError:
                pass
        if removed:
            logger.info("已删除 %d 个部分产物", removed)
        return removed
