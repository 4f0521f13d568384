# -*- coding: utf-8 -*-
"""
训练进度跟踪器模块
"""

import logging
import time
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional

from config.settings import LOG_EVERY
from .utils import format_duration

logger = logging.getLogger(__name__)


@dataclass
class IterationRecord:
    """单次迭代的训练日志"""
    iter: int
    distill_loss: float
    reg_loss: float
    P_mean: float
    lr: float


class TrainingTracker:
    """训练进度跟踪器类"""

    def __init__(self, total_iterations: int, log_every: int = LOG_EVERY):
        """
        初始化训练进度跟踪器

        Args:
            total_iterations: 总迭代数
            log_every: 每隔多少次迭代输出一条进度日志，0 表示不输出
        """
        self.total_iterations = total_iterations
        self.log_every = log_every
        self._records: List[IterationRecord] = []
        self.start_time: Optional[float] = None

    def start(self) -> None:
        self.start_time = time.monotonic()
        logger.info("开始舍入优化，共 %d 次迭代", self.total_iterations)

    def record(self, iteration: int, distill_loss: float, reg_loss: float,
               p_mean: float, lr: float) -> None:
        """记录一次迭代"""
        self._records.append(IterationRecord(iteration, float(distill_loss), float(reg_loss),
                                             float(p_mean), float(lr)))
        done = iteration + 1
        if self.log_every and (done % self.log_every == 0 or done == self.total_iterations):
            remaining = self.get_estimated_time_remaining()
            logger.info(
                "迭代 %d/%d (%.0f%%) 蒸馏损失 %.6g 正则 %.4g P %.3f | 已耗时 %s%s",
                done, self.total_iterations, 100.0 * self.get_overall_progress(), distill_loss, reg_loss, p_mean,
                self.get_elapsed_time(), f" | 预估剩余 {remaining}" if remaining else "",
            )

    @property
    def records(self) -> List[Dict[str, Any]]:
        return [asdict(record) for record in self._records]

    def get_overall_progress(self) -> float:
        if not self.total_iterations:
            return 1.0
        return len(self._records) / self.total_iterations

    def get_elapsed_time(self) -> str:
        """获取已消耗时间"""
        if self.start_time is None:
            return format_duration(0)
        return format_duration(time.monotonic() - self.start_time)

    def get_estimated_time_remaining(self) -> Optional[str]:
        """按平均每次迭代耗时估算剩余时间"""
        if self.start_time is None or not self._records:
            return None
        per_iteration = (time.monotonic() - self.start_time) / len(self._records)
        remaining = self.total_iterations - len(self._records)
        if remaining <= 0:
            return None
        return format_duration(per_iteration * remaining)

    def finish(self, final_loss: float) -> None:
        logger.info("舍入优化完成，最终蒸馏损失 %.6g，总耗时 %s", final_loss, self.get_elapsed_time())
