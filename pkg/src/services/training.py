"""
训练公共部件
训练超参数、逐轮历史、最优权重保留和批次顺序
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

SEED_LIMIT = 2**31 - 1

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainingConfig:
    """单次训练的超参数"""

    batch_size: int = 16
    epochs: int = 25
    learning_rate: float = 0.001
    dropout: float = 0.3
    augment: bool = True
    workers: int = 1
    seed: int = 0
    steps_per_epoch: Optional[int] = None
    freeze_encoder: bool = False

    @classmethod
    def from_section(cls, section: Dict[str, Any], seed: int) -> "TrainingConfig":
        """从 pretext / downstream 配置段构造，忽略无关字段"""
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        return cls(seed=seed, **known)

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size 和 epochs 必须为正")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate 必须为正，实际为 {self.learning_rate}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout 必须在 [0, 1) 内，实际为 {self.dropout}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch 必须为正")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    def row(self) -> Tuple[int, float, float, float, float]:
        return (self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc)


@dataclass
class TrainingHistory:
    """逐轮训练/验证损失与准确率，以及被保留权重所在的轮次"""

    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def rows(self) -> List[Tuple[int, float, float, float, float]]:
        return [record.row() for record in self.records]

    def __len__(self) -> int:
        return len(self.records)


class BestWeights:
    """
    保留选择指标最高的一轮权重；并列时保留最早的一轮
    """

    def __init__(self):
        self.score = -np.inf
        self.epoch = 0
        self.state: Optional[Dict[str, np.ndarray]] = None

    def offer(self, epoch: int, score: float, state_fn) -> bool:
        if np.isnan(score) or score <= self.score:
            return False
        self.score = score
        self.epoch = epoch
        self.state = state_fn()
        return True


def epoch_batches(
    rng: np.random.Generator,
    n_items: int,
    batch_size: int,
    n_batches: Optional[int] = None,
    seeds_per_item: int = 1,
) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    生成一轮的批次索引和逐样本增强种子

    未指定 n_batches 时完整遍历一次打乱后的样本；指定时依次拼接多个排列，
    直到凑满 n_batches 个批次。

    Returns:
        (批次索引列表, 增强种子)；seeds_per_item 为 1 时种子形状为 (n_items,)，
        否则为 (n_items, seeds_per_item)，每个样本内的各图像各用一列
    """
    shape = (n_items,) if seeds_per_item == 1 else (n_items, seeds_per_item)
    seeds = rng.integers(0, SEED_LIMIT, size=shape)
    if n_items == 0:
        return [], seeds
    if n_batches is None:
        order = rng.permutation(n_items)
        return [order[s : s + batch_size] for s in range(0, n_items, batch_size)], seeds

    needed = n_batches * batch_size
    chunks = []
    total = 0
    while total < needed:
        chunk = rng.permutation(n_items)
        chunks.append(chunk)
        total += chunk.size
    order = np.concatenate(chunks)[:needed]
    return [order[s : s + batch_size] for s in range(0, needed, batch_size)], seeds
