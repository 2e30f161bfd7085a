"""
任务头
时间有效性二分类头（Siamese 拼接）和四阶段 softmax 分类头
"""

from typing import Optional

import numpy as np

from ..engine import functional as F
from ..engine.tensor import Tensor, no_grad
from ..utils.errors import ShapeError
from .encoder import EMBEDDING_DIM
from .layers import Dense, Dropout, Module

N_STAGES = 4


def _as_batch(op: str, emb) -> Tensor:
    tensor = emb if isinstance(emb, Tensor) else Tensor(np.asarray(emb, dtype=np.float64))
    if tensor.data.ndim == 1 and not tensor.requires_grad:
        tensor = Tensor(tensor.data[None, :])
    if tensor.data.ndim != 2 or tensor.shape[1] != EMBEDDING_DIM:
        raise ShapeError(op, tensor.shape, (EMBEDDING_DIM,))
    return tensor


class PretextHead(Module):
    """拼接两个 16 维嵌入 -> dropout -> 全连接到 1 个单元 -> sigmoid"""

    def __init__(self, rng: np.random.Generator, dropout: float = 0.3):
        super().__init__()
        self.dropout = self.add_module("dropout", Dropout(dropout))
        self.fc = self.add_module("fc", Dense(2 * EMBEDDING_DIM, 1, rng))

    def logits(
        self, emb_a: Tensor, emb_b: Tensor, rng: Optional[np.random.Generator] = None
    ) -> Tensor:
        emb_a = _as_batch("pretext_head", emb_a)
        emb_b = _as_batch("pretext_head", emb_b)
        if emb_a.shape != emb_b.shape:
            raise ShapeError("pretext_head", emb_a.shape, emb_b.shape)
        joined = F.concat([emb_a, emb_b], axis=1)
        return F.flatten(self.fc(self.dropout(joined, rng)))

    def forward_pair(
        self, emb_a: Tensor, emb_b: Tensor, rng: Optional[np.random.Generator] = None
    ) -> Tensor:
        """返回 (N, 1) 概率：p > 0.5 表示 (a, b) 顺序符合时间方向"""
        return F.sigmoid(self.logits(emb_a, emb_b, rng))


class StageHead(Module):
    """dropout -> 全连接到 4 个单元 -> softmax"""

    def __init__(self, rng: np.random.Generator, dropout: float = 0.3):
        super().__init__()
        self.dropout = self.add_module("dropout", Dropout(dropout))
        self.fc = self.add_module("fc", Dense(EMBEDDING_DIM, N_STAGES, rng))

    def logits(self, emb: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        emb = _as_batch("stage_head", emb)
        return self.fc(self.dropout(emb, rng))

    def forward(self, emb: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        """返回 (N, 4) 各阶段概率"""
        return F.softmax(self.logits(emb, rng))


def pretext_head(head: PretextHead, emb_a, emb_b) -> float:
    """单对嵌入的时间有效性概率（评估模式）"""
    with no_grad():
        return float(head.forward_pair(emb_a, emb_b).data[0, 0])


def stage_head(head: StageHead, emb) -> np.ndarray:
    """单个嵌入的四阶段概率（评估模式）"""
    with no_grad():
        return head.forward(emb).data[0].copy()
