"""
损失函数
二元交叉熵（时间有效性）与类别交叉熵（阶段分类），概率截断到 [1e-7, 1-1e-7]
"""

import numpy as np

from ..engine.tensor import Tensor, check_finite, make_result
from ..utils.errors import LabelError, ShapeError

CLAMP = 1e-7


def _labels(y, n: int, op: str) -> np.ndarray:
    labels = np.asarray(y)
    if labels.ndim == 0:
        labels = labels.reshape(1)
    if labels.shape != (n,):
        raise ShapeError(op, (n,), labels.shape, detail="标签数量与预测数量不符")
    return labels


def bce_loss(p: Tensor, y) -> Tensor:
    """
    二元交叉熵 -[y ln p + (1-y) ln(1-p)]，批量时取平均

    Args:
        p: 概率，形状 (N,) 或标量
        y: 0/1 标签

    Raises:
        LabelError: 标签不在 {0, 1}
    """
    p = p if isinstance(p, Tensor) else Tensor(p)
    check_finite("bce_loss", p)
    probs = p.data.reshape(-1)
    labels = _labels(y, probs.size, "bce_loss")
    if not np.all((labels == 0) | (labels == 1)):
        found = sorted(set(labels.tolist()))
        raise LabelError(f"bce_loss: 标签必须为 0 或 1，实际包含 {found}")
    labels = labels.astype(np.float64)
    clipped = np.clip(probs, CLAMP, 1.0 - CLAMP)
    inside = (probs >= CLAMP) & (probs <= 1.0 - CLAMP)
    n = probs.size
    value = -np.mean(labels * np.log(clipped) + (1.0 - labels) * np.log(1.0 - clipped))

    def backward_fn(g):
        grad = (-labels / clipped + (1.0 - labels) / (1.0 - clipped)) / n
        return ((g * grad * inside).reshape(p.shape),)

    return make_result("bce_loss", np.array(value), (p,), backward_fn)


def cce_loss(probs: Tensor, y) -> Tensor:
    """
    类别交叉熵 -ln(probs[y])，批量时取平均

    Args:
        probs: (N, C) 或 (C,) 概率
        y: 类别序号

    Raises:
        LabelError: 类别序号越界
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    check_finite("cce_loss", probs)
    data = probs.data if probs.data.ndim == 2 else probs.data.reshape(1, -1)
    n, classes = data.shape
    labels = _labels(y, n, "cce_loss")
    if not np.all(np.equal(np.mod(labels, 1), 0)) or np.any(labels < 0) or np.any(
        labels >= classes
    ):
        raise LabelError(f"cce_loss: 类别序号必须在 0..{classes - 1} 内")
    labels = labels.astype(np.int64)
    rows = np.arange(n)
    picked = data[rows, labels]
    clipped = np.clip(picked, CLAMP, 1.0 - CLAMP)
    inside = (picked >= CLAMP) & (picked <= 1.0 - CLAMP)
    value = -np.mean(np.log(clipped))

    def backward_fn(g):
        grad = np.zeros_like(data)
        grad[rows, labels] = -(1.0 / clipped) / n * inside
        return ((g * grad).reshape(probs.shape),)

    return make_result("cce_loss", np.array(value), (probs,), backward_fn)
