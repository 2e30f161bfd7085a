"""
有限差分梯度检查
用中心差分核对每个运算的解析梯度
"""

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor, backward

STEP = 1e-5
FLOOR = 1e-8
# ReLU / 最大池化的探测点与不可导点保持的最小距离
KINK_MARGIN = 1e-3


def _away_from_zero(values: np.ndarray) -> np.ndarray:
    sign = np.where(values >= 0, 1.0, -1.0)
    return sign * (np.abs(values) + 2 * KINK_MARGIN)


def _distinct_ranks(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """让所有取值两两相距至少 KINK_MARGIN，池化窗口内不会出现并列最大值"""
    flat = rng.permutation(values.size).astype(np.float64)
    return ((flat - values.size / 2) * 10 * KINK_MARGIN).reshape(values.shape)


def _binary(fn):
    return lambda ins, p: fn(ins[0], ins[1])


def _unary(fn):
    return lambda ins, p: fn(ins[0])


# 运算名 -> (构造函数(inputs, params), 默认输入形状)
OP_CASES: Dict[str, Tuple[Callable[[List[Tensor], dict], Tensor], List[Tuple[int, ...]]]] = {
    "add": (_binary(F.add), [(3, 4), (3, 4)]),
    "mul": (_binary(F.mul), [(3, 4), (3, 4)]),
    "matmul": (_binary(F.matmul), [(3, 4), (4, 2)]),
    "conv2d": (
        lambda ins, p: F.conv2d(
            ins[0], ins[1], ins[2], p.get("stride", 1), p.get("padding", 0)
        ),
        [(2, 2, 5, 5), (3, 2, 3, 3), (3,)],
    ),
    "max_pool2d": (
        lambda ins, p: F.max_pool2d(ins[0], p.get("size", 2), p.get("stride")),
        [(2, 2, 4, 4)],
    ),
    "global_avg_pool": (_unary(F.global_avg_pool), [(2, 3, 4, 4)]),
    "relu": (_unary(F.relu), [(8,)]),
    "sigmoid": (_unary(F.sigmoid), [(8,)]),
    "softmax": (_unary(F.softmax), [(3, 4)]),
    "concat": (lambda ins, p: F.concat(ins, axis=1), [(2, 4, 3, 3), (2, 6, 3, 3)]),
    "narrow": (
        lambda ins, p: F.narrow(ins[0], p.get("start", 1), p.get("length", 2), 1),
        [(2, 5)],
    ),
    "dropout": (
        # 每次求值重建同一个随机数发生器，掩码固定
        lambda ins, p: F.dropout(
            ins[0], p.get("rate", 0.3), True, np.random.default_rng(p.get("mask_seed", 0))
        ),
        [(4, 6)],
    ),
    "flatten": (_unary(F.flatten), [(2, 3, 2, 2)]),
    "sum": (_unary(F.sum_all), [(3, 3)]),
    "mean": (_unary(F.mean_all), [(3, 3)]),
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8)"""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_function(
    fn: Callable[[List[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    seed: int = 0,
    step: float = STEP,
) -> float:
    """
    对任意可微函数做梯度检查；非标量输出用固定随机投影化为标量

    Args:
        fn: 输入张量列表 -> 输出张量
        arrays: 输入数值
        seed: 投影向量种子
        step: 差分步长

    Returns:
        所有输入元素上的最大相对误差
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed + 7919)
    sample_out = fn([Tensor(a) for a in arrays])
    projection = rng.standard_normal(sample_out.shape)

    def scalar(values: List[np.ndarray], track: bool):
        tensors = [Tensor(v, requires_grad=track) for v in values]
        out = fn(tensors)
        loss = F.sum_all(F.mul(out, Tensor(projection)))
        return loss, tensors

    loss, tensors = scalar(arrays, True)
    backward(loss)
    worst = 0.0
    for index, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for k in range(base.size):
            shifted = [a.copy() for a in arrays]
            shifted[index].reshape(-1)[k] += step
            plus = scalar(shifted, False)[0].item()
            shifted[index].reshape(-1)[k] -= 2 * step
            minus = scalar(shifted, False)[0].item()
            flat[k] = (plus - minus) / (2 * step)
        worst = max(worst, relative_error(tensors[index].grad, numeric))
    return worst


def grad_check(
    op_kind: str,
    input_shapes: Sequence[Tuple[int, ...]] = (),
    seed: int = 0,
    **params,
) -> float:
    """
    检查单个运算的梯度

    Args:
        op_kind: 运算名，见 OP_CASES
        input_shapes: 输入形状，省略时使用默认形状
        seed: 输入取值种子
        params: 运算参数

    Returns:
        最大相对误差
    """
    if op_kind not in OP_CASES:
        raise KeyError(f"没有为运算 {op_kind} 定义梯度探测")
    build, default_shapes = OP_CASES[op_kind]
    shapes = list(input_shapes) or default_shapes
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(shape) for shape in shapes]
    if op_kind == "relu":
        arrays = [_away_from_zero(a) for a in arrays]
    if op_kind == "max_pool2d":
        arrays = [_distinct_ranks(a, rng) for a in arrays]
    return check_function(lambda ins: build(ins, params), arrays, seed=seed)
