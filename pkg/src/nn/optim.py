"""
Adam 优化器
带偏差校正的 Adam，原地更新参数
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from ..engine.tensor import Tensor
from ..utils.errors import NonFiniteError, ShapeError


@dataclass
class AdamState:
    """一阶/二阶矩缓冲、步数 t 和超参数"""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
) -> None:
    """
    执行一步 Adam 更新

    Args:
        params: 参数名 -> 参数张量（原地更新 data）
        grads: 参数名 -> 梯度；缺失或 None 视为零梯度
        state: 优化器状态，t 加 1；校验失败时参数和状态都不变

    Raises:
        NonFiniteError: 梯度含 NaN/Inf，错误信息指出参数名
        ShapeError: 梯度或矩缓冲形状与参数不符
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is not None:
            if grad.shape != param.shape:
                raise ShapeError(f"adam_step[{name}]", param.shape, grad.shape)
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"adam_step: 参数 {name} 的梯度包含非有限值")
        for moments in (state.m, state.v):
            buffer = moments.get(name)
            if buffer is not None and buffer.shape != param.shape:
                raise ShapeError(
                    f"adam_step[{name}]", param.shape, buffer.shape, detail="矩缓冲"
                )

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.t
    correction2 = 1.0 - b2**state.t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """绑定一组参数的 Adam，梯度取自各参数的 grad"""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.001):
        self.params = dict(params)
        self.state = AdamState(lr=lr)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        adam_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state)
