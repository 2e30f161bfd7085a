"""
张量引擎
float64 张量、可微运算与有限差分梯度检查
"""

from .functional import forward_op, supported_ops
from .gradcheck import grad_check
from .tensor import ComputeGraph, Tensor, backward, no_grad

__all__ = [
    "Tensor",
    "ComputeGraph",
    "backward",
    "no_grad",
    "forward_op",
    "supported_ops",
    "grad_check",
]
