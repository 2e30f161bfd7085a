"""
张量与计算图
float64 稠密张量，记录前向运算并按逆拓扑序反向传播梯度
"""

import contextlib
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.errors import NonFiniteError, ShapeError

# 反向函数：输入输出梯度，返回每个父节点的梯度（不需要梯度的父节点可返回 None）
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """在上下文内不记录计算图（推理、评估）"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    n 维 float64 张量

    创建后 data 只读（优化器对叶子参数的原地更新除外），grad 仅在
    requires_grad 为 True 时存在。
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str = "",
    ):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(())
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(array) if requires_grad else None
        )
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def op(self) -> str:
        return self._op

    def numpy(self) -> np.ndarray:
        """返回数据副本"""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="只有单元素张量可以转为标量")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """从当前标量张量反向传播"""
        backward(self)

    def __repr__(self) -> str:
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{grad_flag})"

    # 运算符重载交给 functional，避免循环导入
    def __add__(self, other: "Tensor") -> "Tensor":
        from .functional import add

        return add(self, as_tensor(other))

    def __mul__(self, other: "Tensor") -> "Tensor":
        from .functional import mul

        return mul(self, as_tensor(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from .functional import matmul

        return matmul(self, as_tensor(other))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def check_finite(op: str, *tensors: Tensor) -> None:
    """
    检查输入全部有限

    Raises:
        NonFiniteError: 存在 NaN 或 Inf
    """
    for index, tensor in enumerate(tensors):
        if not np.all(np.isfinite(tensor.data)):
            raise NonFiniteError(f"{op}: 第 {index} 个输入包含非有限值")


def make_result(
    op: str,
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
) -> Tensor:
    """
    创建运算结果；任一输入需要梯度且梯度记录开启时登记图节点

    Args:
        op: 运算名
        data: 前向结果
        parents: 输入张量
        backward_fn: 反向函数

    Returns:
        结果张量
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = ""
    out._op = op
    needs_graph = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs_graph
    out.grad = None
    if needs_graph:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


class ComputeGraph:
    """
    以某个输出为终点的计算图，节点按拓扑序排列
    """

    def __init__(self, nodes: List[Tensor], output: Tensor):
        self.nodes = nodes
        self.output = output

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputeGraph":
        """
        从输出张量回溯构建拓扑序（迭代 DFS，避免深图递归溢出）

        Args:
            output: 图的终点

        Returns:
            计算图
        """
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order, output)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def backward(self) -> None:
        """
        按逆拓扑序传播梯度，只把梯度累加到叶子的 grad 上

        Raises:
            ShapeError: 输出不是标量
        """
        loss = self.output
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, detail="损失必须是标量")
        if not loss.requires_grad:
            return

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = node.grad + grad if node.grad is not None else grad.copy()
                continue
            parent_grads = node._backward(grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad


def backward(loss: Tensor, graph: Optional[ComputeGraph] = None) -> ComputeGraph:
    """
    对标量损失反向传播；重复调用会把梯度叠加到叶子上

    Args:
        loss: 标量损失
        graph: 已构建的计算图，默认从 loss 回溯

    Returns:
        使用的计算图
    """
    if graph is None:
        graph = ComputeGraph.from_output(loss)
    elif graph.output is not loss:
        raise ShapeError("backward", loss.shape, detail="计算图不以该损失为终点")
    graph.backward()
    return graph
