"""
可微运算
每个运算检查输入形状与有限性，计算前向结果并登记反向函数
"""

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..utils.errors import ShapeError
from .tensor import Tensor, check_finite, make_result


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """把广播后的梯度求和回原形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="无法广播")


def add(a: Tensor, b: Tensor) -> Tensor:
    """逐元素加法（支持广播）"""
    _broadcast_shape("add", a, b)
    check_finite("add", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """逐元素乘法（支持广播）"""
    _broadcast_shape("mul", a, b)
    check_finite("mul", a, b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", a.data * b.data, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """二维矩阵乘法"""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    check_finite("matmul", a, b)

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return make_result("matmul", a.data @ b.data, (a, b), backward_fn)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    二维卷积（NCHW，im2col + 矩阵乘）

    Args:
        x: 输入 (N, C, H, W)
        w: 卷积核 (F, C, kh, kw)
        b: 偏置 (F,)，可选
        stride: 步幅
        padding: 四周补零宽度

    Returns:
        输出 (N, F, oh, ow)
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, detail="偏置长度应等于输出通道数")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d", x.shape, w.shape, detail="stride>=1, padding>=0")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if hp < kh or wp < kw or oh < 1 or ow < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="输出空间尺寸非正")
    check_finite("conv2d", x, w, *([b] if b is not None else []))

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (gmat.T @ cols).reshape(w.shape)
        dx = None
        # 输入图像不需要梯度时跳过 col2im
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[
                        :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
                    ] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding : padding + h, padding : padding + wd]
        if b is None:
            return dx, dw
        return dx, dw, gmat.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_result("conv2d", out, parents, backward_fn)


def max_pool2d(x: Tensor, size: int = 2, stride: Optional[int] = None) -> Tensor:
    """
    二维最大池化，梯度只回传到窗口内第一个最大值位置

    Args:
        x: 输入 (N, C, H, W)
        size: 窗口边长
        stride: 步幅，默认等于 size
    """
    stride = size if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d", x.shape, detail="输入必须是 4 维")
    n, c, h, wd = x.shape
    if size < 1 or stride < 1 or h < size or wd < size:
        raise ShapeError("max_pool2d", x.shape, (size, size), detail="输出空间尺寸非正")
    check_finite("max_pool2d", x)
    oh = (h - size) // stride + 1
    ow = (wd - size) // stride + 1

    windows = sliding_window_view(x.data, (size, size), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]
    flat = windows.reshape(n, c, oh, ow, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        for i in range(size):
            for j in range(size):
                mask = idx == i * size + j
                dx[
                    :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
                ] += g * mask
        return (dx,)

    return make_result("max_pool2d", out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """全局平均池化 (N, C, H, W) -> (N, C)"""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape, detail="输入必须是 4 维")
    check_finite("global_avg_pool", x)
    h, wd = x.shape[2], x.shape[3]

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * wd), x.shape).copy(),)

    return make_result("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    """ReLU，0 处次梯度取 0"""
    check_finite("relu", x)
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return make_result("relu", np.where(mask, x.data, 0.0), (x,), backward_fn)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    check_finite("sigmoid", x)
    s = _stable_sigmoid(x.data)

    def backward_fn(g):
        return (g * s * (1.0 - s),)

    return make_result("sigmoid", s, (x,), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """沿最后一维的 softmax"""
    if x.data.ndim < 1:
        raise ShapeError("softmax", x.shape, detail="输入至少 1 维")
    check_finite("softmax", x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_result("softmax", s, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """
    沿指定维拼接（默认通道维）

    Raises:
        ShapeError: 除拼接维以外的形状不一致
    """
    if not tensors:
        raise ShapeError("concat", (), detail="至少需要一个输入")
    first = tensors[0]
    ndim = first.data.ndim
    axis = axis % ndim
    for other in tensors[1:]:
        same_rank = other.data.ndim == ndim
        if not same_rank or any(
            first.shape[d] != other.shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeError("concat", first.shape, other.shape)
    check_finite("concat", *tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return np.split(g, bounds, axis=axis)

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result("concat", out, tuple(tensors), backward_fn)


def narrow(x: Tensor, start: int, length: int, axis: int = 1) -> Tensor:
    """沿 axis 取 [start, start+length) 切片"""
    axis = axis % x.data.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            "narrow", x.shape, (start, start + length), detail=f"axis={axis} 越界"
        )
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return make_result("narrow", x.data[index].copy(), (x,), backward_fn)


def dropout(
    x: Tensor,
    rate: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    反向缩放的 dropout：训练时保留概率为 1-rate 并除以保留概率，评估时为恒等

    Args:
        x: 输入
        rate: 丢弃率，[0, 1)
        training: 是否训练模式
        rng: 随机数发生器（训练模式必需）
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout: 丢弃率必须在 [0, 1) 内，实际为 {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout: 训练模式需要随机数发生器")
    check_finite("dropout", x)
    keep = 1.0 - rate
    scale = (rng.random(x.shape) >= rate) / keep

    def backward_fn(g):
        return (g * scale,)

    return make_result("dropout", x.data * scale, (x,), backward_fn)


def flatten(x: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...))"""
    if x.data.ndim < 1:
        raise ShapeError("flatten", x.shape, detail="输入至少 1 维")
    check_finite("flatten", x)
    shape = x.shape

    def backward_fn(g):
        return (g.reshape(shape),)

    return make_result("flatten", x.data.reshape(shape[0], -1), (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    check_finite("sum", x)

    def backward_fn(g):
        return (np.full(x.shape, float(g)),)

    return make_result("sum", np.array(x.data.sum()), (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    check_finite("mean", x)
    count = max(1, x.data.size)

    def backward_fn(g):
        return (np.full(x.shape, float(g) / count),)

    return make_result("mean", np.array(x.data.mean()), (x,), backward_fn)


OPS: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "global_avg_pool": global_avg_pool,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "concat": lambda *tensors, axis=1: concat(tensors, axis=axis),
    "narrow": narrow,
    "dropout": dropout,
    "flatten": flatten,
    "sum": sum_all,
    "mean": mean_all,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """
    按名称执行运算

    Args:
        kind: 运算名，见 OPS
        inputs: 输入张量
        params: 运算参数（stride、padding、rate 等）

    Returns:
        结果张量

    Raises:
        KeyError: 未知运算
    """
    if kind not in OPS:
        raise KeyError(f"未知运算: {kind}")
    return OPS[kind](*inputs, **params)


def supported_ops() -> List[str]:
    return sorted(OPS)
