"""
网络层
Module 基类、卷积/全连接/池化/激活/dropout 层和稠密连接块
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..engine import functional as F
from ..engine.tensor import Tensor
from ..utils.errors import CheckpointError, ShapeError

Shape = Tuple[int, ...]


def he_uniform(
    rng: np.random.Generator, shape: Shape, fan_in: int, name: str
) -> Tensor:
    """He-uniform 初始化：U(-sqrt(6/fan_in), sqrt(6/fan_in))"""
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)


def zeros(shape: Shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Module:
    """带命名参数和训练/评估模式的层基类"""

    def __init__(self):
        self.training = False
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def add_parameter(self, name: str, tensor: Tensor) -> Tensor:
        self._params[name] = tensor
        return tensor

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def train(self) -> "Module":
        self.training = True
        for child in self._children.values():
            child.train()
        return self

    def eval(self) -> "Module":
        self.training = False
        for child in self._children.values():
            child.eval()
        return self

    def zero_grad(self) -> None:
        for _, tensor in self.named_parameters():
            tensor.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """参数名 -> 数值副本"""
        return OrderedDict((n, t.data.copy()) for n, t in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        严格加载参数

        Raises:
            CheckpointError: 列出缺失、多余和形状不符的参数
        """
        params = self.parameters()
        missing = [n for n in params if n not in state]
        extra = [n for n in state if n not in params]
        misshaped = [
            f"{n} {tuple(np.shape(state[n]))}!={params[n].shape}"
            for n in params
            if n in state and tuple(np.shape(state[n])) != params[n].shape
        ]
        if missing or extra or misshaped:
            raise CheckpointError(
                "检查点与模型结构不一致: "
                f"missing={missing} extra={extra} misshaped={misshaped}"
            )
        for name, tensor in params.items():
            tensor.data[...] = np.asarray(state[name], dtype=np.float64)

    def output_shape(self, input_shape: Shape) -> Shape:
        raise NotImplementedError

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.forward(x, rng)


class Conv2d(Module):
    """二维卷积，输入输出形状为 (C, H, W)"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int,
        padding: int,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = self.add_parameter("weight", he_uniform(rng, shape, fan_in, "weight"))
        self.bias = self.add_parameter("bias", zeros((out_channels,), "bias"))

    def output_shape(self, input_shape: Shape) -> Shape:
        c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError("conv2d", input_shape, (self.in_channels,), detail="通道数不符")
        oh = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        if h + 2 * self.padding < self.kernel_size or oh < 1 or ow < 1:
            return (self.out_channels, 0, 0)
        return (self.out_channels, oh, ow)

    def forward(self, x, rng=None):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Dense(Module):
    """全连接层 (N, in) -> (N, out)"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.add_parameter(
            "weight", he_uniform(rng, (in_features, out_features), in_features, "weight")
        )
        self.bias = self.add_parameter("bias", zeros((out_features,), "bias"))

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape != (self.in_features,):
            raise ShapeError("dense", input_shape, (self.in_features,))
        return (self.out_features,)

    def forward(self, x, rng=None):
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError("dense", x.shape, (self.in_features, self.out_features))
        return F.add(F.matmul(x, self.weight), self.bias)


class MaxPool2d(Module):
    def __init__(self, size: int = 2, stride: Optional[int] = None):
        super().__init__()
        self.size = size
        self.stride = size if stride is None else stride

    def output_shape(self, input_shape: Shape) -> Shape:
        c, h, w = input_shape
        if h < self.size or w < self.size:
            return (c, 0, 0)
        return (c, (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1)

    def forward(self, x, rng=None):
        return F.max_pool2d(x, self.size, self.stride)


class GlobalAvgPool(Module):
    def output_shape(self, input_shape: Shape) -> Shape:
        return (input_shape[0],)

    def forward(self, x, rng=None):
        return F.global_avg_pool(x)


class Activation(Module):
    FUNCTIONS = {"relu": F.relu, "sigmoid": F.sigmoid, "softmax": F.softmax}

    def __init__(self, function: str = "relu"):
        super().__init__()
        if function not in self.FUNCTIONS:
            raise ValueError(f"未知激活函数: {function}")
        self.function = function

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def forward(self, x, rng=None):
        return self.FUNCTIONS[self.function](x)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout 丢弃率必须在 [0, 1) 内，实际为 {rate}")
        self.rate = rate

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def forward(self, x, rng=None):
        return F.dropout(x, self.rate, self.training, rng)


class DenseBlock(Module):
    """
    稠密连接块：第 i 层的输入是块输入与此前所有层输出的通道拼接，
    输出通道 = in_channels + layers * growth_rate
    """

    def __init__(
        self,
        in_channels: int,
        layers: int,
        growth_rate: int,
        rng: np.random.Generator,
        kernel_size: int = 3,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.growth_rate = growth_rate
        self.convs: List[Conv2d] = []
        for i in range(layers):
            conv = Conv2d(
                in_channels + i * growth_rate,
                growth_rate,
                kernel_size,
                1,
                kernel_size // 2,
                rng,
            )
            self.convs.append(self.add_module(f"layer{i}", conv))

    @property
    def out_channels(self) -> int:
        return self.in_channels + len(self.convs) * self.growth_rate

    def output_shape(self, input_shape: Shape) -> Shape:
        c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(
                "dense_block", input_shape, (self.in_channels,), detail="通道数不符"
            )
        return (self.out_channels, h, w)

    def forward(self, x, rng=None):
        features = x
        for conv in self.convs:
            new = F.relu(conv(features))
            features = F.concat([features, new], axis=1)
        return features
