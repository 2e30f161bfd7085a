"""
图像编码器
桌面规模的稠密连接编码器：卷积主干 + 稠密块 + 过渡层 + 全局平均池化 + 16 维全连接
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from ..engine.tensor import Tensor
from ..utils.errors import ShapeError
from .layers import (
    Activation,
    Conv2d,
    Dense,
    DenseBlock,
    Dropout,
    GlobalAvgPool,
    MaxPool2d,
    Module,
    Shape,
)

EMBEDDING_DIM = 16

DEFAULT_ENCODER_CONFIG: Dict[str, Any] = {
    "image_size": 64,
    "in_channels": 3,
    "stem_channels": 16,
    "dense_blocks": 2,
    "layers_per_block": 3,
    "growth_rate": 8,
    "embedding_dim": EMBEDDING_DIM,
}


@dataclass
class LayerSpec:
    """单层描述：kind 取 conv / dense / pool / activation / dropout / dense_block"""

    kind: str
    params: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        for key, value in self.params.items():
            if key == "rate":
                if not 0 <= value < 1:
                    raise ValueError(f"{self.kind}.rate 必须在 [0, 1) 内，实际为 {value}")
            elif isinstance(value, int) and key != "padding" and value < 1:
                raise ValueError(f"{self.kind}.{key} 必须为正，实际为 {value}")


def encoder_layer_specs(config: Dict[str, Any]) -> List[LayerSpec]:
    """
    根据配置生成层序列

    主干：3x3 stride 2 卷积 + 2x2 最大池化；每个稠密块之间接 1x1 卷积
    （通道减半）和 2x2 最大池化；末尾全局平均池化后全连接到 16 维。
    """
    cfg = {**DEFAULT_ENCODER_CONFIG, **config}
    stem = cfg["stem_channels"]
    specs = [
        LayerSpec(
            "conv",
            {"in": cfg["in_channels"], "out": stem, "kernel": 3, "stride": 2, "padding": 1},
        ),
        LayerSpec("activation", {"function": "relu"}),
        LayerSpec("pool", {"size": 2}),
    ]
    channels = stem
    for block in range(cfg["dense_blocks"]):
        specs.append(
            LayerSpec(
                "dense_block",
                {
                    "in": channels,
                    "layers": cfg["layers_per_block"],
                    "growth": cfg["growth_rate"],
                },
            )
        )
        channels += cfg["layers_per_block"] * cfg["growth_rate"]
        if block < cfg["dense_blocks"] - 1:
            reduced = max(1, channels // 2)
            specs += [
                LayerSpec(
                    "conv",
                    {"in": channels, "out": reduced, "kernel": 1, "stride": 1, "padding": 0},
                ),
                LayerSpec("activation", {"function": "relu"}),
                LayerSpec("pool", {"size": 2}),
            ]
            channels = reduced
    specs += [
        LayerSpec("pool", {"mode": "global"}),
        LayerSpec("dense", {"in": channels, "out": cfg["embedding_dim"]}),
    ]
    return specs


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Module:
    spec.validate()
    p = spec.params
    if spec.kind == "conv":
        return Conv2d(p["in"], p["out"], p["kernel"], p["stride"], p["padding"], rng)
    if spec.kind == "dense":
        return Dense(p["in"], p["out"], rng)
    if spec.kind == "pool":
        if p.get("mode") == "global":
            return GlobalAvgPool()
        return MaxPool2d(p["size"], p.get("stride"))
    if spec.kind == "activation":
        return Activation(p.get("function", "relu"))
    if spec.kind == "dropout":
        return Dropout(p["rate"])
    if spec.kind == "dense_block":
        return DenseBlock(p["in"], p["layers"], p["growth"], rng)
    raise ValueError(f"未知层类型: {spec.kind}")


class EncoderModel(Module):
    """把 (N, 3, H, W) 图像编码为 (N, 16) 嵌入"""

    def __init__(self, specs: List[LayerSpec], input_shape: Shape, seed: int):
        super().__init__()
        self.specs = specs
        self.input_shape = input_shape
        rng = np.random.default_rng(seed)
        self.layers: List[Module] = []
        shape = input_shape
        for index, spec in enumerate(specs):
            layer = build_layer(spec, rng)
            try:
                shape = layer.output_shape(shape)
            except ShapeError as e:
                raise ShapeError(
                    f"layers[{index}] ({spec.kind})", shape, detail=e.message
                )
            if any(extent < 1 for extent in shape):
                raise ShapeError(
                    f"layers[{index}] ({spec.kind})",
                    shape,
                    detail="空间尺寸非正，请增大 image_size 或减少稠密块数",
                )
            self.layers.append(self.add_module(str(index), layer))
        if shape != (EMBEDDING_DIM,):
            raise ShapeError("encoder", shape, (EMBEDDING_DIM,), detail="嵌入维度必须为 16")
        self.embedding_dim = EMBEDDING_DIM

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        if x.data.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError("encoder", x.shape, (None,) + self.input_shape)
        for layer in self.layers:
            x = layer(x, rng)
        return x


def build_encoder(config: Optional[Dict[str, Any]] = None, seed: int = 0) -> EncoderModel:
    """
    按配置构建编码器

    Args:
        config: image_size / stem_channels / dense_blocks / layers_per_block /
            growth_rate，缺省取默认值
        seed: 参数初始化种子

    Returns:
        编码器

    Raises:
        ShapeError: 某层输出空间尺寸非正，错误信息指出该层
    """
    cfg = {**DEFAULT_ENCODER_CONFIG, **(config or {})}
    if cfg.get("embedding_dim", EMBEDDING_DIM) != EMBEDDING_DIM:
        raise ValueError("embedding_dim 固定为 16")
    specs = encoder_layer_specs(cfg)
    input_shape = (cfg["in_channels"], cfg["image_size"], cfg["image_size"])
    return EncoderModel(specs, input_shape, seed)


def images_to_tensor(images: np.ndarray) -> Tensor:
    """(N, H, W, 3) 像素数组 -> (N, 3, H, W) 张量"""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    return Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
