"""
服务模块
包含数据集、合成、预训练、阶段发现和下游分类五个核心服务
"""

from .dataset import DatasetService, PairingResult
from .downstream import DownstreamResult, DownstreamService
from .pretext import PretextResult, PretextService
from .stagedisc import StageDiscoveryResult, StageDiscoveryService
from .synth import SynthResult, SynthService

__all__ = [
    "DatasetService",
    "PairingResult",
    "SynthService",
    "SynthResult",
    "PretextService",
    "PretextResult",
    "StageDiscoveryService",
    "StageDiscoveryResult",
    "DownstreamService",
    "DownstreamResult",
]
