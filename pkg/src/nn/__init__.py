"""
网络模块
编码器、任务头、损失、Adam 和检查点
"""

from .checkpoint import load_checkpoint, save_checkpoint, select_prefix
from .encoder import EMBEDDING_DIM, EncoderModel, LayerSpec, build_encoder, images_to_tensor
from .heads import N_STAGES, PretextHead, StageHead, pretext_head, stage_head
from .layers import Module
from .losses import bce_loss, cce_loss
from .optim import Adam, AdamState, adam_step

__all__ = [
    "EMBEDDING_DIM",
    "N_STAGES",
    "EncoderModel",
    "LayerSpec",
    "Module",
    "PretextHead",
    "StageHead",
    "Adam",
    "AdamState",
    "adam_step",
    "bce_loss",
    "cce_loss",
    "build_encoder",
    "images_to_tensor",
    "pretext_head",
    "stage_head",
    "save_checkpoint",
    "load_checkpoint",
    "select_prefix",
]
