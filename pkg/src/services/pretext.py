"""
时间有效性预训练服务
在图像对上训练共享权重的双分支模型，并为每张图像提取 16 维嵌入
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..engine.tensor import Tensor, backward, no_grad
from ..nn import (
    EMBEDDING_DIM,
    Adam,
    EncoderModel,
    Module,
    PretextHead,
    bce_loss,
    build_encoder,
    images_to_tensor,
    load_checkpoint,
    save_checkpoint,
)
from ..utils.config import ConfigManager
from ..utils.errors import DatasetError, NonFiniteError
from ..utils.file_utils import FileUtils
from ..utils.logger import Logger
from ..utils.logger import logger as default_logger
from ..utils.prefetch import BatchPrefetcher
from .dataset import SPLIT_PARTS, ImagePair, Key, WoundSeries, augment
from .training import (
    HISTORY_COLUMNS,
    BestWeights,
    EpochRecord,
    TrainingConfig,
    TrainingHistory,
    epoch_batches,
)

EVAL_BATCH = 64


class PretextModel(Module):
    """两个分支调用同一个编码器对象，参数天然共享"""

    def __init__(self, encoder: EncoderModel, head: PretextHead):
        super().__init__()
        self.encoder = self.add_module("encoder", encoder)
        self.head = self.add_module("head", head)

    def forward_pair(
        self, x_a: Tensor, x_b: Tensor, rng: Optional[np.random.Generator] = None
    ) -> Tensor:
        emb_a = self.encoder(x_a, rng)
        emb_b = self.encoder(x_b, rng)
        return self.head.forward_pair(emb_a, emb_b, rng)

    def embed(self, x: Tensor) -> Tensor:
        return self.encoder(x)


def build_pretext_model(
    encoder_config: Optional[Dict] = None, seed: int = 0, dropout: float = 0.3
) -> PretextModel:
    encoder = build_encoder(encoder_config, seed)
    head = PretextHead(np.random.default_rng([seed, 1]), dropout)
    return PretextModel(encoder, head)


@dataclass
class EmbeddingSet:
    """每个 (wound_id, day) 一条 16 维嵌入"""

    keys: List[Key]
    matrix: np.ndarray
    cohorts: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(-1, EMBEDDING_DIM)
        if len(self.keys) != self.matrix.shape[0]:
            raise DatasetError(
                f"嵌入数量 {self.matrix.shape[0]} 与键数量 {len(self.keys)} 不符"
            )
        if len(set(self.keys)) != len(self.keys):
            raise DatasetError("嵌入集中存在重复的 (wound_id, day)")
        if not np.all(np.isfinite(self.matrix)):
            raise NonFiniteError("嵌入包含非有限值")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def days(self) -> np.ndarray:
        return np.array([day for _, day in self.keys], dtype=np.float64)

    def cohort_of(self, index: int) -> str:
        return self.cohorts.get(self.keys[index][0], "unknown")

    def rows_for(self, wound_ids: Sequence[str]) -> np.ndarray:
        """属于给定伤口的记录下标"""
        wanted = set(wound_ids)
        return np.array([i for i, (w, _) in enumerate(self.keys) if w in wanted], dtype=np.int64)


def pair_batch(
    pairs: Sequence[ImagePair], indices: Sequence[int], seeds: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    组装一个图像对批次

    给定 seeds（形状 (N, 2)）时，第 i 对的 a、b 分别用 seeds[i, 0]、seeds[i, 1]
    独立增强，两张图像的增强方式互不相关。

    Returns:
        (images_a, images_b, labels)，图像为 (B, H, W, 3)
    """
    images_a, images_b = [], []
    for i in indices:
        pair = pairs[i]
        a, b = pair.image_a.pixels, pair.image_b.pixels
        if seeds is not None:
            a, b = augment(a, int(seeds[i, 0])), augment(b, int(seeds[i, 1]))
        images_a.append(a)
        images_b.append(b)
    labels = np.array([pairs[i].label for i in indices], dtype=np.float64)
    return np.stack(images_a), np.stack(images_b), labels


def _embed_unique(model: PretextModel, pairs: Sequence[ImagePair]) -> Dict[Key, np.ndarray]:
    images = {}
    for pair in pairs:
        images.setdefault(pair.image_a.key, pair.image_a.pixels)
        images.setdefault(pair.image_b.key, pair.image_b.pixels)
    keys = list(images)
    out: Dict[Key, np.ndarray] = {}
    for start in range(0, len(keys), EVAL_BATCH):
        chunk = keys[start : start + EVAL_BATCH]
        emb = model.embed(images_to_tensor(np.stack([images[k] for k in chunk]))).data
        out.update(zip(chunk, emb))
    return out


def eval_pretext(model: PretextModel, pairs: Sequence[ImagePair]) -> Tuple[float, float]:
    """
    评估模式下的图像对准确率和平均 BCE

    p > 0.5 判为正向；每张图像只编码一次。

    Returns:
        (accuracy, loss)

    Raises:
        DatasetError: 图像对为空
    """
    if not pairs:
        raise DatasetError("评估图像对为空")
    model.eval()
    with no_grad():
        embeddings = _embed_unique(model, pairs)
        emb_a = np.stack([embeddings[p.image_a.key] for p in pairs])
        emb_b = np.stack([embeddings[p.image_b.key] for p in pairs])
        labels = np.array([p.label for p in pairs], dtype=np.float64)
        probs = model.head.forward_pair(Tensor(emb_a), Tensor(emb_b))
        loss = bce_loss(probs, labels).item()
    accuracy = float(np.mean((probs.data.reshape(-1) > 0.5) == (labels == 1)))
    return accuracy, loss


def train_pretext(
    pairs_train: Sequence[ImagePair],
    pairs_val: Sequence[ImagePair],
    config: TrainingConfig,
    encoder_config: Optional[Dict] = None,
    logger: Optional[Logger] = None,
) -> Tuple[PretextModel, TrainingHistory]:
    """
    训练时间有效性模型

    每轮完整遍历一次打乱后的训练对，最小化平均 BCE；保留验证准确率最高一轮
    的权重（并列取最早），无验证集时按训练准确率选择。

    Args:
        pairs_train: 训练图像对
        pairs_val: 验证图像对，可为空
        config: 训练超参数
        encoder_config: 编码器配置
        logger: 日志记录器

    Returns:
        (模型, 训练历史)

    Raises:
        DatasetError: 训练图像对为空
        NonFiniteError: 损失非有限，错误信息包含轮次和批次
    """
    log = logger or default_logger
    config.validate()
    if not pairs_train:
        raise DatasetError("训练图像对为空")

    model = build_pretext_model(encoder_config, config.seed, config.dropout)
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    order_rng = np.random.default_rng([config.seed, 2])
    dropout_rng = np.random.default_rng([config.seed, 3])
    history = TrainingHistory()
    best = BestWeights()

    for epoch in range(1, config.epochs + 1):
        batches, seeds = epoch_batches(
            order_rng, len(pairs_train), config.batch_size, seeds_per_item=2
        )
        aug_seeds = seeds if config.augment else None

        def make_batch(index: int):
            return pair_batch(pairs_train, batches[index], aug_seeds)

        model.train()
        total_loss = 0.0
        correct = 0
        seen = 0
        prefetcher = BatchPrefetcher(make_batch, len(batches), config.workers)
        for batch_index, (x_a, x_b, labels) in enumerate(prefetcher, 1):
            optimizer.zero_grad()
            try:
                probs = model.forward_pair(
                    images_to_tensor(x_a), images_to_tensor(x_b), dropout_rng
                )
                loss = bce_loss(probs, labels)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("损失非有限")
                backward(loss)
                optimizer.step()
            except NonFiniteError as e:
                raise NonFiniteError(f"pretext 第 {epoch} 轮第 {batch_index} 批: {e.message}")
            total_loss += loss.item() * labels.size
            correct += int(np.sum((probs.data.reshape(-1) > 0.5) == (labels == 1)))
            seen += labels.size
            log.progress(batch_index, len(batches), f"pretext 第 {epoch} 轮")

        train_loss = total_loss / seen
        train_acc = correct / seen
        if pairs_val:
            val_acc, val_loss = eval_pretext(model, pairs_val)
        else:
            val_acc, val_loss = float("nan"), float("nan")
        history.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc))
        log.epoch("pretext", epoch, config.epochs, train_loss, train_acc, val_loss, val_acc)
        best.offer(epoch, val_acc if pairs_val else train_acc, model.state_dict)

    model.load_state_dict(best.state)
    model.eval()
    history.best_epoch = best.epoch
    log.info(f"🏁 保留第 {best.epoch} 轮权重")
    return model, history


def embed_all(model: PretextModel, series_list: Sequence[WoundSeries]) -> EmbeddingSet:
    """
    评估模式、无增强地为每张图像提取嵌入

    逐张编码，同一图像无论出现几次都得到逐位相同的向量。
    """
    model.eval()
    keys: List[Key] = []
    rows: List[np.ndarray] = []
    with no_grad():
        for series in series_list:
            for image in series.images:
                keys.append(image.key)
                rows.append(model.embed(images_to_tensor(image.pixels)).data[0].copy())
    matrix = np.stack(rows) if rows else np.zeros((0, EMBEDDING_DIM))
    return EmbeddingSet(keys, matrix, {s.wound_id: s.cohort for s in series_list})


def save_pretext(path: Union[str, Path], model: PretextModel) -> int:
    return save_checkpoint(path, model.state_dict())


def load_pretext(
    path: Union[str, Path], encoder_config: Optional[Dict] = None, dropout: float = 0.3
) -> PretextModel:
    """按编码器配置构建模型并严格加载检查点"""
    model = build_pretext_model(encoder_config, 0, dropout)
    model.load_state_dict(load_checkpoint(path))
    model.eval()
    return model


class PretextResult:
    """预训练结果类"""

    def __init__(self):
        self.model: Optional[PretextModel] = None
        self.history: Optional[TrainingHistory] = None
        self.accuracy: Dict[str, float] = {}
        self.loss: Dict[str, float] = {}
        self.pair_counts: Dict[str, int] = {}
        self.success = False
        self.error: Optional[str] = None

    def set_success(self, model: PretextModel, history: TrainingHistory) -> None:
        """设置成功结果"""
        self.model = model
        self.history = history
        self.success = True

    def set_error(self, error: str) -> None:
        """设置错误结果"""
        self.error = error
        self.success = False


class PretextService:
    """预训练服务类"""

    EMBEDDING_COLUMNS = ("wound_id", "day") + tuple(f"e{i}" for i in range(EMBEDDING_DIM))

    def __init__(
        self, config_manager: ConfigManager, logger: Logger, file_utils: FileUtils
    ):
        """
        初始化预训练服务

        Args:
            config_manager: 配置管理器
            logger: 日志记录器
            file_utils: 文件工具
        """
        self.config_manager = config_manager
        self.logger = logger
        self.file_utils = file_utils

    def training_config(self) -> TrainingConfig:
        return TrainingConfig.from_section(
            self.config_manager.get_pretext_config(), self.config_manager.get_seed()
        )

    def train(self, pairs: Dict[str, List[ImagePair]]) -> PretextResult:
        """
        训练并在三个划分上评估图像对准确率

        Args:
            pairs: 划分名 -> 图像对

        Returns:
            预训练结果
        """
        result = PretextResult()
        result.pair_counts = {part: len(pairs.get(part, [])) for part in SPLIT_PARTS}
        self.logger.info(
            "🧠 预训练图像对: "
            + ", ".join(f"{p}={result.pair_counts[p]}" for p in SPLIT_PARTS)
        )
        model, history = train_pretext(
            pairs.get("train", []),
            pairs.get("val", []),
            self.training_config(),
            self.config_manager.get_encoder_config(),
            self.logger,
        )
        result.set_success(model, history)
        for part in SPLIT_PARTS:
            if pairs.get(part):
                result.accuracy[part], result.loss[part] = eval_pretext(model, pairs[part])
                self.logger.info(f"🎯 {part} 图像对准确率 {result.accuracy[part]:.4f}")
        return result

    def load_model(self, path: Union[str, Path]) -> PretextModel:
        return load_pretext(
            path,
            self.config_manager.get_encoder_config(),
            self.config_manager.get_pretext_config()["dropout"],
        )

    def write_history(self, path: Union[str, Path], history: TrainingHistory) -> None:
        self.file_utils.write_table(
            path, HISTORY_COLUMNS, history.rows(), comments=[f"best_epoch {history.best_epoch}"]
        )

    def write_embeddings(self, path: Union[str, Path], embeddings: EmbeddingSet) -> None:
        rows = [
            (wound_id, day, *embeddings.matrix[i])
            for i, (wound_id, day) in enumerate(embeddings.keys)
        ]
        self.file_utils.write_table(path, self.EMBEDDING_COLUMNS, rows)

    def read_embeddings(
        self, path: Union[str, Path], cohorts: Optional[Dict[str, str]] = None
    ) -> EmbeddingSet:
        """
        读取嵌入表

        Args:
            path: 嵌入文件
            cohorts: wound_id -> 年龄组
        """
        _, rows = self.file_utils.read_table(path)
        keys = [(row[0], int(row[1])) for row in rows]
        matrix = np.array([[float(v) for v in row[2:]] for row in rows], dtype=np.float64)
        return EmbeddingSet(keys, matrix.reshape(-1, EMBEDDING_DIM), dict(cohorts or {}))
