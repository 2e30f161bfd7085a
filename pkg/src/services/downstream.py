"""
下游阶段分类服务
把预训练编码器改接四分类头并在伪标签上微调；同结构的从零训练基线；准确率、混淆矩阵与标注一致率
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..engine.tensor import Tensor, backward, no_grad
from ..nn import (
    N_STAGES,
    Adam,
    EncoderModel,
    Module,
    StageHead,
    build_encoder,
    cce_loss,
    images_to_tensor,
    load_checkpoint,
    save_checkpoint,
    select_prefix,
)
from ..utils.config import ConfigManager
from ..utils.errors import DatasetError, LabelError, NonFiniteError
from ..utils.file_utils import FileUtils
from ..utils.logger import Logger
from ..utils.logger import logger as default_logger
from ..utils.prefetch import BatchPrefetcher
from .dataset import SPLIT_PARTS, Key, SplitSpec, WoundImage, WoundSeries, augment
from .training import (
    HISTORY_COLUMNS,
    BestWeights,
    EpochRecord,
    TrainingConfig,
    TrainingHistory,
    epoch_batches,
)

EVAL_BATCH = 64
LABEL_SOURCES = ("pseudo", "human", "truth")

Sample = Tuple[WoundImage, int]


@dataclass
class LabelTable:
    """(wound_id, day) -> 阶段；source 标明来源"""

    stages: Dict[Key, int]
    source: str = "pseudo"

    def __post_init__(self):
        if self.source not in LABEL_SOURCES:
            raise LabelError(f"未知标签来源: {self.source}")
        for key, stage in self.stages.items():
            if stage not in range(N_STAGES):
                raise LabelError(f"伤口 {key[0]} 第 {key[1]} 天的阶段无效: {stage}")

    @classmethod
    def from_rows(
        cls, rows: Iterable[Tuple[str, int, int]], source: str = "pseudo"
    ) -> "LabelTable":
        """
        Raises:
            LabelError: 同一 (wound_id, day) 出现多次
        """
        stages: Dict[Key, int] = {}
        for wound_id, day, stage in rows:
            key = (wound_id, int(day))
            if key in stages:
                raise LabelError(f"标签表中伤口 {wound_id} 第 {day} 天重复")
            stages[key] = int(stage)
        return cls(stages, source)

    def __len__(self) -> int:
        return len(self.stages)

    def keys(self) -> List[Key]:
        return list(self.stages)

    def rows(self) -> List[Tuple[str, int, int]]:
        return [(w, d, s) for (w, d), s in self.stages.items()]


class StageClassifier(Module):
    """编码器 + 四阶段分类头"""

    def __init__(self, encoder: EncoderModel, head: StageHead):
        super().__init__()
        self.encoder = self.add_module("encoder", encoder)
        self.head = self.add_module("head", head)

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.head.forward(self.encoder(x, rng), rng)

    def embed(self, x: Tensor) -> Tensor:
        return self.encoder(x)


def build_stage_classifier(
    encoder_state: Optional[Mapping[str, np.ndarray]] = None,
    encoder_config: Optional[Dict] = None,
    seed: int = 0,
    dropout: float = 0.3,
) -> StageClassifier:
    """
    构建分类器；给定 encoder_state 时编码器参数逐位取自该状态，否则按种子初始化
    """
    encoder = build_encoder(encoder_config, seed)
    if encoder_state is not None:
        encoder.load_state_dict(dict(encoder_state))
    head = StageHead(np.random.default_rng([seed, 4]), dropout)
    return StageClassifier(encoder, head)


def labelled_samples(
    series_list: Sequence[WoundSeries], labels: LabelTable, wound_ids: Iterable[str]
) -> List[Sample]:
    """
    取出给定伤口的全部图像及其标签

    Raises:
        LabelError: 某图像在标签表中缺失，错误信息指出 (wound_id, day)
    """
    wanted = set(wound_ids)
    samples: List[Sample] = []
    for series in series_list:
        if series.wound_id not in wanted:
            continue
        for image in series.images:
            if image.key not in labels.stages:
                raise LabelError(f"标签表缺少伤口 {image.wound_id} 第 {image.day} 天")
            samples.append((image, labels.stages[image.key]))
    return samples


def image_batch(
    samples: Sequence[Sample], indices: Sequence[int], seeds: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    images = []
    for i in indices:
        pixels = samples[i][0].pixels
        images.append(augment(pixels, int(seeds[i])) if seeds is not None else pixels)
    return np.stack(images), np.array([samples[i][1] for i in indices], dtype=np.int64)


def _predict_probs(model: StageClassifier, pixels: Sequence[np.ndarray]) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(pixels), EVAL_BATCH):
            batch = np.stack(pixels[start : start + EVAL_BATCH])
            out.append(model(images_to_tensor(batch)).data)
    return np.concatenate(out) if out else np.zeros((0, N_STAGES))


@dataclass
class StageEvaluation:
    count: int
    accuracy: float
    loss: float
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((N_STAGES, N_STAGES), int))


def eval_stage(model: StageClassifier, samples: Sequence[Sample]) -> StageEvaluation:
    """
    评估模式、无增强的 top-1 准确率和 4x4 混淆矩阵（行为真实阶段，列为预测阶段）

    Raises:
        DatasetError: 样本为空
    """
    if not samples:
        raise DatasetError("评估样本为空")
    probs = _predict_probs(model, [image.pixels for image, _ in samples])
    truth = np.array([stage for _, stage in samples], dtype=np.int64)
    predicted = np.argmax(probs, axis=1)
    confusion = np.zeros((N_STAGES, N_STAGES), dtype=np.int64)
    np.add.at(confusion, (truth, predicted), 1)
    with no_grad():
        loss = cce_loss(Tensor(probs), truth).item()
    return StageEvaluation(len(samples), float(np.trace(confusion) / truth.size), loss, confusion)


def _train_stage_classifier(
    model: StageClassifier,
    train: Sequence[Sample],
    val: Sequence[Sample],
    config: TrainingConfig,
    steps_per_epoch: int,
    task: str,
    logger: Logger,
) -> TrainingHistory:
    config.validate()
    if not train:
        raise DatasetError(f"{task}: 训练样本为空")
    params = model.parameters()
    if config.freeze_encoder:
        params = {n: p for n, p in params.items() if n.startswith("head.")}
    optimizer = Adam(params, lr=config.learning_rate)
    order_rng = np.random.default_rng([config.seed, 5])
    dropout_rng = np.random.default_rng([config.seed, 6])
    history = TrainingHistory()
    best = BestWeights()

    for epoch in range(1, config.epochs + 1):
        batches, seeds = epoch_batches(order_rng, len(train), config.batch_size, steps_per_epoch)
        aug_seeds = seeds if config.augment else None

        def make_batch(index: int):
            return image_batch(train, batches[index], aug_seeds)

        model.train()
        total_loss = 0.0
        correct = 0
        seen = 0
        prefetcher = BatchPrefetcher(make_batch, len(batches), config.workers)
        for batch_index, (images, labels) in enumerate(prefetcher, 1):
            model.zero_grad()
            try:
                probs = model(images_to_tensor(images), dropout_rng)
                loss = cce_loss(probs, labels)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("损失非有限")
                backward(loss)
                optimizer.step()
            except NonFiniteError as e:
                raise NonFiniteError(f"{task} 第 {epoch} 轮第 {batch_index} 批: {e.message}")
            total_loss += loss.item() * labels.size
            correct += int(np.sum(np.argmax(probs.data, axis=1) == labels))
            seen += labels.size
            logger.progress(batch_index, len(batches), f"{task} 第 {epoch} 轮")

        train_loss = total_loss / seen
        train_acc = correct / seen
        if val:
            evaluation = eval_stage(model, val)
            val_loss, val_acc = evaluation.loss, evaluation.accuracy
        else:
            val_loss, val_acc = float("nan"), float("nan")
        history.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc))
        logger.epoch(task, epoch, config.epochs, train_loss, train_acc, val_loss, val_acc)
        best.offer(epoch, val_acc if val else train_acc, model.state_dict)

    model.load_state_dict(best.state)
    model.eval()
    history.best_epoch = best.epoch
    logger.info(f"🏁 [{task}] 保留第 {best.epoch} 轮权重")
    return history


def _fit(
    model: StageClassifier,
    labels: LabelTable,
    split: SplitSpec,
    series_list: Sequence[WoundSeries],
    config: TrainingConfig,
    task: str,
    logger: Optional[Logger],
) -> Tuple[StageClassifier, TrainingHistory]:
    log = logger or default_logger
    for part in SPLIT_PARTS:
        labelled_samples(series_list, labels, split.wounds(part))
    train = labelled_samples(series_list, labels, split.train)
    val = labelled_samples(series_list, labels, split.val)
    steps = config.steps_per_epoch or len(split.train)
    history = _train_stage_classifier(model, train, val, config, steps, task, log)
    return model, history


def finetune(
    pretext_checkpoint: Union[str, Path, Mapping[str, np.ndarray]],
    labels: LabelTable,
    split: SplitSpec,
    series_list: Sequence[WoundSeries],
    config: TrainingConfig,
    encoder_config: Optional[Dict] = None,
    logger: Optional[Logger] = None,
) -> Tuple[StageClassifier, TrainingHistory]:
    """
    用预训练编码器初始化分类器并在单张增强图像上微调

    每轮步数默认等于训练伤口数；保留验证准确率最高一轮的权重。

    Args:
        pretext_checkpoint: 预训练检查点路径或参数字典
        labels: 阶段标签表（通常为伪标签）
        split: 伤口划分
        series_list: 伤口序列
        config: 训练超参数
        encoder_config: 编码器配置
        logger: 日志记录器

    Returns:
        (分类器, 训练历史)

    Raises:
        LabelError: 划分中的图像缺少标签
    """
    state = pretext_checkpoint
    if not isinstance(state, Mapping):
        state = load_checkpoint(state)
    model = build_stage_classifier(
        select_prefix(state, "encoder."), encoder_config, config.seed, config.dropout
    )
    return _fit(model, labels, split, series_list, config, "finetune", logger)


def train_baseline(
    labels: LabelTable,
    split: SplitSpec,
    series_list: Sequence[WoundSeries],
    config: TrainingConfig,
    encoder_config: Optional[Dict] = None,
    logger: Optional[Logger] = None,
) -> Tuple[StageClassifier, TrainingHistory]:
    """结构与 finetune 相同，但编码器按种子从头初始化"""
    model = build_stage_classifier(None, encoder_config, config.seed, config.dropout)
    return _fit(model, labels, split, series_list, config, "baseline", logger)


@dataclass
class AgreementReport:
    matches: Dict[str, int]
    counts: Dict[str, int]

    def fraction(self, part: str) -> float:
        if part == "overall":
            total = sum(self.counts.values())
            return sum(self.matches.values()) / total if total else float("nan")
        count = self.counts.get(part, 0)
        return self.matches[part] / count if count else float("nan")

    def rows(self) -> List[Tuple[str, int, int, float]]:
        parts = [p for p in SPLIT_PARTS if p in self.counts]
        rows = [(p, self.matches[p], self.counts[p], self.fraction(p)) for p in parts]
        total = sum(self.counts.values())
        rows.append(("overall", sum(self.matches.values()), total, self.fraction("overall")))
        return rows


def agreement(labels_a: LabelTable, labels_b: LabelTable, split: SplitSpec) -> AgreementReport:
    """
    两张标签表在各划分和整体上的 top-1 一致率

    Raises:
        LabelError: 两表键集合不同，错误信息列出对称差
    """
    keys_a, keys_b = set(labels_a.stages), set(labels_b.stages)
    if keys_a != keys_b:
        diff = sorted(keys_a ^ keys_b)
        raise LabelError(f"两张标签表的键集合不同: {diff}")
    matches = {p: 0 for p in SPLIT_PARTS}
    counts = {p: 0 for p in SPLIT_PARTS}
    for key in sorted(keys_a):
        part = split.part_of(key[0])
        counts[part] += 1
        matches[part] += int(labels_a.stages[key] == labels_b.stages[key])
    return AgreementReport(matches, counts)


def predict_stages(
    model: StageClassifier, series_list: Sequence[WoundSeries]
) -> List[Tuple[Key, int, np.ndarray]]:
    """对任意图像预测阶段，返回 (key, stage, probs)"""
    images = [image for series in series_list for image in series.images]
    probs = _predict_probs(model, [image.pixels for image in images])
    return [(image.key, int(np.argmax(p)), p) for image, p in zip(images, probs)]


class DownstreamResult:
    """下游训练与评估结果类"""

    def __init__(self):
        self.model: Optional[StageClassifier] = None
        self.history: Optional[TrainingHistory] = None
        self.evaluations: Dict[str, StageEvaluation] = {}
        self.success = False
        self.error: Optional[str] = None

    def set_success(self, model: StageClassifier, history: Optional[TrainingHistory]) -> None:
        """设置成功结果"""
        self.model = model
        self.history = history
        self.success = True

    def set_error(self, error: str) -> None:
        """设置错误结果"""
        self.error = error
        self.success = False


class DownstreamService:
    """下游阶段分类服务类"""

    LABEL_COLUMNS = ("wound_id", "day", "stage")
    METRIC_COLUMNS = ("split", "count", "accuracy", "loss")
    CONFUSION_COLUMNS = ("split", "true_stage") + tuple(f"pred{i}" for i in range(N_STAGES))
    AGREEMENT_COLUMNS = ("split", "matches", "count", "agreement")
    PREDICTION_COLUMNS = ("wound_id", "day", "stage") + tuple(f"p{i}" for i in range(N_STAGES))

    def __init__(
        self, config_manager: ConfigManager, logger: Logger, file_utils: FileUtils
    ):
        """
        初始化下游服务

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
            self.config_manager.get_downstream_config(), self.config_manager.get_seed()
        )

    def finetune(
        self,
        pretext_checkpoint: Union[str, Path],
        labels: LabelTable,
        split: SplitSpec,
        series_list: Sequence[WoundSeries],
    ) -> DownstreamResult:
        result = DownstreamResult()
        model, history = finetune(
            pretext_checkpoint,
            labels,
            split,
            series_list,
            self.training_config(),
            self.config_manager.get_encoder_config(),
            self.logger,
        )
        result.set_success(model, history)
        self.logger.info(f"🧩 分类器参数量 {model.parameter_count()}")
        return result

    def baseline(
        self, labels: LabelTable, split: SplitSpec, series_list: Sequence[WoundSeries]
    ) -> DownstreamResult:
        result = DownstreamResult()
        model, history = train_baseline(
            labels,
            split,
            series_list,
            self.training_config(),
            self.config_manager.get_encoder_config(),
            self.logger,
        )
        result.set_success(model, history)
        return result

    def evaluate(
        self,
        model: StageClassifier,
        labels: LabelTable,
        split: SplitSpec,
        series_list: Sequence[WoundSeries],
    ) -> Dict[str, StageEvaluation]:
        """在每个非空划分上评估"""
        evaluations: Dict[str, StageEvaluation] = {}
        for part in SPLIT_PARTS:
            samples = labelled_samples(series_list, labels, split.wounds(part))
            if not samples:
                continue
            evaluations[part] = eval_stage(model, samples)
            self.logger.info(
                f"🎯 {part} 阶段准确率 {evaluations[part].accuracy:.4f} "
                f"({evaluations[part].count} 张)"
            )
        return evaluations

    def save_model(self, path: Union[str, Path], model: StageClassifier) -> int:
        return save_checkpoint(path, model.state_dict())

    def load_model(self, path: Union[str, Path]) -> StageClassifier:
        model = build_stage_classifier(
            None,
            self.config_manager.get_encoder_config(),
            0,
            self.config_manager.get_downstream_config()["dropout"],
        )
        model.load_state_dict(load_checkpoint(path))
        model.eval()
        return model

    def read_labels(self, path: Union[str, Path], source: str) -> LabelTable:
        """读取含 wound_id / day / stage 列的标签表，其余列忽略"""
        records = self.file_utils.read_table_records(path)
        try:
            rows = [(r["wound_id"], int(r["day"]), int(r["stage"])) for r in records]
        except KeyError as e:
            raise LabelError(f"标签表 {path} 缺少列 {e}")
        except ValueError as e:
            raise LabelError(f"标签表 {path} 取值错误: {e}")
        return LabelTable.from_rows(rows, source)

    def write_labels(self, path: Union[str, Path], labels: LabelTable) -> None:
        self.file_utils.write_table(path, self.LABEL_COLUMNS, labels.rows())

    def write_history(self, path: Union[str, Path], history: TrainingHistory) -> None:
        self.file_utils.write_table(
            path, HISTORY_COLUMNS, history.rows(), comments=[f"best_epoch {history.best_epoch}"]
        )

    def write_metrics(
        self, directory: Union[str, Path], evaluations: Mapping[str, StageEvaluation], prefix: str
    ) -> None:
        """写出 <prefix>metrics.txt 和 <prefix>confusion.txt"""
        directory = Path(directory)
        metric_rows = [(p, e.count, e.accuracy, e.loss) for p, e in evaluations.items()]
        confusion_rows = [
            (p, true_stage, *e.confusion[true_stage])
            for p, e in evaluations.items()
            for true_stage in range(N_STAGES)
        ]
        self.file_utils.write_table(
            directory / f"{prefix}metrics.txt", self.METRIC_COLUMNS, metric_rows
        )
        self.file_utils.write_table(
            directory / f"{prefix}confusion.txt", self.CONFUSION_COLUMNS, confusion_rows
        )

    def write_agreement(self, path: Union[str, Path], report: AgreementReport) -> None:
        self.file_utils.write_table(path, self.AGREEMENT_COLUMNS, report.rows())

    def write_predictions(
        self, path: Union[str, Path], predictions: Sequence[Tuple[Key, int, np.ndarray]]
    ) -> None:
        rows = [(key[0], key[1], stage, *probs) for key, stage, probs in predictions]
        self.file_utils.write_table(path, self.PREDICTION_COLUMNS, rows)
