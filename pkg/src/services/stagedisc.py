"""
愈合阶段发现服务
对嵌入做 k-means 聚类，统计各簇的伤口天数分布，按中位天数把簇映射为四个愈合阶段并导出伪标签
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.config import ConfigManager
from ..utils.errors import ClusterError, NonFiniteError
from ..utils.file_utils import FileUtils
from ..utils.logger import Logger
from ..utils.logger import logger as default_logger
from .dataset import Key, SplitSpec
from .pretext import EmbeddingSet

POOLED = "all"


class StageLabel(IntEnum):
    """四个愈合阶段，按时间先后排序"""

    HEMOSTASIS = 0
    INFLAMMATION = 1
    PROLIFERATION = 2
    MATURATION = 3


@dataclass
class ClusterModel:
    """k-means 结果：质心、拟合点的簇分配和惯性"""

    k: int
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    seed: int = 0
    n_iter: int = 0
    inertia_history: List[float] = field(default_factory=list)

    def predict(self, points: np.ndarray) -> np.ndarray:
        """最近质心，距离相等时取编号最小者"""
        return assign(points, self.centroids)[0]


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.sum(diff * diff, axis=2)


def assign(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    把每个点分配到最近质心

    Returns:
        (簇编号, 惯性)
    """
    d2 = _squared_distances(points, centroids)
    labels = np.argmin(d2, axis=1)
    inertia = float(np.sum(d2[np.arange(points.shape[0]), labels]))
    return labels, inertia


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _squared_distances(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            index = int(rng.choice(n, p=closest / total))
        else:
            index = int(rng.integers(n))
        chosen.append(index)
        closest = np.minimum(closest, _squared_distances(points, points[[index]])[:, 0])
    return points[chosen].copy()


def lloyd(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> ClusterModel:
    """
    单次 k-means：k-means++ 初始化后做 Lloyd 迭代

    质心最大位移小于 tol 或达到 max_iter 时停止；空簇的质心重置到离自身质心
    最远的点上。
    """
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(points, k, rng)
    labels, inertia = assign(points, centroids)
    history = [inertia]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        updated = centroids.copy()
        far = np.sum((points - centroids[labels]) ** 2, axis=1)
        for j in range(k):
            members = points[labels == j]
            if members.shape[0]:
                updated[j] = members.mean(axis=0)
            else:
                index = int(np.argmax(far))
                updated[j] = points[index]
                far[index] = -1.0
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        labels, inertia = assign(points, centroids)
        history.append(inertia)
        if shift < tol:
            break
    return ClusterModel(k, centroids, labels, inertia, seed, n_iter, history)


def kmeans(
    embeddings: Union[EmbeddingSet, np.ndarray],
    k: int = 4,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    n_init: int = 10,
    workers: int = 1,
) -> ClusterModel:
    """
    多次重启的 k-means

    第 i 次重启使用种子 seed + i；保留惯性最小的结果，并列时取种子最小者。
    结果只取决于输入和种子，与 workers 无关。

    Args:
        embeddings: 嵌入集或 (n, d) 数组
        k: 簇数
        seed: 基础种子
        max_iter: 最大迭代次数
        tol: 质心位移阈值
        n_init: 重启次数
        workers: 并行线程数

    Returns:
        聚类模型

    Raises:
        ClusterError: 点数少于 k
        NonFiniteError: 输入含非有限值
    """
    points = embeddings.matrix if isinstance(embeddings, EmbeddingSet) else embeddings
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ClusterError(f"kmeans 需要二维输入，实际形状 {points.shape}")
    if k < 1 or points.shape[0] < k:
        raise ClusterError(f"kmeans: 点数 {points.shape[0]} 少于簇数 {k}")
    if not np.all(np.isfinite(points)):
        raise NonFiniteError("kmeans: 输入包含非有限值")

    seeds = [seed + i for i in range(max(1, n_init))]
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            runs = list(executor.map(lambda s: lloyd(points, k, s, max_iter, tol), seeds))
    else:
        runs = [lloyd(points, k, s, max_iter, tol) for s in seeds]
    return min(runs, key=lambda run: (run.inertia, run.seed))


@dataclass
class PcaResult:
    projected: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def pca_2d(embeddings: Union[EmbeddingSet, np.ndarray]) -> PcaResult:
    """
    二维主成分投影

    对中心化数据做奇异值分解；主成分单位长度且正交，每个主成分绝对值最大的
    分量取正号。explained 为前两个主成分占总方差的比例，降序。

    Raises:
        ClusterError: 少于 2 个点
    """
    points = embeddings.matrix if isinstance(embeddings, EmbeddingSet) else embeddings
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2 or points.shape[1] < 2:
        raise ClusterError(f"pca_2d 至少需要 2 个二维以上的点，实际形状 {points.shape}")
    mean = points.mean(axis=0)
    centered = points - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    variance = singular**2
    total = variance.sum()
    fractions = variance / total if total > 0 else np.zeros_like(variance)
    components = vt[:2].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    explained = np.zeros(2)
    explained[: min(2, fractions.size)] = fractions[:2]
    return PcaResult(centered @ components.T, explained, components, mean)


@dataclass(frozen=True)
class StatRow:
    count: int
    q1: float
    median: float
    q3: float
    mean: float


@dataclass
class ClusterStats:
    """(cohort, cluster) -> 伤口天数统计；cohort 为 "all" 时为合并统计"""

    k: int
    cells: Dict[Tuple[str, int], StatRow] = field(default_factory=dict)

    def pooled(self, cluster: int) -> Optional[StatRow]:
        return self.cells.get((POOLED, cluster))

    def rows(self) -> List[Tuple[str, int, int, float, float, float, float]]:
        return [
            (cohort, cluster, s.count, s.q1, s.median, s.q3, s.mean)
            for (cohort, cluster), s in self.cells.items()
        ]


def day_stats(days: Sequence[float]) -> StatRow:
    """线性插值四分位数（位置 p*(n-1)）和均值"""
    values = np.asarray(days, dtype=np.float64)
    q1, median, q3 = np.quantile(values, [0.25, 0.5, 0.75])
    return StatRow(int(values.size), float(q1), float(median), float(q3), float(values.mean()))


def cluster_stats(
    model: ClusterModel,
    embeddings: EmbeddingSet,
    rows: Optional[np.ndarray] = None,
    logger: Optional[Logger] = None,
) -> ClusterStats:
    """
    按年龄组和簇统计伤口天数

    Args:
        model: 聚类模型
        embeddings: 嵌入集（含年龄组信息）
        rows: 参与统计的记录下标，默认全部
        logger: 日志记录器

    Returns:
        各年龄组及合并后的统计；空单元格省略并给出提示
    """
    log = logger or default_logger
    indices = np.arange(len(embeddings)) if rows is None else np.asarray(rows)
    labels = (
        model.predict(embeddings.matrix[indices]) if indices.size else np.zeros(0, dtype=np.int64)
    )
    days = embeddings.days[indices]
    cohorts = [embeddings.cohort_of(int(i)) for i in indices]

    stats = ClusterStats(model.k)
    for cohort in sorted(set(cohorts)) + [POOLED]:
        in_cohort = np.array([cohort in (POOLED, c) for c in cohorts], dtype=bool)
        for cluster in range(model.k):
            mask = in_cohort & (labels == cluster)
            if not np.any(mask):
                log.warning(f"⚠️ 年龄组 {cohort} 的簇 {cluster} 没有图像，省略统计")
                continue
            stats.cells[(cohort, cluster)] = day_stats(days[mask])
    return stats


def fill_unseen_clusters(
    stats: ClusterStats,
    model: ClusterModel,
    embeddings: EmbeddingSet,
    logger: Optional[Logger] = None,
) -> ClusterStats:
    """
    训练伤口没有落入的簇，用全部图像的统计补齐

    只补缺失的簇（合并统计及各年龄组统计），已有单元格保持不变；
    全部图像里也为空的簇仍然缺失，由阶段映射报错。
    """
    missing = [c for c in range(model.k) if stats.pooled(c) is None]
    if not missing:
        return stats
    log = logger or default_logger
    fallback = cluster_stats(model, embeddings, None, log)
    filled = ClusterStats(stats.k, dict(stats.cells))
    for cluster in missing:
        if fallback.pooled(cluster) is None:
            continue
        log.warning(f"⚠️ 簇 {cluster} 不含训练伤口，改用全部图像的天数统计")
        for (cohort, c), row in fallback.cells.items():
            if c == cluster:
                filled.cells[(cohort, c)] = row
    return filled


def map_clusters_to_stages(
    model: Union[ClusterModel, int], stats: ClusterStats
) -> Dict[int, StageLabel]:
    """
    按合并中位天数升序把簇依次映射为四个阶段；中位数相同时比较均值，再比较簇编号

    Raises:
        ClusterError: k 不为 4，或某簇没有合并统计
    """
    k = model.k if isinstance(model, ClusterModel) else int(model)
    if k != len(StageLabel):
        raise ClusterError(f"阶段映射要求 k={len(StageLabel)}，实际 k={k}")
    keys = []
    for cluster in range(k):
        pooled = stats.pooled(cluster)
        if pooled is None:
            raise ClusterError(f"簇 {cluster} 没有用于映射的图像")
        keys.append((pooled.median, pooled.mean, cluster))
    return {cluster: StageLabel(rank) for rank, (_, _, cluster) in enumerate(sorted(keys))}


@dataclass(frozen=True)
class PseudoLabel:
    wound_id: str
    day: int
    cluster: int
    stage: int


def export_pseudo_labels(
    mapping: Mapping[int, StageLabel], model: ClusterModel, embeddings: EmbeddingSet
) -> List[PseudoLabel]:
    """
    每张图像一行 (wound_id, day, cluster, stage)，顺序与嵌入集一致

    Raises:
        ClusterError: 某图像所在簇没有阶段映射
    """
    labels = model.predict(embeddings.matrix)
    out = []
    for (wound_id, day), cluster in zip(embeddings.keys, labels):
        cluster = int(cluster)
        if cluster not in mapping:
            raise ClusterError(f"簇 {cluster} 没有阶段映射")
        out.append(PseudoLabel(wound_id, day, cluster, int(mapping[cluster])))
    return out


def cluster_purity(assignments: Sequence[int], truth: Sequence[int]) -> float:
    """每个簇取多数真实类别，命中该类别的点所占比例"""
    assignments = np.asarray(assignments)
    truth = np.asarray(truth)
    if assignments.shape != truth.shape or assignments.size == 0:
        raise ClusterError("cluster_purity 需要等长且非空的输入")
    hits = 0
    for cluster in np.unique(assignments):
        _, counts = np.unique(truth[assignments == cluster], return_counts=True)
        hits += int(counts.max())
    return hits / assignments.size


class StageDiscoveryResult:
    """阶段发现结果类"""

    def __init__(self):
        self.model: Optional[ClusterModel] = None
        self.stats: Optional[ClusterStats] = None
        self.projection: Optional[PcaResult] = None
        self.labels: np.ndarray = np.zeros(0, dtype=np.int64)
        self.success = False
        self.error: Optional[str] = None

    def set_success(self, model: ClusterModel, stats: ClusterStats, labels: np.ndarray) -> None:
        """设置成功结果"""
        self.model = model
        self.stats = stats
        self.labels = labels
        self.success = True

    def set_error(self, error: str) -> None:
        """设置错误结果"""
        self.error = error
        self.success = False


class StageDiscoveryService:
    """阶段发现服务类"""

    STATS_COLUMNS = ("cohort", "cluster", "count", "q1", "median", "q3", "mean")
    PROJECTION_COLUMNS = ("wound_id", "day", "x", "y", "cluster")
    PSEUDO_COLUMNS = ("wound_id", "day", "cluster", "stage")
    MAPPING_COLUMNS = ("cluster", "stage", "name")

    def __init__(
        self, config_manager: ConfigManager, logger: Logger, file_utils: FileUtils
    ):
        """
        初始化阶段发现服务

        Args:
            config_manager: 配置管理器
            logger: 日志记录器
            file_utils: 文件工具
        """
        self.config_manager = config_manager
        self.logger = logger
        self.file_utils = file_utils

    def discover(self, embeddings: EmbeddingSet, split: SplitSpec) -> StageDiscoveryResult:
        """
        聚类并统计

        fit_on="all" 用全部嵌入拟合质心，"train" 只用训练伤口；两种情况下统计
        都只取训练伤口，其余图像分配到最近质心。不含训练伤口的簇改用全部图像统计。
        """
        config = self.config_manager.get_cluster_config()
        result = StageDiscoveryResult()
        train_rows = embeddings.rows_for(split.train)
        fit_rows = train_rows if config["fit_on"] == "train" else np.arange(len(embeddings))
        model = kmeans(
            embeddings.matrix[fit_rows],
            k=config["k"],
            seed=self.config_manager.get_seed(),
            max_iter=config["max_iter"],
            tol=config["tol"],
            n_init=config["n_init"],
            workers=config["workers"],
        )
        self.logger.info(
            f"🔵 k-means 完成: k={model.k} 惯性={model.inertia:.6f} "
            f"种子={model.seed} 迭代={model.n_iter}"
        )
        train_stats = cluster_stats(model, embeddings, train_rows, self.logger)
        stats = fill_unseen_clusters(train_stats, model, embeddings, self.logger)
        result.set_success(model, stats, model.predict(embeddings.matrix))
        result.projection = pca_2d(embeddings)
        self.logger.info(
            f"📉 PCA 方差占比: {result.projection.explained[0]:.3f}, "
            f"{result.projection.explained[1]:.3f}"
        )
        return result

    def pseudo_label(
        self, centroids: np.ndarray, embeddings: EmbeddingSet, split: SplitSpec
    ) -> Tuple[Dict[int, StageLabel], List[PseudoLabel]]:
        """用已保存的质心重建统计、阶段映射和伪标签"""
        labels, inertia = assign(embeddings.matrix, centroids)
        model = ClusterModel(centroids.shape[0], centroids, labels, inertia)
        train_rows = embeddings.rows_for(split.train)
        train_stats = cluster_stats(model, embeddings, train_rows, self.logger)
        stats = fill_unseen_clusters(train_stats, model, embeddings, self.logger)
        mapping = map_clusters_to_stages(model, stats)
        for cluster, stage in sorted(mapping.items()):
            pooled = stats.pooled(cluster)
            self.logger.info(
                f"🏷️ 簇 {cluster} -> {stage.name.lower()} (中位天数 {pooled.median})"
            )
        return mapping, export_pseudo_labels(mapping, model, embeddings)

    def write_centroids(self, path: Union[str, Path], model: ClusterModel) -> None:
        dims = model.centroids.shape[1]
        columns = ("cluster",) + tuple(f"c{i}" for i in range(dims))
        rows = [(j, *model.centroids[j]) for j in range(model.k)]
        comments = [f"inertia {model.inertia!r}", f"seed {model.seed}", f"n_iter {model.n_iter}"]
        self.file_utils.write_table(path, columns, rows, comments)

    def read_centroids(self, path: Union[str, Path]) -> np.ndarray:
        _, rows = self.file_utils.read_table(path)
        if not rows:
            raise ClusterError(f"质心文件为空: {path}")
        ordered = sorted(rows, key=lambda row: int(row[0]))
        return np.array([[float(v) for v in row[1:]] for row in ordered], dtype=np.float64)

    def write_stats(self, path: Union[str, Path], stats: ClusterStats) -> None:
        self.file_utils.write_table(path, self.STATS_COLUMNS, stats.rows())

    def write_projection(
        self, path: Union[str, Path], result: StageDiscoveryResult, keys: Sequence[Key]
    ) -> None:
        projection = result.projection
        rows = [
            (wound_id, day, x, y, result.labels[i])
            for i, ((wound_id, day), (x, y)) in enumerate(zip(keys, projection.projected))
        ]
        comments = [
            f"explained {projection.explained[0]!r} {projection.explained[1]!r}",
        ]
        self.file_utils.write_table(path, self.PROJECTION_COLUMNS, rows, comments)

    def write_pseudo_labels(self, path: Union[str, Path], labels: Sequence[PseudoLabel]) -> None:
        rows = [(p.wound_id, p.day, p.cluster, p.stage) for p in labels]
        self.file_utils.write_table(path, self.PSEUDO_COLUMNS, rows)

    def write_mapping(self, path: Union[str, Path], mapping: Mapping[int, StageLabel]) -> None:
        rows = [(c, int(s), s.name.lower()) for c, s in sorted(mapping.items())]
        self.file_utils.write_table(path, self.MAPPING_COLUMNS, rows)
