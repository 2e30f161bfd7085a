"""
数据集服务
读取伤口图像序列清单，圆形裁剪与数据增强，生成时间顺序图像对，按伤口划分数据集
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..utils.config import ConfigManager
from ..utils.errors import DatasetError, SplitError
from ..utils.file_utils import FileUtils
from ..utils.logger import Logger
from ..utils.logger import logger as default_logger

COHORTS = ("young", "aged")
MANIFEST_NAME = "manifest.json"
SPLIT_PARTS = ("train", "val", "test")

Key = Tuple[str, int]


@dataclass(eq=False)
class WoundImage:
    """单张伤口图像，pixels 为 (H, W, 3)，取值 [0, 1]"""

    wound_id: str
    cohort: str
    day: int
    pixels: np.ndarray

    @property
    def key(self) -> Key:
        return (self.wound_id, self.day)


@dataclass(eq=False)
class WoundSeries:
    """一个伤口按天排列的图像序列，天数从 0 连续"""

    wound_id: str
    cohort: str
    images: List[WoundImage] = field(default_factory=list)

    @property
    def days(self) -> List[int]:
        return [image.day for image in self.images]

    def validate(self) -> None:
        """
        Raises:
            DatasetError: 天数不连续、重复或图像元数据不一致
        """
        for expected, image in enumerate(self.images):
            if image.day != expected:
                missing = expected if image.day > expected else image.day
                raise DatasetError(f"伤口 {self.wound_id} 缺少第 {missing} 天的图像")
            if image.wound_id != self.wound_id or image.cohort != self.cohort:
                raise DatasetError(
                    f"伤口 {self.wound_id} 第 {image.day} 天的元数据与序列不一致"
                )
            if image.pixels.min() < 0 or image.pixels.max() > 1:
                raise DatasetError(
                    f"伤口 {self.wound_id} 第 {image.day} 天的像素超出 [0, 1]"
                )


@dataclass(eq=False)
class ImagePair:
    """同一伤口两天的有序图像对；label=1 表示 day_a < day_b（正向）"""

    image_a: WoundImage
    image_b: WoundImage
    label: int

    @property
    def wound_id(self) -> str:
        return self.image_a.wound_id


@dataclass(frozen=True)
class SplitSpec:
    """按伤口划分的 train / val / test 集合"""

    train: Tuple[str, ...]
    val: Tuple[str, ...]
    test: Tuple[str, ...]

    def part_of(self, wound_id: str) -> str:
        for part in SPLIT_PARTS:
            if wound_id in getattr(self, part):
                return part
        raise SplitError(f"伤口 {wound_id} 不在任何划分中")

    def wounds(self, part: str) -> Tuple[str, ...]:
        if part not in SPLIT_PARTS:
            raise SplitError(f"未知划分: {part}")
        return getattr(self, part)

    def filter_series(self, series_list: Sequence[WoundSeries], part: str) -> List[WoundSeries]:
        wanted = set(self.wounds(part))
        return [s for s in series_list if s.wound_id in wanted]

    def filter_pairs(self, pairs: Sequence[ImagePair], part: str) -> List[ImagePair]:
        wanted = set(self.wounds(part))
        return [p for p in pairs if p.wound_id in wanted]

    def validate(self, wound_ids: Iterable[str]) -> None:
        """
        Raises:
            SplitError: 划分之间有交集，或与数据集伤口集合不一致
        """
        parts = [set(self.train), set(self.val), set(self.test)]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise SplitError("划分之间存在重复伤口")
        covered = parts[0] | parts[1] | parts[2]
        expected = set(wound_ids)
        if covered != expected:
            diff = sorted(covered ^ expected)
            raise SplitError(f"划分与数据集伤口不一致: {diff}")


def _open_image(path: Path, image_size: int) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB")
    width, height = rgb.size
    side = min(width, height)
    if width != height:
        left = (width - side) // 2
        top = (height - side) // 2
        rgb = rgb.crop((left, top, left + side, top + side))
    if side != image_size:
        rgb = rgb.resize((image_size, image_size), Image.BILINEAR)
    return np.asarray(rgb, dtype=np.float64) / 255.0


def _validate_record(record: Any, index: int) -> Tuple[str, str, int, str]:
    if not isinstance(record, dict):
        raise DatasetError(f"manifest 第 {index} 条记录必须是对象")
    wound_id = record.get("wound_id")
    cohort = record.get("cohort")
    day = record.get("day")
    file = record.get("file")
    if not isinstance(wound_id, str) or not wound_id or any(c.isspace() for c in wound_id):
        raise DatasetError(f"manifest 第 {index} 条记录的 wound_id 无效: {wound_id!r}")
    if cohort not in COHORTS:
        raise DatasetError(f"伤口 {wound_id} 第 {day} 天的 cohort 无效: {cohort!r}")
    if not isinstance(day, int) or isinstance(day, bool) or day < 0:
        raise DatasetError(f"伤口 {wound_id} 的 day 无效: {day!r}")
    if not isinstance(file, str) or not file:
        raise DatasetError(f"伤口 {wound_id} 第 {day} 天缺少 file 字段")
    return wound_id, cohort, day, file


def load_dataset(
    root_path: Union[str, Path],
    image_size: int = 64,
    workers: int = 1,
    logger: Optional[Logger] = None,
) -> List[WoundSeries]:
    """
    按 manifest.json 读取全部伤口序列

    Args:
        root_path: 数据集根目录
        image_size: 统一缩放后的边长（非正方形先居中裁成正方形）
        workers: 并行读取线程数
        logger: 日志记录器

    Returns:
        按 wound_id 排序的序列列表；空目录返回空列表

    Raises:
        DatasetError: 缺天、图像无法读取、清单与文件不一致，错误信息指出伤口和天数
    """
    log = logger or default_logger
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"数据集目录不存在: {root}")
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        if any(root.iterdir()):
            raise DatasetError(f"数据集目录缺少 {MANIFEST_NAME}: {root}")
        log.warning(f"⚠️ 数据集目录为空: {root}")
        return []

    try:
        records = FileUtils.read_json_file(manifest_path)
    except ValueError as e:
        raise DatasetError(str(e))
    if not isinstance(records, list):
        raise DatasetError(f"{MANIFEST_NAME} 的根节点必须是数组")

    entries: Dict[Key, Tuple[str, Path]] = {}
    cohorts: Dict[str, str] = {}
    for index, record in enumerate(records):
        wound_id, cohort, day, file = _validate_record(record, index)
        if (wound_id, day) in entries:
            raise DatasetError(f"伤口 {wound_id} 第 {day} 天在清单中重复")
        if cohorts.setdefault(wound_id, cohort) != cohort:
            raise DatasetError(f"伤口 {wound_id} 第 {day} 天的 cohort 与其他天不一致")
        path = root / file
        if not path.is_file():
            raise DatasetError(f"伤口 {wound_id} 第 {day} 天的图像文件不存在: {file}")
        entries[(wound_id, day)] = (cohort, path)

    for wound_id in cohorts:
        days = sorted(d for w, d in entries if w == wound_id)
        for expected, day in enumerate(days):
            if day != expected:
                raise DatasetError(f"伤口 {wound_id} 缺少第 {expected} 天的图像")

    keys = sorted(entries)

    def read(key: Key) -> np.ndarray:
        wound_id, day = key
        try:
            return _open_image(entries[key][1], image_size)
        except (OSError, UnidentifiedImageError) as e:
            raise DatasetError(f"伤口 {wound_id} 第 {day} 天的图像无法读取: {e}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            pixels = list(executor.map(read, keys))
    else:
        pixels = [read(key) for key in keys]

    series_map: Dict[str, WoundSeries] = {}
    for key, array in zip(keys, pixels):
        wound_id, day = key
        series = series_map.setdefault(wound_id, WoundSeries(wound_id, cohorts[wound_id]))
        series.images.append(WoundImage(wound_id, cohorts[wound_id], day, array))

    series_list = [series_map[w] for w in sorted(series_map)]
    for series in series_list:
        series.validate()
    log.info(f"📂 读取 {len(series_list)} 个伤口序列，共 {len(keys)} 张图像")
    return series_list


def circular_crop(image: np.ndarray, radius_fraction: float) -> np.ndarray:
    """
    保留居中圆盘内的像素，盘外置 0

    Args:
        image: (H, W, C) 或 (H, W)；非正方形先居中裁成正方形
        radius_fraction: 半径占边长的比例，(0, 0.5]

    Returns:
        裁剪后的新数组
    """
    if not 0 < radius_fraction <= 0.5:
        raise ValueError(f"radius_fraction 必须在 (0, 0.5] 内，实际为 {radius_fraction}")
    height, width = image.shape[:2]
    side = min(height, width)
    top = (height - side) // 2
    left = (width - side) // 2
    square = image[top : top + side, left : left + side]

    centre = side / 2.0
    coords = np.arange(side) + 0.5 - centre
    dist2 = coords[:, None] ** 2 + coords[None, :] ** 2
    mask = dist2 <= (radius_fraction * side) ** 2
    if square.ndim == 3:
        mask = mask[:, :, None]
    return np.where(mask, square, 0.0)


def crop_series(series_list: Sequence[WoundSeries], radius_fraction: float) -> List[WoundSeries]:
    """对全部序列做圆形裁剪，返回新序列"""
    cropped = []
    for series in series_list:
        images = [
            WoundImage(i.wound_id, i.cohort, i.day, circular_crop(i.pixels, radius_fraction))
            for i in series.images
        ]
        cropped.append(WoundSeries(series.wound_id, series.cohort, images))
    return cropped


@dataclass(frozen=True)
class AugmentPlan:
    """某个种子对应的增强操作"""

    hflip: bool
    vflip: bool
    rotate_quarters: int
    brightness: Optional[float]

    @property
    def is_identity(self) -> bool:
        return (
            not self.hflip
            and not self.vflip
            and self.rotate_quarters == 0
            and self.brightness is None
        )


def augment_plan(seed: int) -> AugmentPlan:
    """每项增强以 0.5 的概率独立触发；随机数按固定顺序抽取"""
    rng = np.random.default_rng(seed)
    coins = rng.random(4)
    quarters = int(rng.integers(1, 4))
    factor = float(rng.uniform(0.9, 1.1))
    return AugmentPlan(
        hflip=bool(coins[0] < 0.5),
        vflip=bool(coins[1] < 0.5),
        rotate_quarters=quarters if coins[2] < 0.5 else 0,
        brightness=factor if coins[3] < 0.5 else None,
    )


def augment(image: np.ndarray, seed: int) -> np.ndarray:
    """
    训练用数据增强：水平翻转、垂直翻转、90° 整数倍旋转、亮度缩放 [0.9, 1.1]

    Args:
        image: (H, W, C) 正方形图像
        seed: 增强种子，相同种子结果逐位相同

    Returns:
        增强后的新数组，取值截断到 [0, 1]
    """
    plan = augment_plan(seed)
    out = image
    if plan.hflip:
        out = out[:, ::-1]
    if plan.vflip:
        out = out[::-1]
    if plan.rotate_quarters:
        out = np.rot90(out, plan.rotate_quarters, axes=(0, 1))
    if plan.brightness is not None:
        out = np.clip(out * plan.brightness, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float64)


def generate_pairs(
    series_list: Sequence[WoundSeries], logger: Optional[Logger] = None
) -> List[ImagePair]:
    """
    每个伤口的每个有序异天组合生成一对：day_a < day_b 为正样本，反之为负样本

    Args:
        series_list: 伤口序列
        logger: 日志记录器

    Returns:
        图像对列表，每个伤口 D*(D-1) 对，正负样本数量相等
    """
    log = logger or default_logger
    pairs: List[ImagePair] = []
    for series in series_list:
        if len(series.images) < 2:
            log.warning(f"⚠️ 伤口 {series.wound_id} 只有 {len(series.images)} 天，跳过配对")
            continue
        for image_a in series.images:
            for image_b in series.images:
                if image_a.day == image_b.day:
                    continue
                label = 1 if image_a.day < image_b.day else 0
                pairs.append(ImagePair(image_a, image_b, label))
    return pairs


def make_split(
    series_list: Sequence[WoundSeries],
    n_val_per_cohort: int = 1,
    n_test_per_cohort: int = 1,
    seed: int = 0,
) -> SplitSpec:
    """
    每个年龄组随机留出若干伤口作为验证集和测试集，其余为训练集

    Args:
        series_list: 伤口序列
        n_val_per_cohort: 每组验证伤口数
        n_test_per_cohort: 每组测试伤口数
        seed: 随机种子

    Returns:
        划分；同一个划分用于图像对和单图数据集

    Raises:
        SplitError: 某组伤口不足或训练集为空
    """
    if n_val_per_cohort < 1 or n_test_per_cohort < 1:
        raise SplitError("每组验证/测试伤口数至少为 1")
    rng = np.random.default_rng(seed)
    train: List[str] = []
    val: List[str] = []
    test: List[str] = []
    for cohort in sorted({s.cohort for s in series_list}):
        wounds = sorted(s.wound_id for s in series_list if s.cohort == cohort)
        needed = n_val_per_cohort + n_test_per_cohort
        if len(wounds) < needed:
            raise SplitError(
                f"年龄组 {cohort} 只有 {len(wounds)} 个伤口，至少需要 {needed} 个"
            )
        order = [wounds[i] for i in rng.permutation(len(wounds))]
        val += order[:n_val_per_cohort]
        test += order[n_val_per_cohort:needed]
        train += order[needed:]
    if not train:
        raise SplitError("留出验证/测试伤口后训练集为空")
    return SplitSpec(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)))


def index_images(series_list: Sequence[WoundSeries]) -> Dict[Key, WoundImage]:
    return {image.key: image for series in series_list for image in series.images}


class PairingResult:
    """配对与划分结果类"""

    def __init__(self):
        self.split: Optional[SplitSpec] = None
        self.pairs: List[ImagePair] = []
        self.pair_counts: Dict[str, int] = {}
        self.image_counts: Dict[str, int] = {}
        self.success = False
        self.error: Optional[str] = None

    def set_success(self, split: SplitSpec, pairs: List[ImagePair], series_list) -> None:
        """设置成功结果"""
        self.split = split
        self.pairs = pairs
        for part in SPLIT_PARTS:
            self.pair_counts[part] = len(split.filter_pairs(pairs, part))
            self.image_counts[part] = sum(
                len(s.images) for s in split.filter_series(series_list, part)
            )
        self.success = True

    def set_error(self, error: str) -> None:
        """设置错误结果"""
        self.error = error
        self.success = False


class DatasetService:
    """数据集服务类"""

    SPLIT_COLUMNS = ("wound_id", "cohort", "split")
    PAIR_COLUMNS = ("wound_id", "day_a", "day_b", "label", "split")

    def __init__(
        self, config_manager: ConfigManager, logger: Logger, file_utils: FileUtils
    ):
        """
        初始化数据集服务

        Args:
            config_manager: 配置管理器
            logger: 日志记录器
            file_utils: 文件工具
        """
        self.config_manager = config_manager
        self.logger = logger
        self.file_utils = file_utils

    def load(self, root: Union[str, Path]) -> List[WoundSeries]:
        """读取数据集并按配置做圆形裁剪"""
        data_config = self.config_manager.get_data_config()
        series_list = load_dataset(
            root,
            image_size=data_config["image_size"],
            workers=data_config["workers"],
            logger=self.logger,
        )
        return crop_series(series_list, data_config["radius_fraction"])

    def build_pairs(self, series_list: Sequence[WoundSeries]) -> PairingResult:
        """
        生成划分和图像对

        Args:
            series_list: 伤口序列

        Returns:
            配对结果
        """
        result = PairingResult()
        try:
            split_config = self.config_manager.get_split_config()
            split = make_split(
                series_list,
                split_config["n_val_per_cohort"],
                split_config["n_test_per_cohort"],
                self.config_manager.get_seed(),
            )
            pairs = generate_pairs(series_list, self.logger)
            result.set_success(split, pairs, series_list)
            self.logger.success(
                f"✅ 生成 {len(pairs)} 个图像对: "
                + ", ".join(f"{p}={result.pair_counts[p]}" for p in SPLIT_PARTS)
            )
        except (SplitError, DatasetError) as e:
            self.logger.error(f"❌ 划分或配对失败: {e}")
            result.set_error(str(e))
        return result

    def write_split(
        self, path: Union[str, Path], split: SplitSpec, series_list: Sequence[WoundSeries]
    ) -> None:
        rows = [(s.wound_id, s.cohort, split.part_of(s.wound_id)) for s in series_list]
        self.file_utils.write_table(path, self.SPLIT_COLUMNS, rows)

    def read_split(self, path: Union[str, Path]) -> SplitSpec:
        """
        读取划分文件

        Raises:
            SplitError: 划分名未知
        """
        parts: Dict[str, List[str]] = {p: [] for p in SPLIT_PARTS}
        for record in self.file_utils.read_table_records(path):
            if record["split"] not in parts:
                raise SplitError(f"划分文件中出现未知划分: {record['split']}")
            parts[record["split"]].append(record["wound_id"])
        return SplitSpec(*(tuple(sorted(parts[p])) for p in SPLIT_PARTS))

    def read_cohorts(self, path: Union[str, Path]) -> Dict[str, str]:
        """从划分文件读取 wound_id -> 年龄组"""
        return {r["wound_id"]: r["cohort"] for r in self.file_utils.read_table_records(path)}

    def write_pairs(
        self, path: Union[str, Path], pairs: Sequence[ImagePair], split: SplitSpec
    ) -> None:
        rows = [
            (p.wound_id, p.image_a.day, p.image_b.day, p.label, split.part_of(p.wound_id))
            for p in pairs
        ]
        self.file_utils.write_table(path, self.PAIR_COLUMNS, rows)

    def read_pairs(
        self, path: Union[str, Path], series_list: Sequence[WoundSeries]
    ) -> Dict[str, List[ImagePair]]:
        """
        读取图像对文件并关联到已加载的图像

        Returns:
            划分名 -> 图像对列表

        Raises:
            DatasetError: 图像对引用了数据集中不存在的图像
        """
        images = index_images(series_list)
        pairs: Dict[str, List[ImagePair]] = {p: [] for p in SPLIT_PARTS}
        for record in self.file_utils.read_table_records(path):
            key_a = (record["wound_id"], int(record["day_a"]))
            key_b = (record["wound_id"], int(record["day_b"]))
            for key in (key_a, key_b):
                if key not in images:
                    raise DatasetError(
                        f"图像对引用了不存在的图像: 伤口 {key[0]} 第 {key[1]} 天"
                    )
            pairs[record["split"]].append(
                ImagePair(images[key_a], images[key_b], int(record["label"]))
            )
        return pairs
