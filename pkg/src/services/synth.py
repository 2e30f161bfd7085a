"""
合成伤口数据集服务
按年龄组生成带已知阶段结构的程序化伤口图像序列，写出清单、真值表和模拟人工标注
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageFilter

from ..utils.config import ConfigManager
from ..utils.errors import ConfigError
from ..utils.file_utils import FileUtils
from ..utils.logger import Logger
from ..utils.logger import logger as default_logger
from .dataset import COHORTS, MANIFEST_NAME, Key

# 16 天时为第 2 / 5 / 10 天
TRANSITION_FRACTIONS = (0.125, 0.3125, 0.625)
JITTER = 0.75
CLOSURE = 0.85
HUMAN_LABEL_STREAM = 1_000_003

SKIN = np.array([0.80, 0.62, 0.55])
CLOT_RIM = np.array([0.22, 0.05, 0.05])
CLOT_CORE = np.array([0.92, 0.22, 0.18])
SWELLING = np.array([0.86, 0.42, 0.42])
WET_BED = np.array([0.80, 0.30, 0.30])
GRANULATION = np.array([0.56, 0.36, 0.30])
SCAR = np.array([0.84, 0.58, 0.55])

GROUND_TRUTH_COLUMNS = ("wound_id", "day", "true_stage", "transition_days")
HUMAN_COLUMNS = ("wound_id", "day", "stage")


@dataclass
class SynthConfig:
    """合成数据集参数"""

    wounds_per_cohort: int = 8
    days: int = 16
    image_side: int = 64
    aged_rate: float = 0.7
    noise: float = 0.03
    label_noise: float = 0.15
    seed: int = 0
    workers: int = 4

    @classmethod
    def from_section(cls, section: Dict[str, Any], seed: int) -> "SynthConfig":
        return cls(seed=seed, **section)

    def validate(self) -> None:
        """
        Raises:
            ConfigError: 参数越界
        """
        if self.wounds_per_cohort < 1:
            raise ConfigError("synth.wounds_per_cohort 至少为 1")
        if self.days < 4:
            raise ConfigError(f"synth.days 至少为 4，实际为 {self.days}")
        if self.image_side < 8:
            raise ConfigError(f"synth.image_side 至少为 8，实际为 {self.image_side}")
        if not 0 < self.aged_rate <= 1:
            raise ConfigError(f"synth.aged_rate 必须在 (0, 1] 内，实际为 {self.aged_rate}")
        if self.noise < 0:
            raise ConfigError(f"synth.noise 不能为负，实际为 {self.noise}")
        if not 0 <= self.label_noise <= 1:
            raise ConfigError(f"synth.label_noise 必须在 [0, 1] 内，实际为 {self.label_noise}")

    def rate(self, cohort: str) -> float:
        return self.aged_rate if cohort == "aged" else 1.0


@dataclass
class SynthGroundTruth:
    """逐图像真实阶段与半径，逐伤口阶段转换日"""

    stages: Dict[Key, int] = field(default_factory=dict)
    radii: Dict[Key, float] = field(default_factory=dict)
    transitions: Dict[str, Tuple[int, int, int]] = field(default_factory=dict)
    cohorts: Dict[str, str] = field(default_factory=dict)


def base_transitions(days: int, rate: float = 1.0) -> np.ndarray:
    """未加抖动的转换日：基准比例乘以天数再除以愈合速率"""
    return np.array(TRANSITION_FRACTIONS) * days / rate


def transition_days(days: int, rate: float, rng: np.random.Generator) -> Tuple[int, int, int]:
    """
    抖动、取整后约束为 1 <= t1 < t2 < t3 <= days-1，保证四个阶段都出现
    """
    raw = np.rint(base_transitions(days, rate) + rng.uniform(-JITTER, JITTER, size=3))
    t1 = int(np.clip(raw[0], 1, days - 3))
    t2 = int(np.clip(raw[1], t1 + 1, days - 2))
    t3 = int(np.clip(raw[2], t2 + 1, days - 1))
    return t1, t2, t3


def stage_of(day: int, transitions: Tuple[int, int, int]) -> int:
    return int(sum(day >= t for t in transitions))


def healing_progress(day: int, transitions: Tuple[int, int, int], days: int) -> float:
    """分段线性、随天数严格递增；阶段 s 对应 [s/4, (s+1)/4)"""
    knots = [0, *transitions, days]
    return float(np.interp(day, knots, [0.0, 0.25, 0.5, 0.75, 1.0]))


def _radial(side: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    coords = np.arange(side) + 0.5 - side / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return yy, xx, np.sqrt(yy * yy + xx * xx)


def _paint(canvas: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    canvas[mask] = color


def _blur(canvas: np.ndarray, radius: float) -> np.ndarray:
    image = Image.fromarray(np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8), "RGB")
    blurred = image.filter(ImageFilter.GaussianBlur(radius))
    return np.asarray(blurred, dtype=np.float64) / 255.0


def render_wound(
    side: int,
    stage: int,
    radius: float,
    skin: np.ndarray,
    noise: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    渲染单张伤口图像

    阶段 0：清晰的深色边缘和明亮的内部
    阶段 1：模糊肿胀的边缘，湿润高光
    阶段 2：哑光中间色调内部，带高频纹理
    阶段 3：接近皮肤颜色的圆盘

    Returns:
        (side, side, 3) 取值 [0, 1]
    """
    yy, xx, dist = _radial(side)
    canvas = np.empty((side, side, 3))
    canvas[...] = skin
    inside = dist <= radius
    scale = side / 64.0

    if stage == 0:
        rim = max(1.0, 0.15 * radius)
        _paint(canvas, inside, CLOT_CORE)
        _paint(canvas, inside & (dist > radius - rim), CLOT_RIM)
    elif stage == 1:
        _paint(canvas, dist <= 1.3 * radius, SWELLING)
        _paint(canvas, inside, WET_BED)
        canvas = _blur(canvas, 1.5 * scale)
        offset2 = (yy + 0.3 * radius) ** 2 + (xx + 0.3 * radius) ** 2
        spot = np.exp(-offset2 / (2 * (0.3 * radius) ** 2))
        canvas += 0.55 * spot[:, :, None] * inside[:, :, None]
    elif stage == 2:
        _paint(canvas, inside, GRANULATION)
        texture = rng.normal(0.0, 0.09, size=(side, side, 1))
        canvas += texture * inside[:, :, None]
    else:
        _paint(canvas, inside, 0.8 * skin + 0.2 * SCAR)

    if noise > 0:
        canvas = canvas + rng.normal(0.0, noise, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0)


def wound_ids(config: SynthConfig) -> List[Tuple[str, str]]:
    """(wound_id, cohort)，按年龄组再按编号排列"""
    return [
        (f"{cohort}_{i:02d}", cohort)
        for cohort in COHORTS
        for i in range(config.wounds_per_cohort)
    ]


def _render_series(
    config: SynthConfig, index: int, wound_id: str, cohort: str
) -> Tuple[Tuple[int, int, int], List[Tuple[int, int, float, np.ndarray]]]:
    rng = np.random.default_rng([config.seed, index])
    size_factor = rng.uniform(0.9, 1.1)
    skin = np.clip(SKIN + rng.uniform(-0.03, 0.03, size=3), 0.0, 1.0)
    transitions = transition_days(config.days, config.rate(cohort), rng)
    r0 = 0.36 * config.image_side * size_factor

    frames = []
    for day in range(config.days):
        stage = stage_of(day, transitions)
        radius = r0 * (1.0 - CLOSURE * healing_progress(day, transitions, config.days))
        pixels = render_wound(config.image_side, stage, radius, skin, config.noise, rng)
        frames.append((day, stage, float(radius), pixels))
    return transitions, frames


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate(
    config: SynthConfig, root: Union[str, Path], logger: Optional[Logger] = None
) -> SynthGroundTruth:
    """
    生成合成数据集并写入 root

    写出 manifest.json、images/<wound_id>/day_XX.png、ground_truth.txt 以及
    human_labels.txt（真值加按 label_noise 比例替换的随机错误阶段）。
    同一配置和种子生成逐字节相同的文件。

    Args:
        config: 合成参数
        root: 输出目录
        logger: 日志记录器

    Returns:
        真值
    """
    log = logger or default_logger
    config.validate()
    root = Path(root)
    FileUtils.ensure_dir(root / "images")
    wounds = wound_ids(config)

    def render(item: Tuple[int, Tuple[str, str]]):
        index, (wound_id, cohort) = item
        transitions, frames = _render_series(config, index, wound_id, cohort)
        for day, _, _, pixels in frames:
            path = root / "images" / wound_id / f"day_{day:02d}.png"
            FileUtils.ensure_dir(path.parent)
            Image.fromarray(to_uint8(pixels), "RGB").save(path, format="PNG")
        return transitions, [(day, stage, radius) for day, stage, radius, _ in frames]

    items = list(enumerate(wounds))
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            rendered = list(executor.map(render, items))
    else:
        rendered = [render(item) for item in items]

    truth = SynthGroundTruth()
    manifest = []
    truth_rows = []
    for (wound_id, cohort), (transitions, frames) in zip(wounds, rendered):
        truth.transitions[wound_id] = transitions
        truth.cohorts[wound_id] = cohort
        joined = ",".join(str(t) for t in transitions)
        for day, stage, radius in frames:
            truth.stages[(wound_id, day)] = stage
            truth.radii[(wound_id, day)] = radius
            manifest.append(
                {
                    "wound_id": wound_id,
                    "cohort": cohort,
                    "day": day,
                    "file": f"images/{wound_id}/day_{day:02d}.png",
                }
            )
            truth_rows.append((wound_id, day, stage, joined))

    FileUtils.write_json_file(root / MANIFEST_NAME, manifest)
    FileUtils.write_table(root / "ground_truth.txt", GROUND_TRUTH_COLUMNS, truth_rows)
    FileUtils.write_table(
        root / "human_labels.txt",
        HUMAN_COLUMNS,
        human_proxy_labels(truth, config.label_noise, config.seed),
        comments=[f"label_noise {config.label_noise!r}"],
    )
    log.success(
        f"✅ 合成 {len(wounds)} 个伤口 x {config.days} 天 = {len(manifest)} 张图像: {root}"
    )
    return truth


def human_proxy_labels(
    truth: SynthGroundTruth, label_noise: float, seed: int
) -> List[Tuple[str, int, int]]:
    """以 label_noise 的概率把真实阶段替换为另一个随机阶段"""
    rng = np.random.default_rng([seed, HUMAN_LABEL_STREAM])
    rows = []
    for (wound_id, day), stage in truth.stages.items():
        flip = rng.random() < label_noise
        offset = int(rng.integers(1, 4))
        rows.append((wound_id, day, (stage + offset) % 4 if flip else stage))
    return rows


def read_ground_truth(path: Union[str, Path]) -> SynthGroundTruth:
    truth = SynthGroundTruth()
    for record in FileUtils.read_table_records(path):
        key = (record["wound_id"], int(record["day"]))
        truth.stages[key] = int(record["true_stage"])
        t1, t2, t3 = (int(t) for t in record["transition_days"].split(","))
        truth.transitions[record["wound_id"]] = (t1, t2, t3)
    return truth


class SynthResult:
    """合成结果类"""

    def __init__(self):
        self.root: Optional[Path] = None
        self.truth: Optional[SynthGroundTruth] = None
        self.success = False
        self.error: Optional[str] = None

    def set_success(self, root: Path, truth: SynthGroundTruth) -> None:
        """设置成功结果"""
        self.root = root
        self.truth = truth
        self.success = True

    def set_error(self, error: str) -> None:
        """设置错误结果"""
        self.error = error
        self.success = False


class SynthService:
    """合成数据集服务类"""

    def __init__(
        self, config_manager: ConfigManager, logger: Logger, file_utils: FileUtils
    ):
        """
        初始化合成服务

        Args:
            config_manager: 配置管理器
            logger: 日志记录器
            file_utils: 文件工具
        """
        self.config_manager = config_manager
        self.logger = logger
        self.file_utils = file_utils

    def synth_config(self) -> SynthConfig:
        return SynthConfig.from_section(
            self.config_manager.get_synth_config(), self.config_manager.get_seed()
        )

    def generate(self, root: Union[str, Path]) -> SynthResult:
        result = SynthResult()
        config = self.synth_config()
        self.logger.info(
            f"🎨 合成数据集: 每组 {config.wounds_per_cohort} 个伤口, {config.days} 天, "
            f"边长 {config.image_side}, 噪声 {config.noise}"
        )
        result.set_success(Path(root), generate(config, root, self.logger))
        return result
