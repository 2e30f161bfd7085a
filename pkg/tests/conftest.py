"""
测试公共夹具
小尺寸编码器配置、内存中的伤口序列和写到磁盘的小数据集
"""

from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest
from PIL import Image

from src.services.dataset import WoundImage, WoundSeries
from src.utils.file_utils import FileUtils
from src.utils.logger import Logger, LogLevel

TINY_ENCODER: Dict = {
    "image_size": 16,
    "stem_channels": 4,
    "dense_blocks": 2,
    "layers_per_block": 2,
    "growth_rate": 4,
}


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="运行耗时的端到端测试"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_encoder_config() -> Dict:
    return dict(TINY_ENCODER)


@pytest.fixture
def quiet_logger() -> Logger:
    return Logger(enable_color=False, log_level=LogLevel.ERROR, show_progress=False)


def make_series(
    wounds_per_cohort: int, days: int, side: int = 16, seed: int = 0
) -> List[WoundSeries]:
    """随机像素组成的伤口序列，wound_id 形如 young_00"""
    rng = np.random.default_rng(seed)
    series_list = []
    for cohort in ("young", "aged"):
        for i in range(wounds_per_cohort):
            wound_id = f"{cohort}_{i:02d}"
            images = [
                WoundImage(wound_id, cohort, day, rng.random((side, side, 3)))
                for day in range(days)
            ]
            series_list.append(WoundSeries(wound_id, cohort, images))
    return sorted(series_list, key=lambda s: s.wound_id)


def write_dataset(
    root: Path, wounds_per_cohort: int, days: int, side: int = 16, seed: int = 0
) -> List[dict]:
    """把随机图像写成 PNG 并生成 manifest.json，返回清单记录"""
    rng = np.random.default_rng(seed)
    records = []
    for cohort in ("young", "aged"):
        for i in range(wounds_per_cohort):
            wound_id = f"{cohort}_{i:02d}"
            for day in range(days):
                rel = f"images/{wound_id}/day_{day:02d}.png"
                path = root / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                pixels = rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
                Image.fromarray(pixels, "RGB").save(path)
                records.append({"wound_id": wound_id, "cohort": cohort, "day": day, "file": rel})
    FileUtils.write_json_file(root / "manifest.json", records)
    return records


@pytest.fixture
def series_factory():
    return make_series


@pytest.fixture
def dataset_writer():
    return write_dataset
