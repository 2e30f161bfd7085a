"""
配置管理工具
提供统一的配置文件加载、默认值合并、命令行覆盖和快照接口
"""

import copy
import json
import os
from typing import Any, Callable, Dict, List, Optional, Tuple

from .errors import ConfigError

# 默认值，均可被配置文件或命令行覆盖
DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "data": {"root": "", "image_size": 64, "radius_fraction": 0.45, "workers": 4},
    "split": {"n_val_per_cohort": 1, "n_test_per_cohort": 1},
    "encoder": {
        "stem_channels": 16,
        "dense_blocks": 2,
        "layers_per_block": 3,
        "growth_rate": 8,
        "embedding_dim": 16,
    },
    "pretext": {
        "batch_size": 16,
        "epochs": 25,
        "learning_rate": 0.001,
        "dropout": 0.3,
        "augment": True,
        "workers": 1,
    },
    "cluster": {
        "k": 4,
        "n_init": 10,
        "max_iter": 300,
        "tol": 1e-6,
        "fit_on": "all",
        "workers": 4,
    },
    "downstream": {
        "batch_size": 16,
        "epochs": 25,
        "learning_rate": 0.001,
        "dropout": 0.3,
        "steps_per_epoch": None,
        "freeze_encoder": False,
        "augment": True,
        "workers": 1,
        "human_labels": None,
    },
    "synth": {
        "wounds_per_cohort": 8,
        "days": 16,
        "image_side": 64,
        "aged_rate": 0.7,
        "noise": 0.03,
        "label_noise": 0.15,
        "workers": 4,
    },
    "logging": {
        "level": "INFO",
        "enable_color": True,
        "show_progress": True,
        "log_file": "run.log",
    },
    "output": {"dir": "output"},
}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _positive_int(value: Any) -> bool:
    return _is_int(value) and value >= 1


def _non_negative_int(value: Any) -> bool:
    return _is_int(value) and value >= 0


def _rate(value: Any) -> bool:
    return _is_number(value) and 0 <= value < 1


def _optional_str(value: Any) -> bool:
    return value is None or isinstance(value, str)


Check = Tuple[Callable[[Any], bool], str]

# 每个字段: (校验函数, 期望描述)
SCHEMA: Dict[str, Dict[str, Check]] = {
    "data": {
        "root": (lambda v: isinstance(v, str), "字符串"),
        "image_size": (lambda v: _is_int(v) and v >= 8, "不小于 8 的整数"),
        "radius_fraction": (
            lambda v: _is_number(v) and 0 < v <= 0.5,
            "(0, 0.5] 区间内的数",
        ),
        "workers": (_positive_int, "正整数"),
    },
    "split": {
        "n_val_per_cohort": (_positive_int, "正整数"),
        "n_test_per_cohort": (_positive_int, "正整数"),
    },
    "encoder": {
        "stem_channels": (_positive_int, "正整数"),
        "dense_blocks": (_positive_int, "正整数"),
        "layers_per_block": (_positive_int, "正整数"),
        "growth_rate": (_positive_int, "正整数"),
        "embedding_dim": (lambda v: v == 16, "固定为 16"),
    },
    "pretext": {
        "batch_size": (_positive_int, "正整数"),
        "epochs": (_positive_int, "正整数"),
        "learning_rate": (lambda v: _is_number(v) and v > 0, "正数"),
        "dropout": (_rate, "[0, 1) 区间内的数"),
        "augment": (lambda v: isinstance(v, bool), "布尔值"),
        "workers": (_non_negative_int, "非负整数"),
    },
    "cluster": {
        "k": (_positive_int, "正整数"),
        "n_init": (_positive_int, "正整数"),
        "max_iter": (_positive_int, "正整数"),
        "tol": (lambda v: _is_number(v) and v >= 0, "非负数"),
        "fit_on": (lambda v: v in ("all", "train"), '"all" 或 "train"'),
        "workers": (_positive_int, "正整数"),
    },
    "downstream": {
        "batch_size": (_positive_int, "正整数"),
        "epochs": (_positive_int, "正整数"),
        "learning_rate": (lambda v: _is_number(v) and v > 0, "正数"),
        "dropout": (_rate, "[0, 1) 区间内的数"),
        "steps_per_epoch": (lambda v: v is None or _positive_int(v), "null 或正整数"),
        "freeze_encoder": (lambda v: isinstance(v, bool), "布尔值"),
        "augment": (lambda v: isinstance(v, bool), "布尔值"),
        "workers": (_non_negative_int, "非负整数"),
        "human_labels": (_optional_str, "null 或字符串路径"),
    },
    "synth": {
        "wounds_per_cohort": (_positive_int, "正整数"),
        "days": (lambda v: _is_int(v) and v >= 4, "不小于 4 的整数"),
        "image_side": (lambda v: _is_int(v) and v >= 8, "不小于 8 的整数"),
        "aged_rate": (lambda v: _is_number(v) and 0 < v <= 1, "(0, 1] 区间内的数"),
        "noise": (lambda v: _is_number(v) and v >= 0, "非负数"),
        "label_noise": (lambda v: _is_number(v) and 0 <= v <= 1, "[0, 1] 区间内的数"),
        "workers": (_positive_int, "正整数"),
    },
    "logging": {
        "level": (lambda v: isinstance(v, str), "字符串"),
        "enable_color": (lambda v: isinstance(v, bool), "布尔值"),
        "show_progress": (lambda v: isinstance(v, bool), "布尔值"),
        "log_file": (_optional_str, "null 或字符串"),
    },
    "output": {"dir": (lambda v: isinstance(v, str) and v != "", "非空字符串")},
}


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    """把 update 递归合并进 base 的副本"""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ConfigManager:
    """配置管理器，负责加载、验证、覆盖和导出配置"""

    def __init__(self, config_path: Optional[str] = "config.json"):
        """
        初始化配置管理器

        Args:
            config_path: 配置文件路径；为 None 时只使用默认值
        """
        self.config_path = config_path
        self._config: Optional[Dict[str, Any]] = None
        self._overrides: Dict[str, Any] = {}

    @classmethod
    def from_snapshot(cls, snapshot: Dict[str, Any]) -> "ConfigManager":
        """
        从运行摘要中的配置快照重建管理器

        Args:
            snapshot: snapshot() 的返回值

        Returns:
            有效配置与快照完全一致的管理器
        """
        manager = cls(None)
        manager._config = _merge(DEFAULT_CONFIG, snapshot)
        manager._validate_config()
        return manager

    def load_config(self) -> Dict[str, Any]:
        """
        加载配置文件并与默认值合并

        Returns:
            有效配置字典

        Raises:
            ConfigError: 文件不存在、JSON 语法错误或字段校验失败
        """
        user_config: Dict[str, Any] = {}
        if self.config_path is not None:
            if not os.path.exists(self.config_path):
                raise ConfigError(f"配置文件不存在: {self.config_path}")
            try:
                with open(self.config_path, "r", encoding="utf-8") as f:
                    user_config = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(
                    f"配置文件格式错误 {self.config_path} "
                    f"第 {e.lineno} 行第 {e.colno} 列: {e.msg}"
                )
            if not isinstance(user_config, dict):
                raise ConfigError("配置文件根节点必须是对象")

        self._config = _merge(DEFAULT_CONFIG, user_config)
        for dotted, value in self._overrides.items():
            self._set_dotted(dotted, value)
        self._validate_config()
        return self._config

    def _validate_config(self) -> None:
        """
        验证配置文件结构

        Raises:
            ConfigError: 字段未知、类型或取值不正确
        """
        config = self._config
        if not isinstance(config, dict):
            raise ConfigError("配置文件根节点必须是对象")

        if not _is_int(config.get("seed")):
            raise ConfigError("字段 seed 必须是整数")

        for key in config:
            if key != "seed" and key not in SCHEMA:
                raise ConfigError(f"未知配置字段: {key}")

        for section, fields in SCHEMA.items():
            values = config.get(section)
            if not isinstance(values, dict):
                raise ConfigError(f"字段 {section} 必须是对象")
            for key in values:
                if key not in fields:
                    raise ConfigError(f"未知配置字段: {section}.{key}")
            for key, (check, expected) in fields.items():
                if not check(values.get(key)):
                    raise ConfigError(
                        f"字段 {section}.{key} 应为{expected}，实际为 {values.get(key)!r}"
                    )

    def _ensure_loaded(self) -> Dict[str, Any]:
        if self._config is None:
            self.load_config()
        return self._config

    def _set_dotted(self, dotted: str, value: Any) -> None:
        parts = dotted.split(".")
        if len(parts) == 1 and parts[0] == "seed":
            self._config["seed"] = value
            return
        if len(parts) != 2 or parts[0] not in SCHEMA or parts[1] not in SCHEMA[parts[0]]:
            raise ConfigError(f"未知配置字段: {dotted}")
        self._config[parts[0]][parts[1]] = value

    def apply_overrides(self, assignments: List[str]) -> None:
        """
        应用命令行覆盖项（优先级高于配置文件）

        Args:
            assignments: 形如 "pretext.epochs=5" 的字符串列表；取值按 JSON 解析，
                解析失败时按字符串处理

        Raises:
            ConfigError: 格式错误或字段未知
        """
        for assignment in assignments:
            if "=" not in assignment:
                raise ConfigError(f"覆盖项格式应为 section.key=value: {assignment}")
            dotted, raw = assignment.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            self.set_value(dotted.strip(), value)

    def set_value(self, dotted: str, value: Any) -> None:
        """
        设置单个字段并重新校验

        Args:
            dotted: 点分字段名，例如 "output.dir" 或 "seed"
            value: 新取值
        """
        self._ensure_loaded()
        self._overrides[dotted] = value
        self._set_dotted(dotted, value)
        self._validate_config()

    def snapshot(self) -> Dict[str, Any]:
        """
        获取有效配置的深拷贝，写入运行摘要

        Returns:
            有效配置字典
        """
        return copy.deepcopy(self._ensure_loaded())

    def get_seed(self) -> int:
        return self._ensure_loaded()["seed"]

    def get_section(self, section: str) -> Dict[str, Any]:
        """
        获取某个配置段（副本）

        Args:
            section: 配置段名称

        Returns:
            配置段字典

        Raises:
            KeyError: 配置段不存在
        """
        config = self._ensure_loaded()
        if section not in SCHEMA:
            raise KeyError(f"配置段不存在: {section}")
        return copy.deepcopy(config[section])

    def get_data_config(self) -> Dict[str, Any]:
        return self.get_section("data")

    def get_split_config(self) -> Dict[str, Any]:
        return self.get_section("split")

    def get_encoder_config(self) -> Dict[str, Any]:
        """编码器配置，附带输入图像尺寸"""
        encoder = self.get_section("encoder")
        encoder["image_size"] = self.get_data_config()["image_size"]
        return encoder

    def get_pretext_config(self) -> Dict[str, Any]:
        return self.get_section("pretext")

    def get_cluster_config(self) -> Dict[str, Any]:
        return self.get_section("cluster")

    def get_downstream_config(self) -> Dict[str, Any]:
        return self.get_section("downstream")

    def get_synth_config(self) -> Dict[str, Any]:
        return self.get_section("synth")

    def get_logging_config(self) -> Dict[str, Any]:
        return self.get_section("logging")

    def get_output_config(self) -> Dict[str, Any]:
        return self.get_section("output")
