"""
异常类型
所有流水线错误都带有 error_class，便于命令行输出单行可解析的错误信息
"""

from typing import Iterable


class HealStageError(ValueError):
    """流水线错误基类"""

    error_class = "HealStageError"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        """单行错误描述，供 main.py 输出到 stderr"""
        text = " ".join(self.message.split())
        return f"ERROR {self.error_class}: {text}"


class ShapeError(HealStageError):
    """张量形状不匹配"""

    error_class = "ShapeError"

    def __init__(self, op: str, *shapes: Iterable[int], detail: str = ""):
        shape_text = " vs ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: 形状不匹配 {shape_text}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class NonFiniteError(HealStageError):
    """出现 NaN 或 Inf"""

    error_class = "NonFiniteError"


class ConfigError(HealStageError):
    """配置文件或命令行参数错误"""

    error_class = "ConfigError"


class DatasetError(HealStageError):
    """数据集清单或图像错误"""

    error_class = "DatasetError"


class SplitError(HealStageError):
    """数据划分错误"""

    error_class = "SplitError"


class CheckpointError(HealStageError):
    """检查点与模型结构不一致"""

    error_class = "CheckpointError"


class LabelError(HealStageError):
    """标签取值或标签表键集合错误"""

    error_class = "LabelError"


class ClusterError(HealStageError):
    """聚类或阶段映射错误"""

    error_class = "ClusterError"


class MissingArtifactError(FileNotFoundError):
    """上游产物缺失，需要先运行前置子命令"""

    error_class = "MissingArtifactError"

    def __init__(self, artifact: str, command: str):
        self.artifact = artifact
        self.command = command
        self.message = f"缺少 {artifact}，请先运行 `{command}` 子命令"
        super().__init__(self.message)

    def one_line(self) -> str:
        return f"ERROR {self.error_class}: {self.message}"
