"""
统一日志系统
级别过滤、彩色输出、批次进度条和可选的日志文件
"""

import sys
import threading
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, NamedTuple, Optional, TextIO, Union


class LogLevel(Enum):
    """日志级别枚举"""

    DEBUG = "DEBUG"
    INFO = "INFO"
    SUCCESS = "SUCCESS"
    WARNING = "WARNING"
    ERROR = "ERROR"

    @classmethod
    def from_string(cls, name: str) -> "LogLevel":
        """按名称查找级别（大小写不敏感），未知名称按 INFO 处理"""
        return cls.__members__.get(name.strip().upper(), cls.INFO)


class LevelStyle(NamedTuple):
    rank: int
    color: str
    icon: str


STYLES: Dict[LogLevel, LevelStyle] = {
    LogLevel.DEBUG: LevelStyle(0, "\033[37m", "🔍"),
    LogLevel.INFO: LevelStyle(1, "\033[36m", "ℹ️"),
    LogLevel.SUCCESS: LevelStyle(2, "\033[32m", "✅"),
    LogLevel.WARNING: LevelStyle(3, "\033[33m", "⚠️"),
    LogLevel.ERROR: LevelStyle(4, "\033[31m", "❌"),
}

RESET = "\033[0m"
RULE_WIDTH = 50
BAR_WIDTH = 20


class Logger:
    """
    流水线日志记录器

    ERROR 写 stderr，其余写 stdout；挂上日志文件后每条消息再以无颜色形式追加一份。
    预取线程和主线程共用一个实例，输出用锁串行化。
    """

    def __init__(
        self,
        enable_color: bool = True,
        log_level: LogLevel = LogLevel.INFO,
        show_progress: bool = True,
        log_file: Optional[Union[str, Path]] = None,
    ):
        """
        Args:
            enable_color: 终端支持时使用 ANSI 颜色
            log_level: 最低输出级别
            show_progress: 是否显示批次进度条
            log_file: 追加写入的日志文件
        """
        self.enable_color = enable_color and sys.stdout.isatty()
        self.log_level = log_level
        self.show_progress = show_progress
        self._sink: Optional[TextIO] = None
        self._lock = threading.Lock()
        if log_file:
            self.attach_file(log_file)

    # ---------- 日志文件 ----------

    def attach_file(self, path: Union[str, Path]) -> None:
        self.close_file()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self._sink = open(path, "a", encoding="utf-8")

    def close_file(self) -> None:
        if self._sink is not None:
            self._sink.close()
            self._sink = None

    # ---------- 基本输出 ----------

    def enabled(self, level: LogLevel) -> bool:
        return STYLES[level].rank >= STYLES[self.log_level].rank

    def _line(self, level: LogLevel, message: str) -> str:
        stamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        return f"[{stamp}] [{level.value}] {STYLES[level].icon} {message}"

    def _emit(self, level: LogLevel, message: str) -> None:
        if not self.enabled(level):
            return
        line = self._line(level, message)
        stream = sys.stderr if level is LogLevel.ERROR else sys.stdout
        shown = f"{STYLES[level].color}{line}{RESET}" if self.enable_color else line
        with self._lock:
            print(shown, file=stream, flush=True)
            if self._sink is not None:
                self._sink.write(line + "\n")
                self._sink.flush()

    def debug(self, message: str) -> None:
        self._emit(LogLevel.DEBUG, message)

    def info(self, message: str) -> None:
        self._emit(LogLevel.INFO, message)

    def success(self, message: str) -> None:
        self._emit(LogLevel.SUCCESS, message)

    def warning(self, message: str) -> None:
        self._emit(LogLevel.WARNING, message)

    def error(self, message: str) -> None:
        self._emit(LogLevel.ERROR, message)

    # ---------- 训练输出 ----------

    def progress(self, done: int, total: int, label: str = "") -> None:
        """
        在同一行刷新批次进度条，只写终端不写日志文件

        Args:
            done: 已完成的批次数
            total: 本轮批次总数
            label: 进度条后的说明
        """
        if not self.show_progress or total <= 0 or not self.enabled(LogLevel.INFO):
            return
        percent = min(100, done * 100 // total)
        filled = percent * BAR_WIDTH // 100
        text = f"{label} [{'█' * filled}{'░' * (BAR_WIDTH - filled)}] {done}/{total}"
        if self.enable_color:
            text = f"{STYLES[LogLevel.INFO].color}{text}{RESET}"
        with self._lock:
            sys.stdout.write("\r" + text)
            if done >= total:
                sys.stdout.write("\n")
            sys.stdout.flush()

    def epoch(
        self,
        task: str,
        epoch: int,
        epochs: int,
        train_loss: float,
        train_acc: float,
        val_loss: float,
        val_acc: float,
    ) -> None:
        """一轮训练结束时输出一行历史（task 为 pretext / finetune / baseline）"""
        self.info(
            f"📈 [{task}] epoch {epoch}/{epochs} "
            f"loss={train_loss:.4f} acc={train_acc:.3f} "
            f"val_loss={val_loss:.4f} val_acc={val_acc:.3f}"
        )

    # ---------- 版面 ----------

    def step(self, name: str, index: int, count: int) -> None:
        self.info(f"🚀 {name} ({index}/{count})")

    def separator(self, title: str = "") -> None:
        if not title:
            self.info("=" * RULE_WIDTH)
            return
        self.info(f" {title} ".center(RULE_WIDTH, "="))

    def header(self, title: str) -> None:
        self.separator()
        self.info(f"🩹 {title}")
        self.separator()


# 模块级默认实例，服务未传入 logger 时使用
logger = Logger()
