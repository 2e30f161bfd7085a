"""
文件操作工具
JSON 与列文本表格的读写；表格是所有产物（历史、统计、标签、嵌入）的统一格式
"""

import json
import shutil
from numbers import Integral, Real
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

from .errors import DatasetError

PathLike = Union[str, Path]

COMMENT_PREFIX = "##"
HEADER_PREFIX = "#"
SIZE_UNITS = ("B", "KB", "MB", "GB", "TB")


def _existing(path: PathLike) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"文件不存在: {path}")
    return path


class FileUtils:
    """文件操作工具类，全部为静态方法"""

    @staticmethod
    def ensure_dir(path: PathLike) -> None:
        Path(path).mkdir(parents=True, exist_ok=True)

    @staticmethod
    def read_json_file(path: PathLike) -> Any:
        """
        读取 JSON 文件

        Raises:
            FileNotFoundError: 文件不存在
            ValueError: JSON 语法错误，信息包含文件名和行列号
        """
        path = _existing(path)
        text = path.read_text(encoding="utf-8")
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path} 第 {e.lineno} 行第 {e.colno} 列 JSON 格式错误: {e.msg}")

    @staticmethod
    def write_json_file(path: PathLike, data: Any) -> None:
        """写入 JSON：键排序、两格缩进、末尾换行，相同数据得到相同字节"""
        path = Path(path)
        FileUtils.ensure_dir(path.parent)
        text = json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True)
        path.write_text(text + "\n", encoding="utf-8")

    @staticmethod
    def write_text_file(path: PathLike, lines: Iterable[str]) -> None:
        path = Path(path)
        FileUtils.ensure_dir(path.parent)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.writelines(line + "\n" for line in lines)

    @staticmethod
    def format_value(value: Any) -> str:
        """
        单元格转文本

        布尔与整数写成十进制整数，其余实数按 float 的 repr 写出（读回逐位相同），
        字符串原样写出但不得为空或含空白。
        """
        if isinstance(value, (bool, Integral)):
            return str(int(value))
        if isinstance(value, Real):
            return repr(float(value))
        text = str(value)
        if text == "" or text.split() != [text]:
            raise ValueError(f"表格单元格不能为空或包含空白: {text!r}")
        return text

    @staticmethod
    def write_table(
        path: PathLike,
        columns: Sequence[str],
        rows: Iterable[Sequence[Any]],
        comments: Sequence[str] = (),
    ) -> None:
        """
        写入列文本表格

        Args:
            path: 文件路径
            columns: 列名，写成 "# a b c" 表头
            rows: 每条记录一行，空格分隔
            comments: 表头之前的 "## ..." 注释行
        """
        width = len(columns)
        lines = [f"{COMMENT_PREFIX} {comment}" for comment in comments]
        lines.append(f"{HEADER_PREFIX} " + " ".join(columns))
        for row in rows:
            if len(row) != width:
                raise ValueError(f"{Path(path).name}: 记录有 {len(row)} 项，表头有 {width} 列")
            lines.append(" ".join(map(FileUtils.format_value, row)))
        FileUtils.write_text_file(path, lines)

    @staticmethod
    def read_table(path: PathLike) -> Tuple[List[str], List[List[str]]]:
        """
        读取列文本表格，跳过空行和注释行

        Returns:
            (列名, 记录)，单元格均为字符串

        Raises:
            FileNotFoundError: 文件不存在
            DatasetError: 表头缺失或列数不一致
        """
        path = _existing(path)
        columns: List[str] = []
        rows: List[List[str]] = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            cells = line.split()
            if not cells or cells[0].startswith(COMMENT_PREFIX):
                continue
            if cells[0].startswith(HEADER_PREFIX):
                columns = line.strip()[len(HEADER_PREFIX):].split()
            elif not columns:
                raise DatasetError(f"{path}:{lineno} 缺少表头")
            elif len(cells) != len(columns):
                raise DatasetError(
                    f"{path}:{lineno} 有 {len(cells)} 列，表头为 {len(columns)} 列"
                )
            else:
                rows.append(cells)
        return columns, rows

    @staticmethod
    def read_table_records(path: PathLike) -> List[Dict[str, str]]:
        """读取表格，每条记录为 列名 -> 单元格 的字典"""
        columns, rows = FileUtils.read_table(path)
        return [dict(zip(columns, row)) for row in rows]

    @staticmethod
    def format_file_size(size_bytes: int) -> str:
        """字节数转为 "12.3 KB" 形式"""
        size = float(size_bytes)
        for unit in SIZE_UNITS[:-1]:
            if size < 1024.0:
                return f"{size:.1f} {unit}"
            size /= 1024.0
        return f"{size:.1f} {SIZE_UNITS[-1]}"

    @staticmethod
    def copy_file(src: PathLike, dst: PathLike) -> None:
        """复制文件（保留时间戳），目标目录不存在时创建"""
        src = _existing(src)
        FileUtils.ensure_dir(Path(dst).parent)
        shutil.copy2(src, dst)
