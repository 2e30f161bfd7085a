"""
检查点读写
文本头记录每个参数的名称、形状和字节偏移，随后是小端 float32 数据段
"""

from pathlib import Path
from typing import Dict, List, Mapping, Union

import numpy as np

from ..utils.errors import CheckpointError
from ..utils.file_utils import FileUtils

MAGIC = "HEALSTAGE-CKPT 1"
END = "END"
_DTYPE = np.dtype("<f4")


def save_checkpoint(path: Union[str, Path], state: Mapping[str, np.ndarray]) -> int:
    """
    保存参数

    格式::

        HEALSTAGE-CKPT 1
        <name> <d0,d1,...> <offset>
        ...
        END
        <二进制数据段>

    offset 相对于数据段起点，单位字节。

    Args:
        path: 输出路径
        state: 参数名 -> 数值（保存为 float32）

    Returns:
        写入的字节数
    """
    header: List[str] = [MAGIC]
    blobs: List[bytes] = []
    offset = 0
    for name, value in state.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"参数名不能包含空白: {name!r}")
        array = np.ascontiguousarray(np.asarray(value), dtype=_DTYPE)
        shape = ",".join(str(d) for d in array.shape) or "-"
        header.append(f"{name} {shape} {offset}")
        blob = array.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header.append(END)
    payload = ("\n".join(header) + "\n").encode("utf-8") + b"".join(blobs)

    path = Path(path)
    FileUtils.ensure_dir(path.parent)
    path.write_bytes(payload)
    return len(payload)


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    读取检查点为 float64 数组字典

    Raises:
        FileNotFoundError: 文件不存在
        CheckpointError: 文件格式损坏
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"检查点不存在: {path}")
    raw = path.read_bytes()
    marker = f"\n{END}\n".encode("utf-8")
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode("utf-8")) or cut < 0:
        raise CheckpointError(f"不是有效的检查点文件: {path}")
    lines = raw[:cut].decode("utf-8").split("\n")[1:]
    data = raw[cut + len(marker) :]

    state: Dict[str, np.ndarray] = {}
    for line in lines:
        try:
            name, shape_text, offset_text = line.split(" ")
            shape = () if shape_text == "-" else tuple(int(d) for d in shape_text.split(","))
            offset = int(offset_text)
        except ValueError:
            raise CheckpointError(f"检查点头部格式错误: {line!r}")
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * _DTYPE.itemsize
        if end > len(data):
            raise CheckpointError(f"检查点数据段过短: 参数 {name}")
        array = np.frombuffer(data[offset:end], dtype=_DTYPE).reshape(shape)
        state[name] = array.astype(np.float64)
    return state


def select_prefix(state: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    """取出以 prefix 开头的参数并去掉前缀"""
    return {n[len(prefix) :]: v for n, v in state.items() if n.startswith(prefix)}
