"""
splitstream 检查点模块

文件布局（小端）::

    magic 'SPLT' | version u8 | 记录数 u32
    每条记录: 名称长度 u16 | 名称 utf-8 | dtype 代码 u8 | 维数 u8 | 各维长度 u32 | 原始数值
"""

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from splitstream.utils.errors import FormatError, ValidationError

MAGIC = b'SPLT'
VERSION = 1

_HEAD = struct.Struct('<4sBI')
_NAME_LEN = struct.Struct('<H')
_TYPE_RANK = struct.Struct('<BB')

DTYPE_CODES = {
    1: np.dtype('<f4'),
    2: np.dtype('<f8'),
    3: np.dtype('<i8'),
    4: np.dtype('<u1'),
}
_CODE_OF = {dt.str: code for code, dt in DTYPE_CODES.items()}


def encode_checkpoint(arrays: Dict[str, np.ndarray]) -> bytes:
    """把命名数组序列化为检查点字节串（按名称排序，输出确定）"""
    parts = [_HEAD.pack(MAGIC, VERSION, len(arrays))]
    for name in sorted(arrays):
        value = np.asarray(arrays[name])
        le = value.dtype.newbyteorder('<')
        code = _CODE_OF.get(le.str)
        if code is None:
            raise ValidationError(f"不支持的 dtype: {value.dtype}（{name}）")
        raw_name = name.encode('utf-8')
        if len(raw_name) > 0xFFFF or value.ndim > 0xFF:
            raise ValidationError(f"名称过长或维数过多: {name}")
        parts.append(_NAME_LEN.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_TYPE_RANK.pack(code, value.ndim))
        parts.append(struct.pack(f'<{value.ndim}I', *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=le).tobytes())
    return b''.join(parts)


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    """
    解析检查点字节串

    Raises:
        FormatError: 魔数、版本、dtype 代码不符或数据被截断
    """
    view = memoryview(blob)
    if len(view) < _HEAD.size:
        raise FormatError("检查点文件过短")
    magic, version, count = _HEAD.unpack_from(view, 0)
    if magic != MAGIC:
        raise FormatError(f"检查点魔数错误: {bytes(magic)!r}")
    if version != VERSION:
        raise FormatError(f"不支持的检查点版本: {version}")

    offset = _HEAD.size
    arrays: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack_from(view, offset)
            offset += _NAME_LEN.size
            name = bytes(view[offset:offset + name_len]).decode('utf-8')
            if len(name.encode('utf-8')) != name_len:
                raise FormatError("检查点记录名称被截断")
            offset += name_len
            code, rank = _TYPE_RANK.unpack_from(view, offset)
            offset += _TYPE_RANK.size
            if code not in DTYPE_CODES:
                raise FormatError(f"未知的 dtype 代码: {code}（{name}）")
            shape = struct.unpack_from(f'<{rank}I', view, offset)
            offset += 4 * rank
            dtype = DTYPE_CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(view):
                raise FormatError(f"检查点记录 {name} 数据被截断")
            arrays[name] = np.frombuffer(view[offset:offset + nbytes], dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
            offset += nbytes
    except struct.error as e:
        raise FormatError(f"检查点被截断: {e}") from e
    except UnicodeDecodeError as e:
        raise FormatError(f"检查点记录名称不是合法的 utf-8: {e}") from e
    if offset != len(view):
        raise FormatError(f"检查点末尾存在 {len(view) - offset} 字节多余数据")
    return arrays


def save_checkpoint(path: Union[str, Path], arrays: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(arrays))
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    读取检查点文件

    Raises:
        FormatError: 文件格式错误
        FileNotFoundError: 文件不存在
    """
    return decode_checkpoint(Path(path).read_bytes())
