"""
splitstream 数据模块

提供实验所用的数据集：CIFAR-10 二进制格式、IDX 格式（如 MNIST）以及确定性的合成高斯数据，
并负责逐 epoch 的确定性打乱与分批。

CIFAR-10 的逐通道均值/标准差只计算一次，以 parquet 缓存在数据目录下。
"""

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.parquet as pq

from splitstream.utils.errors import FormatError, ValidationError, validate_positive
from splitstream.utils.logger import logger
from splitstream.utils.util import seeded_rng

if TYPE_CHECKING:
    from splitstream.core.config import DatasetSpec

DATA_ENV = 'SPLITSTREAM_DATA'

CIFAR_RECORD_SIZE = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f'data_batch_{i}.bin' for i in range(1, 6))
CIFAR_TEST_FILE = 'test_batch.bin'
CIFAR_SUBDIR = 'cifar-10-batches-bin'
STATS_CACHE = 'splitstream_channel_stats.parquet'

IDX_DEFAULT_FILES = {
    'train_images': 'train-images-idx3-ubyte',
    'train_labels': 'train-labels-idx1-ubyte',
    'test_images': 't10k-images-idx3-ubyte',
    'test_labels': 't10k-labels-idx1-ubyte',
}

MIN_BATCH = 2
SYNTH_SEPARATION = 3.0


@dataclass
class Dataset:
    """
    训练/测试数据

    Attributes:
        name (str): 数据集名称
        x_train (np.ndarray): 训练输入，[N, C, H, W] 或 [N, D]，单精度
        y_train (np.ndarray): 训练标签，已重映射到 [0, num_classes)
        x_test (np.ndarray): 测试输入
        y_test (np.ndarray): 测试标签
        classes (tuple): 重映射前的原始类别编号
    """
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: Tuple[int, ...]

    def __post_init__(self):
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise ValidationError("样本数与标签数不一致")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    def __repr__(self):
        return (f"Dataset(name={self.name!r}, train={len(self.y_train)}, test={len(self.y_test)}, "
                f"classes={self.num_classes}, input_shape={self.input_shape})")


def data_root(root: Optional[Union[str, Path]] = None) -> Path:
    """数据根目录：环境变量 SPLITSTREAM_DATA 优先，其次参数，最后 ./data"""
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    return Path(root) if root else Path.cwd() / 'data'


# ── 类别过滤 ──

def _select_classes(x: np.ndarray, y: np.ndarray, subset: Optional[Sequence[int]],
                    per_class: Optional[int]) -> Tuple[np.ndarray, np.ndarray, Tuple[int, ...]]:
    """
    保留 subset 中的类别（按出现顺序截取每类前 per_class 个），标签重映射为 subset 中的位置
    """
    classes = tuple(int(c) for c in (subset if subset is not None else np.unique(y)))
    if len(set(classes)) != len(classes):
        raise ValidationError(f"类别子集有重复: {classes}")
    if len(classes) < 2:
        raise ValidationError(f"至少需要 2 个类别，got {classes}")
    keep = []
    for c in classes:
        idx = np.flatnonzero(y == c)
        if per_class is not None:
            idx = idx[:per_class]
        keep.append(idx)
    order = np.sort(np.concatenate(keep))
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[int(v)] for v in y[order]], dtype=np.int64)
    return x[order], labels, classes


# ── CIFAR-10 ──

def read_cifar10_file(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """
    读取一个 CIFAR-10 二进制批次文件

    每条记录 3073 字节：1 字节标签 + 3072 字节像素（R、G、B 平面各 32×32）。

    Returns:
        (images, labels): images 为 [N, 3, 32, 32] uint8，labels 为 [N] uint8

    Raises:
        FormatError: 文件大小不是 3073 的整数倍
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_SIZE:
        raise FormatError(f"{path} 大小 {raw.size} 字节不是 {CIFAR_RECORD_SIZE} 的整数倍")
    records = raw.reshape(-1, CIFAR_RECORD_SIZE)
    return records[:, 1:].reshape(-1, *CIFAR_SHAPE), records[:, 0].copy()


def channel_stats(images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """[0, 1] 缩放后逐通道的均值与标准差（双精度）"""
    scaled = images.astype(np.float64) / 255.0
    axes = (0,) + tuple(range(2, scaled.ndim))
    return scaled.mean(axis=axes), scaled.std(axis=axes)


def _cifar_dir(root: Path) -> Path:
    nested = root / CIFAR_SUBDIR
    return nested if nested.is_dir() else root


def cached_channel_stats(directory: Path, train_files: Sequence[Path]) -> Tuple[np.ndarray, np.ndarray]:
    """
    读取或计算训练集逐通道统计量

    缓存文件不存在时扫描全部训练文件计算并写入；目录不可写时只记录警告。
    """
    path = directory / STATS_CACHE
    if path.exists():
        table = pd.read_parquet(path)
        return table['mean'].to_numpy(np.float64), table['std'].to_numpy(np.float64)

    images = np.concatenate([read_cifar10_file(f)[0] for f in train_files])
    mean, std = channel_stats(images)
    table = pd.DataFrame({'channel': np.arange(len(mean)), 'mean': mean, 'std': std})
    try:
        pq.write_table(pa.Table.from_pandas(table, preserve_index=False), path)
        logger.info(f"通道统计量已缓存到 {path}")
    except OSError as e:
        logger.warning(f"无法写入统计量缓存 {path}: {e}")
    return mean, std


def _normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    view = (1, -1) + (1,) * (images.ndim - 2)
    scaled = images.astype(np.float64) / 255.0
    return ((scaled - mean.reshape(view)) / std.reshape(view)).astype(np.float32)


def load_cifar10_binary(root: Optional[Union[str, Path]] = None, subset: Optional[Sequence[int]] = None,
                        train_per_class: Optional[int] = None,
                        test_per_class: Optional[int] = None) -> Dataset:
    """
    加载 CIFAR-10 二进制数据集

    Args:
        root: 数据目录（含 data_batch_*.bin 或其上一级 cifar-10-batches-bin 目录）
        subset: 保留的类别编号，标签按其顺序重映射；缺省保留全部 10 类
        train_per_class: 每类最多保留的训练样本数
        test_per_class: 每类最多保留的测试样本数

    Raises:
        FileNotFoundError: 数据文件缺失
        FormatError: 文件大小不合法
    """
    directory = _cifar_dir(data_root(root))
    train_files = [directory / name for name in CIFAR_TRAIN_FILES]
    test_file = directory / CIFAR_TEST_FILE
    missing = [str(p) for p in train_files + [test_file] if not p.exists()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 文件缺失: {missing}")

    mean, std = cached_channel_stats(directory, train_files)
    parts = [read_cifar10_file(f) for f in train_files]
    x_train = np.concatenate([p[0] for p in parts])
    y_train = np.concatenate([p[1] for p in parts])
    x_test, y_test = read_cifar10_file(test_file)

    x_train, y_train, classes = _select_classes(x_train, y_train, subset, train_per_class)
    x_test, y_test, _ = _select_classes(x_test, y_test, classes, test_per_class)
    dataset = Dataset('cifar10', _normalize(x_train, mean, std), y_train,
                      _normalize(x_test, mean, std), y_test, classes)
    logger.info(f"CIFAR-10 加载完成: {dataset}")
    return dataset


# ── IDX ──

_IDX_DTYPES = {0x08: np.dtype('>u1')}


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """
    读取一对 IDX 文件（图像 + 标签）

    灰度图复制为 3 通道，边长不足 32 时居中补零到 32×32。

    Returns:
        (images, labels): images 为 [N, 3, S, S] uint8，labels 为 [N] uint8

    Raises:
        FormatError: 魔数、数据类型或长度不符
    """
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path} 应为 3 维图像数据，got {images.ndim} 维")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise FormatError(f"标签数量 {labels.shape} 与图像数量 {images.shape[0]} 不一致")
    n, h, w = images.shape
    side = max(32, h, w)
    top, left = (side - h) // 2, (side - w) // 2
    padded = np.zeros((n, side, side), dtype=np.uint8)
    padded[:, top:top + h, left:left + w] = images
    return np.repeat(padded[:, None], 3, axis=1), labels


def _read_idx(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path} 过短，不是 IDX 文件")
    zero, code, ndim = struct.unpack_from('>HBB', raw, 0)
    if zero != 0 or code not in _IDX_DTYPES:
        raise FormatError(f"{path} 不是受支持的 IDX 文件（magic={raw[:4].hex()}）")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path} 维度信息被截断")
    shape = struct.unpack_from(f'>{ndim}I', raw, 4)
    dtype = _IDX_DTYPES[code]
    expected = header + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path} 大小 {len(raw)} 与头部声明的 {expected} 字节不一致")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(shape).astype(np.uint8)


def load_idx_dataset(root: Optional[Union[str, Path]] = None, subset: Optional[Sequence[int]] = None,
                     train_per_class: Optional[int] = None, test_per_class: Optional[int] = None,
                     files: Optional[dict] = None) -> Dataset:
    """加载 IDX 格式的训练/测试集，按训练集逐通道统计量归一化"""
    directory = data_root(root)
    files = {**IDX_DEFAULT_FILES, **(files or {})}
    x_train, y_train = load_idx(directory / files['train_images'], directory / files['train_labels'])
    x_test, y_test = load_idx(directory / files['test_images'], directory / files['test_labels'])
    mean, std = channel_stats(x_train)
    std = np.where(std > 0, std, 1.0)
    x_train, y_train, classes = _select_classes(x_train, y_train, subset, train_per_class)
    x_test, y_test, _ = _select_classes(x_test, y_test, classes, test_per_class)
    return Dataset('idx', _normalize(x_train, mean, std), y_train, _normalize(x_test, mean, std), y_test, classes)


# ── 合成数据 ──

def synth_dataset(classes: int, dims: int, n_per_class: int, seed: int,
                  test_per_class: Optional[int] = None,
                  image_shape: Optional[Sequence[int]] = None) -> Dataset:
    """
    生成高斯团合成数据

    类别 k 的均值为 3·q_k，q_k 为随机正交基的第 k 列，各向同性方差 1；
    同一种子总是生成相同的数据。

    Args:
        classes: 类别数，至少为 2，且不超过 dims
        dims: 特征维度
        n_per_class: 每类训练样本数
        seed: 随机种子
        test_per_class: 每类测试样本数，缺省为 n_per_class // 4（至少 1）
        image_shape: 给定时把特征重排为 [C, H, W]，其乘积必须等于 dims
    """
    if classes < 2:
        raise ValidationError(f"classes 至少为 2，got {classes}")
    validate_positive(n_per_class, 'n_per_class')
    if dims < classes:
        raise ValidationError(f"dims 不能小于 classes，got dims={dims}, classes={classes}")
    if image_shape is not None and int(np.prod(image_shape)) != dims:
        raise ValidationError(f"image_shape {tuple(image_shape)} 与 dims={dims} 不一致")
    test_per_class = test_per_class if test_per_class is not None else max(1, n_per_class // 4)

    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dims, classes)))
    means = SYNTH_SEPARATION * basis.T

    def draw(count: int):
        x = np.concatenate([means[k] + rng.standard_normal((count, dims)) for k in range(classes)])
        y = np.repeat(np.arange(classes, dtype=np.int64), count)
        order = rng.permutation(len(y))
        x = x[order].astype(np.float32)
        if image_shape is not None:
            x = x.reshape(len(y), *image_shape)
        return x, y[order]

    x_train, y_train = draw(n_per_class)
    x_test, y_test = draw(test_per_class)
    return Dataset('synthetic', x_train, y_train, x_test, y_test, tuple(range(classes)))


def class_means(dataset: Dataset) -> np.ndarray:
    """训练集各类别的样本均值 [classes, D]"""
    flat = dataset.x_train.reshape(len(dataset.y_train), -1).astype(np.float64)
    return np.stack([flat[dataset.y_train == k].mean(axis=0) for k in range(dataset.num_classes)])


# ── 分批 ──

def iter_batches(x: np.ndarray, y: np.ndarray, batch_size: int, seed: int = 0, epoch: int = 0,
                 shuffle: bool = True) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    按批迭代

    打乱顺序由 seeded_rng(seed, epoch) 决定；不足 2 个样本的末尾批次被丢弃
    （训练模式的批归一化需要至少 2 个样本）。
    """
    validate_positive(batch_size, 'batch_size')
    n = len(y)
    order = seeded_rng(seed, epoch).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < MIN_BATCH:
            break
        yield x[idx], y[idx]


def num_batches(n: int, batch_size: int) -> int:
    """iter_batches 产出的批次数"""
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= MIN_BATCH else 0)


def eval_batches(x: np.ndarray, y: np.ndarray, batch_size: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """评估用的顺序分批，保留任意大小的末尾批次"""
    return [(x[s:s + batch_size], y[s:s + batch_size]) for s in range(0, len(y), batch_size)]


def load_dataset(spec: 'DatasetSpec', seed: int = 0) -> Dataset:
    """
    按配置加载数据集

    Raises:
        ValidationError: 未知的数据集类型
    """
    if spec.kind == 'cifar10-binary':
        return load_cifar10_binary(spec.root, spec.subset, spec.train_per_class, spec.test_per_class)
    if spec.kind == 'idx':
        return load_idx_dataset(spec.root, spec.subset, spec.train_per_class, spec.test_per_class, spec.files)
    if spec.kind == 'synthetic':
        return synth_dataset(spec.classes, spec.dims, spec.n_per_class,
                             seed if spec.seed is None else spec.seed,
                             spec.test_per_class, spec.image_shape)
    raise ValidationError(f"未知的数据集类型: {spec.kind}")
