"""
splitstream 模型模块

构建实验所用的骨干网络并把分割点作为一等对象暴露出来。

层编号规则：卷积、批归一化、池化、全连接各占一个编号（从 1 开始）；
ReLU 与展平并入前一个编号层。分割点 n 表示编号 1..n 的层（含其后并入的
ReLU/展平）在客户端运行。VGG11-like（宽度系数 w）的编号如下::

    1 conv 64w    2 bn+relu    3 pool       4 conv 128w   5 bn+relu    6 pool
    7 conv 256w   8 bn+relu    9 conv 256w 10 bn+relu    11 pool
   12 conv 512w  13 bn+relu   14 conv 512w 15 bn+relu    16 pool
   17 conv 512w  18 bn+relu   19 conv 512w 20 bn+relu    21 pool+flatten
   22 fc+relu    23 fc+relu   24 fc

n = 5 时分割点特征图为 128w × 16 × 16。
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from splitstream.core import ops
from splitstream.core.compression import CompressionConfig, FilterVector, init_compression
from splitstream.core.tensor import Parameter, Tensor, kaiming_uniform
from splitstream.utils.errors import DimensionError, ValidationError, validate_positive

COUNTED_KINDS = ('conv', 'batchnorm', 'maxpool', 'dense')
FOLDED_KINDS = ('relu', 'flatten')

VGG11_CHANNELS = (64, 'M', 128, 'M', 256, 256, 'M', 512, 512, 'M', 512, 512, 'M')
VGG11_HIDDEN = 512


@dataclass(frozen=True)
class LayerSpec:
    """
    单层描述

    Attributes:
        kind (str): conv | dense | relu | maxpool | batchnorm | flatten
        index (int): 层编号；relu/flatten 取前一个编号层的编号
        in_size (int): 输入通道数或特征数
        out_size (int): 输出通道数或特征数
        kernel (int): 卷积核或池化窗口大小
        stride (int): 步长
        padding (int): 填充
    """
    kind: str
    index: int
    in_size: int = 0
    out_size: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in COUNTED_KINDS + FOLDED_KINDS:
            raise ValidationError(f"未知的层类型: {self.kind}")

    @property
    def counted(self) -> bool:
        return self.kind in COUNTED_KINDS


class _LayerBuilder:
    """按编号规则依次追加层"""

    def __init__(self):
        self.layers: List[LayerSpec] = []
        self.index = 0

    def counted(self, kind: str, **kwargs):
        self.index += 1
        self.layers.append(LayerSpec(kind, self.index, **kwargs))

    def folded(self, kind: str):
        if self.index == 0:
            raise ValidationError(f"{kind} 不能作为第一层")
        self.layers.append(LayerSpec(kind, self.index))


def build_vgg11_like(num_classes: int, width_scale: float = 1.0, in_channels: int = 3,
                     image_size: int = 32) -> List[LayerSpec]:
    """
    构建 VGG11 风格网络（8 个卷积 + 3 个全连接，每个卷积后接批归一化和 ReLU）

    Args:
        num_classes: 类别数，至少为 2
        width_scale: 通道宽度系数，取值 (0, 1]，各层通道数向上取整
        in_channels: 输入通道数
        image_size: 输入图像边长，必须能被 32 整除

    Returns:
        List[LayerSpec]: 层列表
    """
    if num_classes < 2:
        raise ValidationError(f"num_classes 至少为 2，got {num_classes}")
    if not 0 < width_scale <= 1:
        raise ValidationError(f"width_scale 必须在 (0, 1] 范围内，got {width_scale}")
    if image_size % 32 != 0:
        raise ValidationError(f"image_size 必须能被 32 整除，got {image_size}")

    b = _LayerBuilder()
    channels = in_channels
    for item in VGG11_CHANNELS:
        if item == 'M':
            b.counted('maxpool', kernel=2, stride=2)
            continue
        width = math.ceil(item * width_scale)
        b.counted('conv', in_size=channels, out_size=width, kernel=3, stride=1, padding=1)
        b.counted('batchnorm', in_size=width, out_size=width)
        b.folded('relu')
        channels = width
    b.folded('flatten')

    side = image_size // 32
    hidden = math.ceil(VGG11_HIDDEN * width_scale)
    b.counted('dense', in_size=channels * side * side, out_size=hidden)
    b.folded('relu')
    b.counted('dense', in_size=hidden, out_size=hidden)
    b.folded('relu')
    b.counted('dense', in_size=hidden, out_size=num_classes)
    return b.layers


def build_mlp(layer_widths: Sequence[int]) -> List[LayerSpec]:
    """
    构建多层感知机：全连接 + ReLU 堆叠，最后一层不接 ReLU

    Args:
        layer_widths: 各层宽度，首项为输入维度，末项为类别数

    Raises:
        ValidationError: 宽度少于 2 个或存在非正宽度
    """
    widths = list(layer_widths)
    if len(widths) < 2:
        raise ValidationError(f"layer_widths 至少需要 2 个宽度，got {widths}")
    for w in widths:
        validate_positive(w, "layer width")
    b = _LayerBuilder()
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        b.counted('dense', in_size=w_in, out_size=w_out)
        if i < len(widths) - 2:
            b.folded('relu')
    return b.layers


def default_input_shape(layers: Sequence[LayerSpec], image_size: int = 32) -> Tuple[int, ...]:
    first = layers[0]
    if first.kind == 'dense':
        return (first.in_size,)
    if first.kind == 'conv':
        return (first.in_size, image_size, image_size)
    raise ValidationError(f"无法从首层 {first.kind} 推断输入形状")


def layer_count(layers: Sequence[LayerSpec]) -> int:
    """编号层的数量 L"""
    return sum(1 for s in layers if s.counted)


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Tuple[int, ...]) -> List[Tuple[int, ...]]:
    """
    逐层推断输出形状（不含 batch 维）并校验相邻层能否衔接

    Raises:
        DimensionError: 相邻层形状不衔接
    """
    shape = tuple(input_shape)
    shapes = []
    for spec in layers:
        kind = spec.kind
        if kind == 'conv':
            if len(shape) != 3 or shape[0] != spec.in_size:
                raise DimensionError(f"第 {spec.index} 层 conv 期望输入通道 {spec.in_size}，got {shape}")
            c, h, w = shape
            k, s, p = spec.kernel, spec.stride, spec.padding
            if k > h + 2 * p or k > w + 2 * p:
                raise DimensionError(f"第 {spec.index} 层卷积核大于输入 {shape}")
            shape = (spec.out_size, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif kind == 'batchnorm':
            if shape[0] != spec.in_size:
                raise DimensionError(f"第 {spec.index} 层 batchnorm 期望 {spec.in_size} 通道，got {shape}")
        elif kind == 'maxpool':
            if len(shape) != 3 or spec.kernel > shape[1] or spec.kernel > shape[2]:
                raise DimensionError(f"第 {spec.index} 层池化窗口大于输入 {shape}")
            c, h, w = shape
            shape = (c, (h - spec.kernel) // spec.stride + 1, (w - spec.kernel) // spec.stride + 1)
        elif kind == 'flatten':
            shape = (int(np.prod(shape)),)
        elif kind == 'dense':
            if len(shape) != 1 or shape[0] != spec.in_size:
                raise DimensionError(f"第 {spec.index} 层 dense 期望输入 {spec.in_size} 维，got {shape}")
            shape = (spec.out_size,)
        shapes.append(shape)
    return shapes


def describe_layers(layers: Sequence[LayerSpec], input_shape: Optional[Tuple[int, ...]] = None) -> pd.DataFrame:
    """
    层编号表：每个编号层一行，列为 index、kinds、output_shape

    并入的 relu/flatten 追加在 kinds 中，output_shape 为并入后的形状。
    """
    input_shape = input_shape or default_input_shape(layers)
    shapes = infer_shapes(layers, input_shape)
    rows: Dict[int, dict] = {}
    for spec, shape in zip(layers, shapes):
        row = rows.setdefault(spec.index, {'index': spec.index, 'kinds': [], 'output_shape': None})
        row['kinds'].append(spec.kind)
        row['output_shape'] = shape
    table = pd.DataFrame(list(rows.values()))
    table['kinds'] = table['kinds'].map('+'.join)
    return table


# ── 参数 ──

@dataclass
class ModelState:
    """
    一个会话持有的参数与 running 统计量

    Attributes:
        params (dict): 参数名到 Parameter，命名形如 '4.weight'、'compress.f_hat'
        buffers (dict): 批归一化 running 统计量，命名形如 '5.running_mean'
    """
    params: Dict[str, Parameter] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def filter(self) -> FilterVector:
        return FilterVector(self.params['compress.f_hat'])

    def learnable(self) -> List[Parameter]:
        return [p for p in self.params.values() if p.learnable]

    def subset(self, prefixes: Iterable[str]) -> 'ModelState':
        """按名称前缀取子集（共享同一批对象）"""
        prefixes = tuple(prefixes)
        return ModelState(
            params={k: v for k, v in self.params.items() if k.startswith(prefixes)},
            buffers={k: v for k, v in self.buffers.items() if k.startswith(prefixes)},
        )

    def merged(self, other: 'ModelState') -> 'ModelState':
        overlap = set(self.params) & set(other.params)
        if overlap:
            raise ValidationError(f"参数集合重叠: {sorted(overlap)}")
        return ModelState({**self.params, **other.params}, {**self.buffers, **other.buffers})

    def copy(self, dtype=None) -> 'ModelState':
        """深拷贝，可选转换 dtype"""
        params = {k: p.clone(dtype) for k, p in self.params.items()}
        buffers = {k: (b.copy() if dtype is None else b.astype(dtype)) for k, b in self.buffers.items()}
        return ModelState(params, buffers)

    def arrays(self) -> Dict[str, np.ndarray]:
        """全部参数与统计量的快照（用于检查点）"""
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: b.copy() for k, b in self.buffers.items()})
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True):
        """
        按名称原地载入数值

        Raises:
            ValidationError: strict 模式下名称缺失
            DimensionError: 形状不一致
        """
        names = set(self.params) | set(self.buffers)
        if strict and names - set(arrays):
            raise ValidationError(f"检查点缺少以下条目: {sorted(names - set(arrays))}")
        for name, value in arrays.items():
            target = self.params[name].data if name in self.params else self.buffers.get(name)
            if target is None:
                if strict:
                    raise ValidationError(f"检查点包含未知条目: {name}")
                continue
            if target.shape != value.shape:
                raise DimensionError(f"{name} 形状不一致: {target.shape} vs {value.shape}")
            target[...] = value


def init_backbone(layers: Sequence[LayerSpec], rng: np.random.Generator, dtype=np.float32) -> ModelState:
    """按层顺序初始化骨干参数：卷积/全连接 Kaiming 均匀、偏置 0、BN gamma=1 beta=0"""
    state = ModelState()

    def add(name, data):
        state.params[name] = Parameter(data, name=name, dtype=dtype)

    for spec in layers:
        i = spec.index
        if spec.kind == 'conv':
            k = spec.kernel
            add(f'{i}.weight', kaiming_uniform(rng, (spec.out_size, spec.in_size, k, k),
                                               spec.in_size * k * k, dtype))
            add(f'{i}.bias', np.zeros(spec.out_size, dtype))
        elif spec.kind == 'dense':
            add(f'{i}.weight', kaiming_uniform(rng, (spec.in_size, spec.out_size), spec.in_size, dtype))
            add(f'{i}.bias', np.zeros(spec.out_size, dtype))
        elif spec.kind == 'batchnorm':
            add(f'{i}.weight', np.ones(spec.out_size, dtype))
            add(f'{i}.bias', np.zeros(spec.out_size, dtype))
            state.buffers[f'{i}.running_mean'] = np.zeros(spec.out_size, dtype)
            state.buffers[f'{i}.running_var'] = np.ones(spec.out_size, dtype)
    return state


def forward_layers(layers: Sequence[LayerSpec], x: Tensor, state: ModelState, train: bool = True) -> Tensor:
    """依次执行各层前向"""
    p = state.params
    for spec in layers:
        i = spec.index
        if spec.kind == 'conv':
            x = ops.conv2d(x, p[f'{i}.weight'], p[f'{i}.bias'], stride=spec.stride, padding=spec.padding)
        elif spec.kind == 'batchnorm':
            x = ops.batchnorm(x, p[f'{i}.weight'], p[f'{i}.bias'], state.buffers[f'{i}.running_mean'],
                              state.buffers[f'{i}.running_var'], train=train)
        elif spec.kind == 'relu':
            x = ops.relu(x)
        elif spec.kind == 'maxpool':
            x = ops.maxpool2d(x, kernel=spec.kernel, stride=spec.stride)
        elif spec.kind == 'flatten':
            x = ops.flatten(x)
        elif spec.kind == 'dense':
            x = ops.dense(x, p[f'{i}.weight'], p[f'{i}.bias'])
    return x


# ── 分割 ──

@dataclass(frozen=True)
class SplitModel:
    """
    在编号 n 之后分割的模型

    Attributes:
        layers (list): 全部层
        client_layers (list): 编号 1..n 的层（含并入的 relu/flatten）
        server_layers (list): 编号 n+1..L 的层
        split_index (int): 分割点 n
        compression_cfg (CompressionConfig): 已补全的压缩配置
        input_shape (tuple): 输入形状（不含 batch 维）
        split_shape (tuple): l_n 的形状（不含 batch 维）
        num_classes (int): 输出类别数
    """
    layers: Tuple[LayerSpec, ...]
    client_layers: Tuple[LayerSpec, ...]
    server_layers: Tuple[LayerSpec, ...]
    split_index: int
    compression_cfg: CompressionConfig
    input_shape: Tuple[int, ...]
    split_shape: Tuple[int, ...]
    num_classes: int

    @property
    def phi(self) -> int:
        return self.compression_cfg.phi

    @property
    def phi_tilde(self) -> int:
        return self.compression_cfg.phi_tilde

    @property
    def num_layers(self) -> int:
        return layer_count(self.layers)

    def init_state(self, seed: int, dtype=np.float32) -> ModelState:
        """
        完整初始化：先按层顺序初始化骨干，再初始化压缩/解压模块

        同一种子下骨干参数与 init_backbone 完全一致。
        """
        rng = np.random.default_rng(seed)
        state = init_backbone(self.layers, rng, dtype)
        params, buffers = init_compression(self.compression_cfg, rng, dtype)
        state.params.update(params)
        state.buffers.update(buffers)
        return state

    def client_prefixes(self) -> Tuple[str, ...]:
        return tuple(f'{i}.' for i in self._indices(self.client_layers)) + ('compress.',)

    def server_prefixes(self) -> Tuple[str, ...]:
        return tuple(f'{i}.' for i in self._indices(self.server_layers)) + ('decompress.',)

    def client_state(self, state: ModelState) -> ModelState:
        return state.subset(self.client_prefixes())

    def server_state(self, state: ModelState) -> ModelState:
        return state.subset(self.server_prefixes())

    @staticmethod
    def _indices(layers: Sequence[LayerSpec]) -> List[int]:
        return sorted({s.index for s in layers if s.counted})


def split_at(layers: Sequence[LayerSpec], n: int, compression_cfg: Optional[CompressionConfig] = None,
             input_shape: Optional[Tuple[int, ...]] = None) -> SplitModel:
    """
    在编号 n 之后分割模型并补全压缩配置

    Args:
        layers: 层列表
        n: 分割点，0 ≤ n < L；n = 0 表示直接压缩原始输入
        compression_cfg: 压缩配置，缺省为 r=1、φ=φ̃
        input_shape: 输入形状，缺省由首层推断

    Raises:
        ValidationError: n 越界，或向量特征上使用 r > 1
    """
    compression_cfg = compression_cfg or CompressionConfig()
    layers = tuple(layers)
    total = layer_count(layers)
    if not 0 <= n < total:
        raise ValidationError(f"分割点 n 必须在 [0, {total}) 范围内，got {n}")
    input_shape = tuple(input_shape or default_input_shape(layers))
    shapes = infer_shapes(layers, input_shape)

    client = tuple(s for s in layers if s.index <= n)
    server = tuple(s for s in layers if s.index > n)
    split_shape = shapes[len(client) - 1] if client else input_shape
    spatial = tuple(split_shape[1:]) if len(split_shape) == 3 else None
    cfg = compression_cfg.resolve(split_shape[0], spatial)
    return SplitModel(
        layers=layers,
        client_layers=client,
        server_layers=server,
        split_index=n,
        compression_cfg=cfg,
        input_shape=input_shape,
        split_shape=tuple(split_shape),
        num_classes=shapes[-1][0],
    )


def unsplit_forward(model: SplitModel, x: Tensor, state: ModelState, train: bool = True) -> Tensor:
    """不经过压缩模块的完整前向"""
    return forward_layers(model.layers, x, state, train=train)
