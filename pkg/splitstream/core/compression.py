"""
splitstream 压缩模块

分割点上的可学习瓶颈：

- 压缩模块（客户端）：分辨率卷积（核 2+r、步长 r、填充 r）→ 批归一化 → 逐通道乘以
  f = sigmoid(f̂)（"mul"）；
- 通道选择：按 f 取前 b 个通道发送；
- 解压模块（服务端）：未收到的通道补零 → 转置卷积恢复分辨率 → 批归一化；
- pruneLoss / totalLoss 以及 prune 阶段切换时使用的 reset_prune。

向量特征（MLP 或展平之后的分割点）不做分辨率压缩，卷积退化为 φ̃→φ 的全连接。
"""

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple, Union

import numpy as np

from splitstream.core import ops
from splitstream.core.tensor import Parameter, Tensor, kaiming_uniform
from splitstream.utils.errors import DimensionError, ValidationError, validate_positive, validate_range

if TYPE_CHECKING:
    from splitstream.core.model import ModelState

F_HAT_INIT_RANGE = 0.1
DEFAULT_RESET_THRESHOLD = 0.5


@dataclass(frozen=True)
class CompressionConfig:
    """
    压缩模块配置

    split_at 会补全 phi_tilde 与 spatial；未补全的配置只能用于描述，不能直接前向计算。

    Attributes:
        r (int): 分辨率压缩因子，卷积核 2+r、步长 r、填充 r
        phi (int | None): 压缩卷积输出通道数 φ，缺省等于 φ̃
        phi_tilde (int | None): 分割点处的通道数 φ̃
        spatial (tuple | None): 分割点特征图的 (H, W)；向量特征为 None
        bypass (bool): 恒等模式，仅用于等价性测试
        kernel (int | None): 覆盖卷积核大小（复现实验用），缺省 2+r
    """
    r: int = 1
    phi: Optional[int] = None
    phi_tilde: Optional[int] = None
    spatial: Optional[Tuple[int, int]] = None
    bypass: bool = False
    kernel: Optional[int] = None

    def __post_init__(self):
        validate_positive(self.r, 'r')
        if self.kernel is not None:
            validate_positive(self.kernel, 'kernel')
        if self.phi is not None:
            validate_positive(self.phi, 'phi')
        if self.phi is not None and self.phi_tilde is not None and self.phi > self.phi_tilde:
            raise ValidationError(f"phi 不能大于 phi_tilde，got phi={self.phi}, phi_tilde={self.phi_tilde}")
        if self.bypass and self.phi is not None and self.phi_tilde is not None and self.phi != self.phi_tilde:
            raise ValidationError("恒等模式要求 phi == phi_tilde")

    @property
    def kernel_size(self) -> int:
        return self.kernel if self.kernel is not None else 2 + self.r

    @property
    def stride(self) -> int:
        return self.r

    @property
    def padding(self) -> int:
        return self.r

    @property
    def resolved(self) -> bool:
        return self.phi is not None and self.phi_tilde is not None

    @property
    def vector(self) -> bool:
        return self.spatial is None

    def resolve(self, phi_tilde: int, spatial: Optional[Tuple[int, int]]) -> 'CompressionConfig':
        """
        以分割点的通道数和空间尺寸补全配置

        Raises:
            ValidationError: 向量特征要求 r=1，或 phi 超过 phi_tilde
        """
        if spatial is None and self.r != 1:
            raise ValidationError(f"向量特征不支持分辨率压缩，r 必须为 1，got {self.r}")
        phi = self.phi if self.phi is not None else phi_tilde
        if self.bypass:
            phi = phi_tilde
        cfg = replace(self, phi=phi, phi_tilde=phi_tilde,
                      spatial=None if spatial is None else (int(spatial[0]), int(spatial[1])))
        if not cfg.bypass and not cfg.vector:
            cfg.restore_padding()
        return cfg

    def compressed_spatial(self) -> Tuple[int, int]:
        """压缩后特征图的 (H', W')；向量特征为 (1, 1)"""
        if self.vector:
            return 1, 1
        if self.bypass:
            return self.spatial
        k, s, p = self.kernel_size, self.stride, self.padding
        h, w = self.spatial
        if k > h + 2 * p or k > w + 2 * p:
            raise DimensionError(f"卷积核 {k} 大于填充后的特征图 {h + 2 * p}x{w + 2 * p}")
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def restore_padding(self) -> int:
        """
        转置卷积的 output_padding，使解压输出恢复到 spatial

        Raises:
            DimensionError: 无法用 [0, r) 内的 output_padding 恢复原尺寸
        """
        k, s, p = self.kernel_size, self.stride, self.padding
        hc, wc = self.compressed_spatial()
        h, w = self.spatial
        pads = (h - ((hc - 1) * s - 2 * p + k), w - ((wc - 1) * s - 2 * p + k))
        if pads[0] != pads[1] or not 0 <= pads[0] < s:
            raise DimensionError(
                f"解压无法恢复 {h}x{w}：压缩后 {hc}x{wc}，所需 output_padding {pads} 不在 [0, {s}) 内"
            )
        return pads[0]


@dataclass(frozen=True)
class Budget:
    """
    通信预算

    Attributes:
        b (int): 实际发送的通道数
        B (float): pruneLoss 中 Σf 的目标值，缺省等于 b
    """
    b: int
    B: Optional[float] = None

    def __post_init__(self):
        validate_positive(self.b, 'b')
        if self.B is None:
            object.__setattr__(self, 'B', float(self.b))
        elif self.B < 0:
            raise ValidationError(f"B 不能为负数，got {self.B}")


@dataclass(frozen=True)
class LossWeights:
    """
    pruneLoss / totalLoss 权重

    Attributes:
        delta (float): 屏障陡峭程度 δ > 0
        lam (float): 反向屏障权重 λ ∈ [0, 1]
        epsilon (float): totalLoss 中 pruneLoss 的权重 ε ≥ 0
    """
    delta: float = 1.0
    lam: float = 0.5
    epsilon: float = 0.1

    def __post_init__(self):
        validate_positive(self.delta, 'delta')
        validate_range(self.lam, 0.0, 1.0, 'lambda')
        if self.epsilon < 0:
            raise ValidationError(f"epsilon 不能为负数，got {self.epsilon}")


class FilterVector:
    """
    通道门控向量

    包装可训练参数 f̂（长度 φ）；f = sigmoid(f̂) 每次读取时重新计算。
    """

    def __init__(self, f_hat: Parameter):
        if f_hat.ndim != 1:
            raise DimensionError(f"f_hat 必须是一维向量，got {f_hat.shape}")
        self.f_hat = f_hat

    @classmethod
    def init(cls, phi: int, rng: np.random.Generator, dtype=np.float32) -> 'FilterVector':
        data = rng.uniform(-F_HAT_INIT_RANGE, F_HAT_INIT_RANGE, size=phi).astype(dtype)
        return cls(Parameter(data, name='compress.f_hat', dtype=dtype))

    @property
    def phi(self) -> int:
        return self.f_hat.shape[0]

    @property
    def f(self) -> np.ndarray:
        return ops._sigmoid(self.f_hat.data)

    def tensor(self) -> Tensor:
        """记录到当前 Tape 的 f = sigmoid(f̂)"""
        return ops.sigmoid(self.f_hat)

    def __repr__(self):
        return f"FilterVector(phi={self.phi}, sum_f={float(self.f.sum()):.4f})"


# ── 参数初始化 ──

def init_compression(cfg: CompressionConfig, rng: np.random.Generator, dtype=np.float32):
    """
    初始化压缩/解压模块参数

    Returns:
        (params, buffers): 以 'compress.' / 'decompress.' 为前缀的参数字典和 running 统计量字典
    """
    if not cfg.resolved:
        raise ValidationError("CompressionConfig 尚未补全 phi / phi_tilde，请先调用 split_at")
    phi, phi_t = cfg.phi, cfg.phi_tilde
    params: Dict[str, Parameter] = {}
    buffers: Dict[str, np.ndarray] = {}

    def add(name, data):
        params[name] = Parameter(data, name=name, dtype=dtype)

    if not cfg.bypass:
        k = cfg.kernel_size
        if cfg.vector:
            add('compress.weight', kaiming_uniform(rng, (phi_t, phi), phi_t, dtype))
            add('decompress.weight', kaiming_uniform(rng, (phi, phi_t), phi, dtype))
        else:
            add('compress.weight', kaiming_uniform(rng, (phi, phi_t, k, k), phi_t * k * k, dtype))
            add('decompress.weight', kaiming_uniform(rng, (phi, phi_t, k, k), phi * k * k, dtype))
        add('compress.bias', np.zeros(phi, dtype))
        add('decompress.bias', np.zeros(phi_t, dtype))
        for prefix, c in (('compress.bn', phi), ('decompress.bn', phi_t)):
            add(f'{prefix}.weight', np.ones(c, dtype))
            add(f'{prefix}.bias', np.zeros(c, dtype))
            buffers[f'{prefix}.running_mean'] = np.zeros(c, dtype)
            buffers[f'{prefix}.running_var'] = np.ones(c, dtype)

    params['compress.f_hat'] = FilterVector.init(phi, rng, dtype).f_hat
    return params, buffers


# ── 前向 ──

def compress(l_n: Tensor, cfg: CompressionConfig, filt: FilterVector, state: 'ModelState',
             train: bool = True) -> Tuple[Tensor, Tensor]:
    """
    压缩模块前向

    Args:
        l_n: 分割点输出 [B, φ̃, H, W]（向量特征为 [B, φ̃]）
        cfg: 已补全的压缩配置
        filt: 门控向量
        state: 含 'compress.*' 参数的模型状态
        train: 批归一化模式

    Returns:
        (l_c, f): l_c 为 [B, φ, H', W']，f 为记录在 Tape 上的 sigmoid(f̂)

    Raises:
        DimensionError: l_n 通道数不等于 φ̃
    """
    if l_n.shape[1] != cfg.phi_tilde:
        raise DimensionError(f"压缩模块输入通道数应为 {cfg.phi_tilde}，got shape {l_n.shape}")
    f = filt.tensor()
    if cfg.bypass:
        return l_n, f

    p = state.params
    if cfg.vector:
        l_hat = ops.dense(l_n, p['compress.weight'], p['compress.bias'])
    else:
        l_hat = ops.conv2d(l_n, p['compress.weight'], p['compress.bias'],
                           stride=cfg.stride, padding=cfg.padding)
    l_hat = ops.batchnorm(l_hat, p['compress.bn.weight'], p['compress.bn.bias'],
                          state.buffers['compress.bn.running_mean'],
                          state.buffers['compress.bn.running_var'], train=train)
    return ops.channel_mul(l_hat, f), f


def select_indices(f: Union[np.ndarray, Tensor], b: int) -> List[int]:
    """f 最大的 b 个通道下标（并列时取小下标），按升序返回"""
    values = f.data if isinstance(f, Tensor) else np.asarray(f)
    phi = values.shape[0]
    if not 1 <= b <= phi:
        raise ValidationError(f"b 必须在 [1, {phi}] 范围内，got {b}")
    order = np.argsort(-values, kind='stable')
    return sorted(int(i) for i in order[:b])


def select_channels(l_c: Tensor, f: Union[np.ndarray, Tensor], b: int) -> Tuple[List[int], Tensor]:
    """
    按预算选择要发送的通道

    Returns:
        (indices, payload): 升序通道下标与按下标顺序堆叠的载荷 [B, b, H', W']

    Raises:
        ValidationError: b 不在 [1, φ] 内
    """
    indices = select_indices(f, b)
    return indices, ops.gather_channels(l_c, indices)


def decompress(payload: Tensor, indices, cfg: CompressionConfig, state: 'ModelState',
               train: bool = True) -> Tensor:
    """
    解压模块前向：补零 → 转置卷积 → 批归一化

    Returns:
        l_d，形状与 l_n 相同

    Raises:
        ValidationError: 下标重复、越界或与载荷通道数不一致
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size > 1 and np.any(np.diff(indices) <= 0):
        raise ValidationError(f"通道下标必须严格递增，got {indices.tolist()}")
    z = ops.scatter_channels(payload, indices, cfg.phi)
    if cfg.bypass:
        return z

    p = state.params
    if cfg.vector:
        l_d = ops.dense(z, p['decompress.weight'], p['decompress.bias'])
    else:
        l_d = ops.conv_transpose2d(z, p['decompress.weight'], p['decompress.bias'],
                                   stride=cfg.stride, padding=cfg.padding,
                                   output_padding=cfg.restore_padding())
    return ops.batchnorm(l_d, p['decompress.bn.weight'], p['decompress.bn.bias'],
                         state.buffers['decompress.bn.running_mean'],
                         state.buffers['decompress.bn.running_var'], train=train)


# ── 损失 ──

def prune_loss(f: Union[np.ndarray, Tensor], B: float, weights: LossWeights) -> Tensor:
    """
    pruneLoss = exp(δ(Σf − B)) + λ·exp(−δ(Σf − B))

    指数截断到 ±30 以避免单精度溢出。f 为 Tensor 时梯度回传到 f。
    """
    if not isinstance(f, Tensor):
        arr = np.asarray(f)
        f = Tensor(arr, dtype=arr.dtype if arr.dtype.kind == "f" else np.float32)
    return ops.prune_loss_op(f, budget=B, delta=weights.delta, lam=weights.lam)


def total_loss(task_loss: Tensor, p_loss: Tensor, epsilon: float) -> Tensor:
    """totalLoss = Loss + ε·pruneLoss"""
    if task_loss.size != 1 or p_loss.size != 1:
        raise ValidationError(f"total_loss 需要标量输入，got {task_loss.shape} 与 {p_loss.shape}")
    return ops.add(task_loss, ops.scale(p_loss, epsilon))


def prune_loss_value(sum_f: float, B: float, weights: LossWeights) -> float:
    """由 Σf 直接计算 pruneLoss（双精度），用于离线复核"""
    z = min(max(weights.delta * (sum_f - B), -ops.PRUNE_EXP_CLAMP), ops.PRUNE_EXP_CLAMP)
    return float(np.exp(z) + weights.lam * np.exp(-z))


def reset_prune(filt: FilterVector, threshold: float = DEFAULT_RESET_THRESHOLD,
                rng_seed: int = 0) -> FilterVector:
    """
    把 f > threshold 的门控重新随机化

    对应的 f̂ 从初始化区间 [−0.1, 0.1] 均匀重采样，其余不变；给定种子时结果确定。
    原地修改并返回 filt。
    """
    mask = filt.f > threshold
    count = int(mask.sum())
    if count:
        rng = np.random.default_rng(rng_seed)
        draws = rng.uniform(-F_HAT_INIT_RANGE, F_HAT_INIT_RANGE, size=count)
        filt.f_hat.data[mask] = draws.astype(filt.f_hat.data.dtype)
    return filt


def payload_nbytes(cfg: CompressionConfig, b: int, batch: int) -> int:
    """一批前向载荷的字节数（单精度）"""
    hc, wc = cfg.compressed_spatial()
    return 4 * b * hc * wc * batch


def compression_ratio(cfg: CompressionConfig, b: int) -> float:
    """单样本 l_n 原始字节数与压缩后载荷字节数之比"""
    raw = cfg.phi_tilde * (1 if cfg.vector else cfg.spatial[0] * cfg.spatial[1])
    hc, wc = cfg.compressed_spatial()
    return raw / float(b * hc * wc)
