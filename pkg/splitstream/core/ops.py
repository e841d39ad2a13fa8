"""
splitstream 原语操作模块

每个原语是一个 Function 子类，前向在 numpy 上计算并保存反向所需的中间量。
所有原语保持输入的 dtype（训练时为单精度），因此同一套代码也可用双精度做梯度校验。

卷积采用 sliding_window_view 展开窗口后做张量收缩；反向对输入的梯度按卷积核位置累加。
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from splitstream.core.tensor import Function, Tensor
from splitstream.utils.errors import DimensionError, ValidationError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# pruneLoss 指数截断，防止单精度溢出
PRUNE_EXP_CLAMP = 30.0


def _strided(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


# ── 线性层 ──

class Dense(Function):
    def forward(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise DimensionError(f"dense 形状不匹配: x {x.shape} 与 w {w.shape}")
        if b.shape != (w.shape[1],):
            raise DimensionError(f"dense 偏置形状不匹配: bias {b.shape} 与 w {w.shape}")
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, grad):
        return grad @ self.w.T, self.x.T @ grad, grad.sum(axis=0)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x·w + bias，x 为 [B, I]，w 为 [I, O]"""
    return Dense.apply(x, w, b)


# ── 卷积 ──

class Conv2d(Function):
    def __init__(self, stride: int = 1, padding: int = 0):
        if stride < 1 or padding < 0:
            raise ValidationError(f"stride 必须为正数且 padding 非负，got stride={stride}, padding={padding}")
        self.stride = stride
        self.padding = padding

    def forward(self, x, w, b):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise DimensionError(f"conv2d 形状不匹配: x {x.shape} 与 w {w.shape}")
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv2d 偏置形状不匹配: bias {b.shape} 与 w {w.shape}")
        s, p = self.stride, self.padding
        _, _, h, wd = x.shape
        kh, kw = w.shape[2], w.shape[3]
        if kh > h + 2 * p or kw > wd + 2 * p:
            raise DimensionError(f"卷积核 {kh}x{kw} 大于填充后的输入 {h + 2 * p}x{wd + 2 * p}")

        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        # windows: (B, C, Ho, Wo, kh, kw)
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, F)
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]

        self.x_shape = x.shape
        self.padded_shape = xp.shape
        self.windows = windows
        self.w = w
        return out

    def backward(self, grad):
        s, p = self.stride, self.padding
        _, _, ho, wo = grad.shape
        kh, kw = self.w.shape[2], self.w.shape[3]

        gb = grad.sum(axis=(0, 2, 3))
        gw = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, kh, kw)

        gxp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, self.w[:, :, i, j], axes=([1], [0]))  # (B, Ho, Wo, C)
                gxp[:, :, _strided(i, ho, s), _strided(j, wo, s)] += contrib.transpose(0, 3, 1, 2)
        h, wd = self.x_shape[2], self.x_shape[3]
        gx = gxp[:, :, p:p + h, p:p + wd]
        return gx, gw, gb


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    二维互相关

    输出空间尺寸 H' = floor((H + 2·padding − kh) / stride) + 1。

    Raises:
        DimensionError: 通道数不匹配或卷积核大于填充后的输入
    """
    return Conv2d.apply(x, w, b, stride=stride, padding=padding)


class ConvTranspose2d(Function):
    def __init__(self, stride: int = 1, padding: int = 0, output_padding: int = 0):
        if stride < 1 or padding < 0:
            raise ValidationError(f"stride 必须为正数且 padding 非负，got stride={stride}, padding={padding}")
        if not 0 <= output_padding < stride:
            raise ValidationError(f"output_padding 必须在 [0, {stride}) 范围内，got {output_padding}")
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x, w, b):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
            raise DimensionError(f"transposed conv 形状不匹配: x {x.shape} 与 w {w.shape}")
        if b.shape != (w.shape[1],):
            raise DimensionError(f"transposed conv 偏置形状不匹配: bias {b.shape} 与 w {w.shape}")
        s, p, op = self.stride, self.padding, self.output_padding
        n, _, h, wd = x.shape
        kh, kw = w.shape[2], w.shape[3]
        ho = (h - 1) * s - 2 * p + kh + op
        wo = (wd - 1) * s - 2 * p + kw + op
        if ho <= 0 or wo <= 0:
            raise DimensionError(f"transposed conv 输出尺寸非正: {ho}x{wo}")

        full = np.zeros((n, w.shape[1], (h - 1) * s + kh + op, (wd - 1) * s + kw + op), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(x, w[:, :, i, j], axes=([1], [0]))  # (B, H, W, Cout)
                full[:, :, _strided(i, h, s), _strided(j, wd, s)] += contrib.transpose(0, 3, 1, 2)
        out = full[:, :, p:p + ho, p:p + wo] + b[None, :, None, None]

        self.x = x
        self.w = w
        self.full_shape = full.shape
        return out

    def backward(self, grad):
        s, p = self.stride, self.padding
        _, _, h, wd = self.x.shape
        kh, kw = self.w.shape[2], self.w.shape[3]
        ho, wo = grad.shape[2], grad.shape[3]

        gfull = np.zeros(self.full_shape, dtype=grad.dtype)
        gfull[:, :, p:p + ho, p:p + wo] = grad

        gx = np.zeros_like(self.x)
        gw = np.zeros_like(self.w)
        for i in range(kh):
            for j in range(kw):
                g_slice = gfull[:, :, _strided(i, h, s), _strided(j, wd, s)]  # (B, Cout, H, W)
                gx += np.tensordot(g_slice, self.w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                gw[:, :, i, j] = np.tensordot(self.x, g_slice, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw, grad.sum(axis=(0, 2, 3))


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """
    二维转置卷积，w 形状为 [Cin, Cout, kh, kw]

    输出空间尺寸 = (H − 1)·stride − 2·padding + kh + output_padding。
    等价于以 w 为权重的 conv2d 对输入的梯度。
    """
    return ConvTranspose2d.apply(x, w, b, stride=stride, padding=padding, output_padding=output_padding)


# ── 归一化 ──

class BatchNorm(Function):
    def __init__(self, running_mean: np.ndarray, running_var: np.ndarray, train: bool = True,
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.running_mean = running_mean
        self.running_var = running_var
        self.train = train
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, gamma, beta):
        if x.ndim not in (2, 4):
            raise DimensionError(f"batchnorm 只支持 2 维或 4 维输入，got {x.shape}")
        c = x.shape[1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise DimensionError(f"batchnorm 通道数不匹配: x {x.shape} 与 gamma {gamma.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        view = (1, c) if x.ndim == 2 else (1, c, 1, 1)

        if self.train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // c
            unbiased = var * (m / (m - 1)) if m > 1 else var
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)

        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(view)) * inv_std.reshape(view)

        self.axes, self.view = axes, view
        self.xhat, self.inv_std, self.gamma = xhat, inv_std, gamma
        return gamma.reshape(view) * xhat + beta.reshape(view)

    def backward(self, grad):
        axes, view = self.axes, self.view
        g_gamma = (grad * self.xhat).sum(axis=axes)
        g_beta = grad.sum(axis=axes)
        g_xhat = grad * self.gamma.reshape(view)
        if self.train:
            m = grad.size // grad.shape[1]
            term = (m * g_xhat
                    - g_xhat.sum(axis=axes).reshape(view)
                    - self.xhat * (g_xhat * self.xhat).sum(axis=axes).reshape(view))
            gx = term * (self.inv_std.reshape(view) / m)
        else:
            gx = g_xhat * self.inv_std.reshape(view)
        return gx, g_gamma, g_beta


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, train: bool = True) -> Tensor:
    """
    批归一化（2 维按特征，4 维按通道）

    训练模式用批统计量归一化，并以 momentum 0.1 原地更新 running_mean / running_var
    （方差取无偏估计）；评估模式使用 running 统计量。
    """
    return BatchNorm.apply(x, gamma, beta, running_mean=running_mean,
                           running_var=running_var, train=train)


# ── 逐元素 ──

class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, np.zeros_like(x))

    def backward(self, grad):
        return (grad * self.mask,)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


class Sigmoid(Function):
    def forward(self, x):
        self.out = _sigmoid(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise DimensionError(f"add 形状不匹配: {a.shape} 与 {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


class Mul(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise DimensionError(f"mul 形状不匹配: {a.shape} 与 {b.shape}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


class Scale(Function):
    def __init__(self, factor: float = 1.0):
        self.factor = float(factor)

    def forward(self, x):
        return x * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.full(self.shape, grad, dtype=grad.dtype),)


def sum_all(x: Tensor) -> Tensor:
    return Sum.apply(x)


# ── 形状 ──

class MaxPool2d(Function):
    def __init__(self, kernel: int = 2, stride: int = 2):
        self.kernel = kernel
        self.stride = stride

    def forward(self, x):
        if x.ndim != 4:
            raise DimensionError(f"maxpool2d 需要 4 维输入，got {x.shape}")
        k, s = self.kernel, self.stride
        n, c, h, w = x.shape
        if k > h or k > w:
            raise DimensionError(f"池化窗口 {k}x{k} 大于输入 {h}x{w}")
        windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = windows.shape[2], windows.shape[3]
        flat = windows.reshape(n, c, ho, wo, k * k)
        self.argmax = flat.argmax(axis=-1)
        self.x_shape = x.shape
        return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        k, s = self.kernel, self.stride
        n, c, ho, wo = grad.shape
        gx = np.zeros(self.x_shape, dtype=grad.dtype)
        bi, ci, hi, wi = np.indices((n, c, ho, wo), sparse=True)
        rows = hi * s + self.argmax // k
        cols = wi * s + self.argmax % k
        np.add.at(gx, (bi, ci, rows, cols), grad)
        return (gx,)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """最大池化，记录 argmax 下标供反向使用"""
    return MaxPool2d.apply(x, kernel=kernel, stride=stride)


class Flatten(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


def flatten(x: Tensor) -> Tensor:
    return Flatten.apply(x)


class Reshape(Function):
    def __init__(self, shape=()):
        self.shape = tuple(shape)

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


def reshape(x: Tensor, shape) -> Tensor:
    return Reshape.apply(x, shape=shape)


# ── 通道操作 ──

def _check_indices(indices: np.ndarray, channels: int):
    if indices.ndim != 1:
        raise ValidationError(f"通道下标必须是一维数组，got shape {indices.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= channels):
        raise ValidationError(f"通道下标越界: 有效范围 [0, {channels})，got {indices.tolist()}")
    if np.unique(indices).size != indices.size:
        raise ValidationError(f"通道下标重复: {indices.tolist()}")


class GatherChannels(Function):
    def __init__(self, indices=()):
        self.indices = np.asarray(indices, dtype=np.int64)

    def forward(self, x):
        _check_indices(self.indices, x.shape[1])
        self.shape = x.shape
        return x[:, self.indices]

    def backward(self, grad):
        gx = np.zeros(self.shape, dtype=grad.dtype)
        gx[:, self.indices] = grad
        return (gx,)


def gather_channels(x: Tensor, indices) -> Tensor:
    """按下标顺序取出通道（第 1 维）"""
    return GatherChannels.apply(x, indices=indices)


class ScatterChannels(Function):
    def __init__(self, indices=(), channels: int = 0):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.channels = channels

    def forward(self, x):
        _check_indices(self.indices, self.channels)
        if x.shape[1] != self.indices.size:
            raise ValidationError(f"通道下标数量 {self.indices.size} 与载荷通道数 {x.shape[1]} 不一致")
        out = np.zeros((x.shape[0], self.channels) + x.shape[2:], dtype=x.dtype)
        out[:, self.indices] = x
        return out

    def backward(self, grad):
        return (grad[:, self.indices],)


def scatter_channels(x: Tensor, indices, channels: int) -> Tensor:
    """把 x 的通道放回 channels 个通道中的指定位置，其余通道补零"""
    return ScatterChannels.apply(x, indices=indices, channels=channels)


class ChannelMul(Function):
    def forward(self, x, f):
        if f.ndim != 1 or x.shape[1] != f.shape[0]:
            raise DimensionError(f"mul 形状不匹配: x {x.shape} 与 f {f.shape}")
        view = (1, f.shape[0]) + (1,) * (x.ndim - 2)
        self.x, self.f, self.view = x, f, view
        return x * f.reshape(view)

    def backward(self, grad):
        axes = tuple(a for a in range(grad.ndim) if a != 1)
        return grad * self.f.reshape(self.view), (grad * self.x).sum(axis=axes)


def channel_mul(x: Tensor, f: Tensor) -> Tensor:
    """逐通道乘以 f_k"""
    return ChannelMul.apply(x, f)


# ── 损失 ──

class SoftmaxCrossEntropy(Function):
    def __init__(self, labels=()):
        self.labels = np.asarray(labels, dtype=np.int64)

    def forward(self, logits):
        if logits.ndim != 2:
            raise DimensionError(f"logits 必须是 [B, K]，got {logits.shape}")
        n, k = logits.shape
        if self.labels.shape != (n,):
            raise DimensionError(f"标签数量 {self.labels.shape} 与 batch {n} 不一致")
        if n and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValidationError(f"标签必须在 [0, {k}) 范围内，got {self.labels.tolist()}")
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        denom = exp.sum(axis=1, keepdims=True)
        log_probs = shifted - np.log(denom)
        self.probs = exp / denom
        return np.asarray(-log_probs[np.arange(n), self.labels].mean(), dtype=logits.dtype)

    def backward(self, grad):
        n = self.probs.shape[0]
        g = self.probs.copy()
        g[np.arange(n), self.labels] -= 1
        return (g * (grad / n),)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """batch 平均的 −log softmax(logits)[label]"""
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


class PruneLoss(Function):
    def __init__(self, budget: float = 0.0, delta: float = 1.0, lam: float = 0.5):
        self.budget = float(budget)
        self.delta = float(delta)
        self.lam = float(lam)

    def forward(self, f):
        if f.ndim != 1:
            raise DimensionError(f"f 必须是一维向量，got {f.shape}")
        s = float(np.sum(f, dtype=np.float64))
        z = min(max(self.delta * (s - self.budget), -PRUNE_EXP_CLAMP), PRUNE_EXP_CLAMP)
        up, down = math.exp(z), math.exp(-z)
        self.slope = self.delta * (up - self.lam * down)
        self.shape = f.shape
        return np.asarray(up + self.lam * down, dtype=f.dtype)

    def backward(self, grad):
        # 截断区间内沿用截断后的指数计算梯度
        return (np.full(self.shape, self.slope, dtype=grad.dtype) * grad,)


def prune_loss_op(f: Tensor, budget: float, delta: float, lam: float) -> Tensor:
    """exp(δ(Σf − B)) + λ·exp(−δ(Σf − B))，指数截断到 ±30"""
    return PruneLoss.apply(f, budget=budget, delta=delta, lam=lam)
