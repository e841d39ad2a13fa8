"""
splitstream 张量模块

最小化的反向模式自动微分引擎：Tensor 承载数值与梯度，Parameter 是可训练的
Tensor，Tape 按执行顺序记录原语操作并逆序回放以计算梯度。

用法::

    with Tape() as tape:
        y = ops.dense(x, w, b)
        loss = ops.softmax_cross_entropy(y, labels)
    tape.backward(loss)
"""

from contextvars import ContextVar
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from splitstream.utils.errors import StateError, ValidationError, DimensionError

_active_tape: ContextVar[Optional['Tape']] = ContextVar('splitstream_active_tape', default=None)


class Tensor:
    """
    n 维数值数组及其梯度槽

    Attributes:
        data (np.ndarray): 行优先存储的数值，默认单精度
        grad (np.ndarray | None): 与 data 同形状的梯度，未参与反向传播时为 None
        requires_grad (bool): 是否需要梯度
        name (str | None): 名称，便于调试和检查点
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional['Tape'] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> 'Tensor':
        """包装原语输出，保持其 dtype"""
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.requires_grad = requires_grad
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"只有单元素张量才能转换为标量，got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def accumulate_grad(self, grad: np.ndarray):
        """梯度累加（同一张量被多个消费者使用时求和）"""
        if grad.shape != self.data.shape:
            raise DimensionError(f"梯度形状 {grad.shape} 与张量形状 {self.data.shape} 不一致")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self):
        """对记录本张量的 Tape 执行反向传播，本张量必须是标量"""
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class Parameter(Tensor):
    """
    可训练参数

    learnable 为 False 的参数仍可参与前向计算，但不接收梯度，也不被 SGD 更新。
    """

    def __init__(self, data, learnable: bool = True, name: Optional[str] = None, dtype=np.float32):
        super().__init__(data, requires_grad=learnable, name=name, dtype=dtype)

    @property
    def learnable(self) -> bool:
        return self.requires_grad

    @learnable.setter
    def learnable(self, flag: bool):
        self.requires_grad = bool(flag)

    @property
    def value(self) -> Tensor:
        return self

    def clone(self, dtype=None) -> 'Parameter':
        dtype = self.data.dtype if dtype is None else dtype
        return Parameter(self.data.copy(), learnable=self.learnable, name=self.name, dtype=dtype)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape}, learnable={self.learnable})"


class Function:
    """
    原语操作基类

    子类实现 forward（接收 ndarray，返回 ndarray，并保存反向所需的中间量）
    和 backward（接收输出梯度，按输入顺序返回梯度元组，不需要的位置返回 None）。
    """

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(**kwargs)
        out_data = fn.forward(*[t.data for t in inputs])
        requires_grad = any(t.requires_grad for t in inputs)
        out = Tensor._wrap(out_data, requires_grad)
        tape = _active_tape.get()
        if tape is not None and requires_grad:
            tape.record(fn, inputs, out)
        return out


@dataclass
class _Node:
    fn: Function
    inputs: Tuple[Tensor, ...]
    output: Tensor


class Tape:
    """
    操作记录带

    只在 with 块内激活；激活期间所有需要梯度的原语都会被记录。
    Tape 只能反向传播一次，再次调用会抛出 StateError。
    一个 Tape 只应在一个训练会话（线程）内使用。
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._token = None
        self._used = False

    def __enter__(self) -> 'Tape':
        if self._used:
            raise StateError("Tape 已经执行过反向传播，不能再次记录")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def used(self) -> bool:
        return self._used

    def record(self, fn: Function, inputs: Sequence[Tensor], output: Tensor):
        self._nodes.append(_Node(fn, tuple(inputs), output))
        self._produced.add(id(output))
        output._tape = self

    def backward(self, loss: Tensor):
        """
        从标量损失开始反向传播

        Args:
            loss: 本 Tape 记录的标量张量

        Raises:
            ValidationError: loss 不是标量
            StateError: Tape 已经反向传播过
        """
        if loss.size != 1:
            raise ValidationError(f"backward 只接受标量损失，got shape {loss.shape}")
        self.backward_from([(loss, np.ones_like(loss.data))])

    def backward_from(self, seeds: Iterable[Tuple[Tensor, np.ndarray]]):
        """
        以给定的 (张量, 上游梯度) 作为种子反向传播

        分割训练的客户端用它把服务端回传的梯度注入本地计算图。
        """
        if self._used:
            raise StateError("Tape 只能反向传播一次，请重新执行前向计算")
        self._used = True

        grads: dict[int, np.ndarray] = {}
        for tensor, seed in seeds:
            seed = np.asarray(seed, dtype=tensor.data.dtype)
            if seed.shape != tensor.shape:
                raise DimensionError(f"种子梯度形状 {seed.shape} 与张量形状 {tensor.shape} 不一致")
            self._route(tensor, seed, grads)

        for node in reversed(self._nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.fn.backward(g_out)
            for tensor, g in zip(node.inputs, in_grads):
                if g is None or not tensor.requires_grad:
                    continue
                self._route(tensor, g, grads)

        # 释放中间量
        self._nodes.clear()
        self._produced.clear()

    def _route(self, tensor: Tensor, grad: np.ndarray, grads: dict):
        if id(tensor) in self._produced:
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
        elif tensor.requires_grad:
            tensor.accumulate_grad(grad)


def backward(loss: Tensor):
    """
    对标量损失执行反向传播

    Raises:
        ValidationError: loss 不是标量
        StateError: loss 不是由任何 Tape 记录的
    """
    if loss.size != 1:
        raise ValidationError(f"backward 只接受标量损失，got shape {loss.shape}")
    if loss._tape is None:
        raise StateError("损失张量不是由 Tape 记录的，无法反向传播")
    loss._tape.backward(loss)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Kaiming 均匀初始化，取值范围 ±sqrt(6 / fan_in)"""
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
