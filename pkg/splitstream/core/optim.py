"""
splitstream 优化器模块

带权重衰减的随机梯度下降。每步之后梯度重置为 None，下一次反向传播没有写到的可训练参数在下一步报错。
"""

from typing import Iterable

from splitstream.core.tensor import Parameter
from splitstream.utils.errors import StateError, validate_positive, validate_non_negative

DEFAULT_LR = 1e-5
DEFAULT_WEIGHT_DECAY = 5e-4


def sgd_step(params: Iterable[Parameter], lr: float = DEFAULT_LR,
             weight_decay: float = DEFAULT_WEIGHT_DECAY):
    """
    执行一步 SGD：p ← p − lr·(grad + weight_decay·p)，随后梯度重置为 None

    不可训练（learnable=False）的参数被跳过。

    Args:
        params: 参数序列
        lr: 学习率，必须为正数
        weight_decay: 权重衰减系数，不能为负数

    Raises:
        StateError: 可训练参数缺少梯度（本步之前的反向传播没有到达它）
    """
    validate_positive(lr, 'lr')
    validate_non_negative(weight_decay, 'weight_decay')
    params = [p for p in params if p.learnable]
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise StateError(f"以下参数缺少梯度，请先执行反向传播: {missing}")
    for p in params:
        update = p.grad + weight_decay * p.data if weight_decay else p.grad
        p.data -= lr * update
        p.grad = None
