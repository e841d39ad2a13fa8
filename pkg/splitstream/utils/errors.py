"""
splitstream 异常体系

所有对外抛出的异常都继承自 SplitStreamError，便于调用方统一捕获；
参数类错误同时继承 ValueError，状态类错误同时继承 RuntimeError。
"""


class SplitStreamError(Exception):
    """splitstream 异常基类"""


class DimensionError(SplitStreamError, ValueError):
    """张量形状不匹配"""


class ValidationError(SplitStreamError, ValueError):
    """参数取值越界或长度不一致"""


class FormatError(SplitStreamError, ValueError):
    """数据集或检查点文件格式错误"""


class StateError(SplitStreamError, RuntimeError):
    """对象状态不允许当前操作（如 Tape 重复反向传播）"""


class FramingError(SplitStreamError):
    """帧被截断"""


class ProtocolError(SplitStreamError):
    """协议违规：魔数、版本、消息类型、批次号或梯度形状不符"""


class ControlError(ProtocolError):
    """客户端与服务端的阶段或预算不一致"""


class SessionError(SplitStreamError):
    """
    训练会话中断

    Attributes:
        batches_completed (int): 中断前已完成的批次数
    """

    def __init__(self, message: str, batches_completed: int = 0):
        super().__init__(message)
        self.batches_completed = batches_completed


class LinkTimeoutError(SessionError, TimeoutError):
    """链路空闲超时"""


def validate_positive(value, name: str):
    if value <= 0:
        raise ValidationError(f"{name} 必须为正数，got {value}")


def validate_non_negative(value, name: str):
    if value < 0:
        raise ValidationError(f"{name} 不能为负数，got {value}")


def validate_range(value, lo, hi, name: str):
    if not (lo <= value <= hi):
        raise ValidationError(f"{name} 必须在 [{lo}, {hi}] 范围内，got {value}")
