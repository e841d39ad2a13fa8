"""
splitstream 线路协议模块

分割学习流量的二进制帧格式，全部字段小端，浮点为 IEEE 754 单精度。

帧头 16 字节::

    magic 'SPLW' | version u8 | msg_type u8 | flags u16 | payload_length u64

消息体:

- Forward (1): batch_id u64 | stage u32 | b u32 | φ u32 | H' u32 | W' u32 | batch u32
  | indices b×u32 | f φ×f32 | labels batch×u32（推理帧省略）| payload b·batch·H'·W'×f32（通道优先）
- Backward (2): batch_id u64 | stage u32 | b u32 | φ u32 | H' u32 | W' u32 | batch u32
  | task_loss f32 | prune_loss f32 | grad_payload（同 Forward 载荷）| grad_f φ×f32
- Control (3): kind u8 | 3 字节填充 | stage u32 | epoch u32 | b u32 | B f32
- Ack (4): acked_type u8 | 3 字节填充 | ref u64
- Predict (5): batch_id u64 | batch u32 | num_classes u32 | logits batch×num_classes×f32

flags 第 0 位表示推理帧（不带标签），其余位必须为 0。
"""

import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from splitstream.utils.errors import FramingError, ProtocolError, ValidationError

MAGIC = b'SPLW'
VERSION = 1

MSG_FORWARD = 1
MSG_BACKWARD = 2
MSG_CONTROL = 3
MSG_ACK = 4
MSG_PREDICT = 5

MESSAGE_NAMES = {
    MSG_FORWARD: 'forward',
    MSG_BACKWARD: 'backward',
    MSG_CONTROL: 'control',
    MSG_ACK: 'ack',
    MSG_PREDICT: 'predict',
}

FLAG_INFERENCE = 0x0001
KNOWN_FLAGS = FLAG_INFERENCE

CTRL_STAGE_CHANGE = 1
CTRL_END_OF_EPOCH = 2
CTRL_SHUTDOWN = 3
CONTROL_KINDS = {
    CTRL_STAGE_CHANGE: 'stage_change',
    CTRL_END_OF_EPOCH: 'end_of_epoch',
    CTRL_SHUTDOWN: 'shutdown',
}

HEADER = struct.Struct('<4sBBHQ')
FORWARD_FIXED = struct.Struct('<QIIIIII')
BACKWARD_FIXED = struct.Struct('<QIIIIIIff')
CONTROL_BODY = struct.Struct('<B3xIIIf')
ACK_BODY = struct.Struct('<B3xQ')
PREDICT_FIXED = struct.Struct('<QII')

HEADER_SIZE = HEADER.size  # 16

_F32 = np.dtype('<f4')
_U32 = np.dtype('<u4')


# ── 消息类型 ──

@dataclass(eq=False)
class ForwardMsg:
    """
    前向消息：选中的压缩通道、f 以及（训练时的）标签

    payload 在内存中为 [batch, b, H', W']，线路上按通道优先排列。
    labels 为 None 表示推理帧。
    """
    batch_id: int
    stage: int
    b: int
    phi: int
    height: int
    width: int
    batch: int
    indices: np.ndarray
    f: np.ndarray
    labels: Optional[np.ndarray]
    payload: np.ndarray

    @property
    def inference(self) -> bool:
        return self.labels is None


@dataclass(eq=False)
class BackwardMsg:
    """反向消息：对已发送载荷的梯度与对 f 的梯度"""
    batch_id: int
    stage: int
    b: int
    phi: int
    height: int
    width: int
    batch: int
    task_loss: float
    prune_loss: float
    grad_payload: np.ndarray
    grad_f: np.ndarray


@dataclass(eq=False)
class ControlMsg:
    """控制消息：阶段切换、epoch 结束、关闭"""
    kind: int
    stage: int
    epoch: int
    b: int
    B: float

    @property
    def kind_name(self) -> str:
        return CONTROL_KINDS.get(self.kind, str(self.kind))


@dataclass(eq=False)
class AckMsg:
    acked_type: int
    ref: int


@dataclass(eq=False)
class PredictMsg:
    """推理回复：服务端输出的 logits [batch, num_classes]"""
    batch_id: int
    batch: int
    num_classes: int
    logits: np.ndarray


Message = Union[ForwardMsg, BackwardMsg, ControlMsg, AckMsg, PredictMsg]


# ── 帧大小 ──

def forward_frame_size(b: int, phi: int, height: int, width: int, batch: int,
                       inference: bool = False) -> int:
    """16 + 32 + 4b + 4φ + 4·batch（训练帧）+ 4·b·H'·W'·batch"""
    labels = 0 if inference else 4 * batch
    return HEADER_SIZE + FORWARD_FIXED.size + 4 * b + 4 * phi + labels + 4 * b * height * width * batch


def backward_frame_size(b: int, phi: int, height: int, width: int, batch: int) -> int:
    """16 + 40 + 4·b·H'·W'·batch + 4φ"""
    return HEADER_SIZE + BACKWARD_FIXED.size + 4 * b * height * width * batch + 4 * phi


def control_frame_size() -> int:
    return HEADER_SIZE + CONTROL_BODY.size


def ack_frame_size() -> int:
    return HEADER_SIZE + ACK_BODY.size


def predict_frame_size(batch: int, num_classes: int) -> int:
    return HEADER_SIZE + PREDICT_FIXED.size + 4 * batch * num_classes


# ── 帧头 ──

def _frame(msg_type: int, body: bytes, flags: int = 0) -> bytes:
    return HEADER.pack(MAGIC, VERSION, msg_type, flags, len(body)) + body


def parse_header(frame: bytes):
    """
    解析并校验帧头

    Returns:
        (msg_type, flags, body)

    Raises:
        FramingError: 帧头或消息体被截断
        ProtocolError: 魔数、版本、消息类型或标志位不符
        ValidationError: 消息体长度与帧头声明不一致
    """
    if len(frame) < HEADER_SIZE:
        raise FramingError(f"帧长度 {len(frame)} 小于帧头 {HEADER_SIZE} 字节")
    magic, version, msg_type, flags, length = HEADER.unpack_from(frame, 0)
    if magic != MAGIC:
        raise ProtocolError(f"魔数错误: {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"不支持的协议版本: {version}")
    if msg_type not in MESSAGE_NAMES:
        raise ProtocolError(f"未知的消息类型: {msg_type}")
    if flags & ~KNOWN_FLAGS:
        raise ProtocolError(f"未知的标志位: {flags:#06x}")
    if flags and msg_type != MSG_FORWARD:
        raise ProtocolError(f"{MESSAGE_NAMES[msg_type]} 消息不允许设置标志位")
    body_len = len(frame) - HEADER_SIZE
    if body_len < length:
        raise FramingError(f"帧被截断: 声明 {length} 字节，实际 {body_len} 字节")
    if body_len > length:
        raise ValidationError(f"帧长度不一致: 声明 {length} 字节，实际 {body_len} 字节")
    return msg_type, flags, memoryview(frame)[HEADER_SIZE:]


def peek_type(frame: bytes) -> int:
    """不做校验地读取消息类型，帧过短时返回 0"""
    if len(frame) < 6:
        return 0
    return frame[5]


def is_inference(frame: bytes) -> bool:
    """不做校验地判断是否为推理前向帧"""
    if len(frame) < 8 or frame[5] != MSG_FORWARD:
        return False
    return bool(struct.unpack_from("<H", frame, 6)[0] & FLAG_INFERENCE)


def _expect(msg_type: int, expected: int):
    if msg_type != expected:
        raise ProtocolError(f"期望 {MESSAGE_NAMES[expected]} 消息，got {MESSAGE_NAMES.get(msg_type, msg_type)}")


def _f32_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=_F32).tobytes()


def _read(body, offset: int, count: int, dtype: np.dtype):
    end = offset + count * dtype.itemsize
    return np.frombuffer(body[offset:end], dtype=dtype, count=count), end


def _check_u32(name: str, value: int):
    if not 0 <= int(value) <= 0xFFFFFFFF:
        raise ValidationError(f"{name} 超出 u32 范围: {value}")


def _check_budget(b: int, phi: int):
    if not 1 <= b <= phi:
        raise ValidationError(f"b 必须在 [1, φ={phi}] 范围内，got {b}")


# ── Forward ──

def _validate_forward(msg: ForwardMsg):
    for name in ('stage', 'b', 'phi', 'height', 'width', 'batch'):
        _check_u32(name, getattr(msg, name))
    if not 0 <= msg.batch_id < 2 ** 64:
        raise ValidationError(f"batch_id 超出 u64 范围: {msg.batch_id}")
    _check_budget(msg.b, msg.phi)
    indices = np.asarray(msg.indices)
    if indices.shape != (msg.b,):
        raise ValidationError(f"indices 长度应为 b={msg.b}，got shape {indices.shape}")
    if msg.b > 1 and np.any(np.diff(indices.astype(np.int64)) <= 0):
        raise ValidationError(f"indices 必须严格递增: {indices.tolist()}")
    if (int(indices.min()) < 0 or int(indices.max()) >= msg.phi):
        raise ValidationError(f"indices 越界: 有效范围 [0, {msg.phi})")
    if np.shape(msg.f) != (msg.phi,):
        raise ValidationError(f"f 长度应为 φ={msg.phi}，got shape {np.shape(msg.f)}")
    if msg.labels is not None and np.shape(msg.labels) != (msg.batch,):
        raise ValidationError(f"labels 长度应为 batch={msg.batch}，got shape {np.shape(msg.labels)}")
    expected = (msg.batch, msg.b, msg.height, msg.width)
    if np.shape(msg.payload) != expected:
        raise ValidationError(f"payload 形状应为 {expected}，got {np.shape(msg.payload)}")


def encode_forward(msg: ForwardMsg) -> bytes:
    """
    编码前向消息

    Raises:
        ValidationError: 字段之间不一致（下标非严格递增、长度不符等）
    """
    _validate_forward(msg)
    parts = [
        FORWARD_FIXED.pack(msg.batch_id, msg.stage, msg.b, msg.phi, msg.height, msg.width, msg.batch),
        np.ascontiguousarray(msg.indices, dtype=_U32).tobytes(),
        _f32_bytes(msg.f),
    ]
    if msg.labels is not None:
        parts.append(np.ascontiguousarray(msg.labels, dtype=_U32).tobytes())
    parts.append(_f32_bytes(np.transpose(msg.payload, (1, 0, 2, 3))))
    flags = FLAG_INFERENCE if msg.labels is None else 0
    return _frame(MSG_FORWARD, b''.join(parts), flags)


def _decode_forward_body(body, flags: int) -> ForwardMsg:
    if len(body) < FORWARD_FIXED.size:
        raise ValidationError(f"forward 消息体 {len(body)} 字节，小于固定部分 {FORWARD_FIXED.size} 字节")
    batch_id, stage, b, phi, h, w, batch = FORWARD_FIXED.unpack_from(body, 0)
    _check_budget(b, phi)
    inference = bool(flags & FLAG_INFERENCE)
    expected = forward_frame_size(b, phi, h, w, batch, inference) - HEADER_SIZE
    if len(body) != expected:
        raise ValidationError(f"forward 消息体长度 {len(body)} 与字段推算的 {expected} 不一致")
    offset = FORWARD_FIXED.size
    indices, offset = _read(body, offset, b, _U32)
    f, offset = _read(body, offset, phi, _F32)
    labels = None
    if not inference:
        labels, offset = _read(body, offset, batch, _U32)
        labels = labels.astype(np.int64)
    payload, offset = _read(body, offset, b * batch * h * w, _F32)
    indices = indices.astype(np.int64)
    if b > 1 and np.any(np.diff(indices) <= 0):
        raise ValidationError(f"indices 必须严格递增: {indices.tolist()}")
    if indices.max() >= phi:
        raise ValidationError(f"indices 越界: 有效范围 [0, {phi})")
    payload = payload.reshape(b, batch, h, w).transpose(1, 0, 2, 3).astype(np.float32)
    return ForwardMsg(batch_id, stage, b, phi, h, w, batch, indices, f.astype(np.float32), labels, payload)


def decode_forward(frame: bytes) -> ForwardMsg:
    msg_type, flags, body = parse_header(frame)
    _expect(msg_type, MSG_FORWARD)
    return _decode_forward_body(body, flags)


# ── Backward ──

def encode_backward(msg: BackwardMsg) -> bytes:
    for name in ('stage', 'b', 'phi', 'height', 'width', 'batch'):
        _check_u32(name, getattr(msg, name))
    _check_budget(msg.b, msg.phi)
    expected = (msg.batch, msg.b, msg.height, msg.width)
    if np.shape(msg.grad_payload) != expected:
        raise ValidationError(f"grad_payload 形状应为 {expected}，got {np.shape(msg.grad_payload)}")
    if np.shape(msg.grad_f) != (msg.phi,):
        raise ValidationError(f"grad_f 长度应为 φ={msg.phi}，got shape {np.shape(msg.grad_f)}")
    body = b''.join([
        BACKWARD_FIXED.pack(msg.batch_id, msg.stage, msg.b, msg.phi, msg.height, msg.width, msg.batch,
                            msg.task_loss, msg.prune_loss),
        _f32_bytes(np.transpose(msg.grad_payload, (1, 0, 2, 3))),
        _f32_bytes(msg.grad_f),
    ])
    return _frame(MSG_BACKWARD, body)


def _decode_backward_body(body) -> BackwardMsg:
    if len(body) < BACKWARD_FIXED.size:
        raise ValidationError(f"backward 消息体 {len(body)} 字节，小于固定部分 {BACKWARD_FIXED.size} 字节")
    batch_id, stage, b, phi, h, w, batch, task_loss, prune = BACKWARD_FIXED.unpack_from(body, 0)
    _check_budget(b, phi)
    expected = backward_frame_size(b, phi, h, w, batch) - HEADER_SIZE
    if len(body) != expected:
        raise ValidationError(f"backward 消息体长度 {len(body)} 与字段推算的 {expected} 不一致")
    offset = BACKWARD_FIXED.size
    grad, offset = _read(body, offset, b * batch * h * w, _F32)
    grad_f, offset = _read(body, offset, phi, _F32)
    grad = grad.reshape(b, batch, h, w).transpose(1, 0, 2, 3).astype(np.float32)
    return BackwardMsg(batch_id, stage, b, phi, h, w, batch, task_loss, prune, grad, grad_f.astype(np.float32))


def decode_backward(frame: bytes) -> BackwardMsg:
    msg_type, _, body = parse_header(frame)
    _expect(msg_type, MSG_BACKWARD)
    return _decode_backward_body(body)


# ── Control / Ack ──

def encode_control(msg: ControlMsg) -> bytes:
    if msg.kind not in CONTROL_KINDS:
        raise ValidationError(f"未知的控制消息类型: {msg.kind}")
    for name in ('stage', 'epoch', 'b'):
        _check_u32(name, getattr(msg, name))
    return _frame(MSG_CONTROL, CONTROL_BODY.pack(msg.kind, msg.stage, msg.epoch, msg.b, msg.B))


def _decode_control_body(body) -> ControlMsg:
    if len(body) != CONTROL_BODY.size:
        raise ValidationError(f"control 消息体应为 {CONTROL_BODY.size} 字节，got {len(body)}")
    kind, stage, epoch, b, budget = CONTROL_BODY.unpack_from(body, 0)
    if kind not in CONTROL_KINDS:
        raise ProtocolError(f"未知的控制消息类型: {kind}")
    return ControlMsg(kind, stage, epoch, b, budget)


def decode_control(frame: bytes) -> ControlMsg:
    msg_type, _, body = parse_header(frame)
    _expect(msg_type, MSG_CONTROL)
    return _decode_control_body(body)


def encode_ack(msg: AckMsg) -> bytes:
    if msg.acked_type not in MESSAGE_NAMES:
        raise ValidationError(f"未知的被确认消息类型: {msg.acked_type}")
    return _frame(MSG_ACK, ACK_BODY.pack(msg.acked_type, msg.ref))


def _decode_ack_body(body) -> AckMsg:
    if len(body) != ACK_BODY.size:
        raise ValidationError(f"ack 消息体应为 {ACK_BODY.size} 字节，got {len(body)}")
    acked_type, ref = ACK_BODY.unpack_from(body, 0)
    if acked_type not in MESSAGE_NAMES:
        raise ProtocolError(f"未知的被确认消息类型: {acked_type}")
    return AckMsg(acked_type, ref)


def decode_ack(frame: bytes) -> AckMsg:
    msg_type, _, body = parse_header(frame)
    _expect(msg_type, MSG_ACK)
    return _decode_ack_body(body)


# ── Predict ──

def encode_predict(msg: PredictMsg) -> bytes:
    if np.shape(msg.logits) != (msg.batch, msg.num_classes):
        raise ValidationError(f"logits 形状应为 {(msg.batch, msg.num_classes)}，got {np.shape(msg.logits)}")
    body = PREDICT_FIXED.pack(msg.batch_id, msg.batch, msg.num_classes) + _f32_bytes(msg.logits)
    return _frame(MSG_PREDICT, body)


def _decode_predict_body(body) -> PredictMsg:
    if len(body) < PREDICT_FIXED.size:
        raise ValidationError(f"predict 消息体 {len(body)} 字节，小于固定部分 {PREDICT_FIXED.size} 字节")
    batch_id, batch, num_classes = PREDICT_FIXED.unpack_from(body, 0)
    expected = predict_frame_size(batch, num_classes) - HEADER_SIZE
    if len(body) != expected:
        raise ValidationError(f"predict 消息体长度 {len(body)} 与字段推算的 {expected} 不一致")
    logits, _ = _read(body, PREDICT_FIXED.size, batch * num_classes, _F32)
    return PredictMsg(batch_id, batch, num_classes, logits.reshape(batch, num_classes).astype(np.float32))


def decode_predict(frame: bytes) -> PredictMsg:
    msg_type, _, body = parse_header(frame)
    _expect(msg_type, MSG_PREDICT)
    return _decode_predict_body(body)


# ── 分发 ──

MESSAGE_TYPES = {
    ForwardMsg: MSG_FORWARD,
    BackwardMsg: MSG_BACKWARD,
    ControlMsg: MSG_CONTROL,
    AckMsg: MSG_ACK,
    PredictMsg: MSG_PREDICT,
}


def message_type(msg: Message) -> int:
    """消息对象对应的帧类型码"""
    try:
        return MESSAGE_TYPES[type(msg)]
    except KeyError:
        raise ValidationError(f"未知的消息对象: {type(msg).__name__}") from None


_ENCODERS = {
    ForwardMsg: encode_forward,
    BackwardMsg: encode_backward,
    ControlMsg: encode_control,
    AckMsg: encode_ack,
    PredictMsg: encode_predict,
}


def encode(msg: Message) -> bytes:
    encoder = _ENCODERS.get(type(msg))
    if encoder is None:
        raise ValidationError(f"无法编码的消息类型: {type(msg).__name__}")
    return encoder(msg)


def decode(frame: bytes) -> Message:
    """按帧头中的消息类型解码任意消息"""
    msg_type, flags, body = parse_header(frame)
    if msg_type == MSG_FORWARD:
        return _decode_forward_body(body, flags)
    if msg_type == MSG_BACKWARD:
        return _decode_backward_body(body)
    if msg_type == MSG_CONTROL:
        return _decode_control_body(body)
    if msg_type == MSG_ACK:
        return _decode_ack_body(body)
    return _decode_predict_body(body)
