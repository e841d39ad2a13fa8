"""
splitstream 客户端模块

包装客户端链路：一次请求对应一次回复，校验回复的类型与批次号。
"""

from typing import Optional

import numpy as np

from splitstream.server import wire
from splitstream.server.link import Link
from splitstream.utils.errors import ProtocolError, SessionError, SplitStreamError, ValidationError
from splitstream.utils.logger import logger


class SplitClient:
    """
    分割训练客户端

    Attributes:
        link (Link): 客户端链路
        batches_completed (int): 已完成前向/反向往返的训练批次数
        next_batch_id (int): 下一个批次号
    """

    def __init__(self, link: Link):
        if link.role != 'client':
            raise ValidationError(f"SplitClient 需要客户端链路，got role={link.role!r}")
        self.link = link
        self.batches_completed = 0
        self.next_batch_id = 0

    def api(self, msg: wire.Message, expected: int) -> wire.Message:
        """
        发送一条消息并等待指定类型的回复

        Args:
            msg: 请求消息
            expected: 期望的回复消息类型

        Returns:
            wire.Message: 解码后的回复

        Raises:
            SessionError: 链路失败或服务端中止会话，带 batches_completed
            ProtocolError: 回复类型不符
        """
        name = wire.MESSAGE_NAMES.get(expected, expected)
        try:
            self.link.send_msg(msg)
            reply = self.link.recv_msg()
            if isinstance(reply, wire.ControlMsg) and reply.kind == wire.CTRL_SHUTDOWN and expected != wire.MSG_CONTROL:
                raise SessionError("服务端中止了会话", self.batches_completed)
            if wire.message_type(reply) != expected:
                raise ProtocolError(f"期望 {name} 回复，got {type(reply).__name__}")
            return reply
        except SessionError as e:
            e.batches_completed = self.batches_completed
            logger.error(f"等待 {name} 回复失败: {e}（已完成 {self.batches_completed} 个批次）")
            raise
        except SplitStreamError as e:
            logger.error(f"等待 {name} 回复失败: {e}")
            raise

    def allocate_batch_id(self) -> int:
        batch_id = self.next_batch_id
        self.next_batch_id += 1
        return batch_id

    def forward(self, msg: wire.ForwardMsg) -> wire.BackwardMsg:
        """
        发送训练前向消息，返回对应的反向消息

        Raises:
            ProtocolError: 批次号或梯度形状与前向消息不一致
        """
        reply = self.api(msg, wire.MSG_BACKWARD)
        if reply.batch_id != msg.batch_id:
            logger.error(f"批次号不匹配: 发送 {msg.batch_id}，收到 {reply.batch_id}")
            raise ProtocolError(f"批次号不匹配: 发送 {msg.batch_id}，收到 {reply.batch_id}")
        if reply.grad_payload.shape != msg.payload.shape or reply.grad_f.shape != np.shape(msg.f):
            raise ProtocolError(
                f"梯度形状不匹配: grad_payload {reply.grad_payload.shape} vs {msg.payload.shape}，"
                f"grad_f {reply.grad_f.shape} vs {np.shape(msg.f)}"
            )
        self.batches_completed += 1
        return reply

    def predict(self, msg: wire.ForwardMsg) -> wire.PredictMsg:
        """发送推理前向消息（不带标签），返回服务端 logits"""
        if not msg.inference:
            raise ValidationError("predict 只接受推理帧（labels=None）")
        reply = self.api(msg, wire.MSG_PREDICT)
        if reply.batch_id != msg.batch_id or reply.batch != msg.batch:
            raise ProtocolError(f"推理回复不匹配: 批次 {reply.batch_id}/{reply.batch}，期望 {msg.batch_id}/{msg.batch}")
        return reply

    def control(self, kind: int, stage: int, epoch: int = 0, b: int = 0,
                B: Optional[float] = None) -> wire.AckMsg:
        """发送控制消息并等待确认"""
        msg = wire.ControlMsg(kind, stage, epoch, b, float(b if B is None else B))
        ack = self.api(msg, wire.MSG_ACK)
        expected_ref = stage if kind == wire.CTRL_STAGE_CHANGE else epoch
        if ack.acked_type != wire.MSG_CONTROL or ack.ref != expected_ref:
            raise ProtocolError(f"确认消息不匹配: acked_type={ack.acked_type} ref={ack.ref}，期望 ref={expected_ref}")
        return ack

    def shutdown(self):
        """通知服务端结束会话"""
        self.control(wire.CTRL_SHUTDOWN, stage=0)

    def close(self):
        self.link.close()

