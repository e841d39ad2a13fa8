"""
splitstream 链路模块

在 ZeroMQ REQ-REP 套接字上承载 wire 帧：客户端（REQ）发送请求并等待回复，
服务端（REP）等待请求并回复，天然保证一次只有一个未完成的批次。

- link_listen / link_connect: TCP 链路，每条链路持有独立的 zmq.Context
- loopback_link: 进程内 inproc 链路对，共享 zmq.Context.instance()

收发计数按帧的实际长度累加（含帧头），并按消息类型分别统计。
"""

import itertools
import logging
import time
from collections import Counter
from typing import Callable, Optional, Tuple

import zmq

from splitstream.server import wire
from splitstream.utils.errors import LinkTimeoutError, SessionError, StateError
from splitstream.utils.util import tcp_address

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 60.0
POLL_INTERVAL_MS = 200

_loopback_ids = itertools.count()

# 推理前向帧的计数键
INFERENCE = 0


def _kind(frame: bytes) -> int:
    return INFERENCE if wire.is_inference(frame) else wire.peek_type(frame)


class Link:
    """
    一个会话独占的双向帧通道

    Attributes:
        role (str): 'client' 或 'server'
        address (str): zmq 地址，如 tcp://127.0.0.1:5555 或 inproc://splitstream-0
        timeout_s (float): 接收空闲超时（秒）
        tx_by_type (Counter): 按消息类型统计的发送字节数，推理前向帧记在 INFERENCE 键下
        rx_by_type (Counter): 按消息类型统计的接收字节数
    """

    def __init__(self, socket: zmq.Socket, role: str, address: str,
                 timeout_s: float = DEFAULT_TIMEOUT_S, context: Optional[zmq.Context] = None):
        self.socket = socket
        self.role = role
        self.address = address
        self.timeout_s = timeout_s
        self._context = context
        self.tx_bytes = 0
        self.rx_bytes = 0
        self.tx_by_type: Counter = Counter()
        self.rx_by_type: Counter = Counter()
        self.closed = False

    # ── 收发 ──

    def send(self, frame: bytes):
        """
        发送一帧

        Raises:
            SessionError: 对端不可达或发送超时
        """
        self._check_open()
        try:
            self.socket.send(frame, copy=False)
        except zmq.Again as e:
            raise SessionError(f"发送超时，对端不可达: {self.address}") from e
        except zmq.ZMQError as e:
            raise SessionError(f"发送失败: {e}") from e
        self.tx_bytes += len(frame)
        self.tx_by_type[_kind(frame)] += len(frame)

    def recv(self, stop: Optional[Callable[[], bool]] = None,
             timeout_s: Optional[float] = None) -> bytes:
        """
        阻塞等待一帧

        Args:
            stop: 轮询间隙调用，返回 True 时放弃等待
            timeout_s: 覆盖链路的空闲超时

        Raises:
            LinkTimeoutError: 超时仍未收到数据
            SessionError: 等待被 stop 中断或套接字出错
        """
        self._check_open()
        timeout = self.timeout_s if timeout_s is None else timeout_s
        deadline = time.monotonic() + timeout
        while True:
            try:
                ready = self.socket.poll(POLL_INTERVAL_MS, zmq.POLLIN)
                if ready:
                    frame = self.socket.recv(copy=True)
                    break
            except zmq.ZMQError as e:
                raise SessionError(f"接收失败: {e}") from e
            if stop is not None and stop():
                raise SessionError("等待被中断，链路正在关闭")
            if time.monotonic() >= deadline:
                raise LinkTimeoutError(f"{timeout:.0f} 秒内未收到数据: {self.address}")
        self.rx_bytes += len(frame)
        self.rx_by_type[_kind(frame)] += len(frame)
        return frame

    def send_msg(self, msg: wire.Message) -> int:
        """编码并发送消息，返回帧长度"""
        frame = wire.encode(msg)
        self.send(frame)
        return len(frame)

    def recv_msg(self, stop: Optional[Callable[[], bool]] = None) -> wire.Message:
        return wire.decode(self.recv(stop))

    # ── 计数 ──

    def byte_count(self) -> Tuple[int, int]:
        """(发送字节数, 接收字节数)，含帧头与控制帧"""
        return self.tx_bytes, self.rx_bytes

    def data_byte_count(self) -> Tuple[int, int]:
        """只统计训练数据面（训练 Forward / Backward）的 (发送, 接收) 字节数，不含推理帧"""
        kinds = (wire.MSG_FORWARD, wire.MSG_BACKWARD)
        return (sum(self.tx_by_type[k] for k in kinds),
                sum(self.rx_by_type[k] for k in kinds))

    # ── 生命周期 ──

    def _check_open(self):
        if self.closed:
            raise StateError(f"链路已关闭: {self.address}")

    def close(self):
        if self.closed:
            return
        self.closed = True
        self.socket.close(linger=0)
        if self._context is not None:
            self._context.term()
        logger.info(f"链路已关闭: {self.role} {self.address}")

    def __enter__(self) -> 'Link':
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False

    def __repr__(self):
        return f"Link(role={self.role!r}, address={self.address!r}, tx={self.tx_bytes}, rx={self.rx_bytes})"


def byte_count(link: Link) -> Tuple[int, int]:
    """会话的 (tx_bytes, rx_bytes)"""
    return link.byte_count()


def _client_socket(context: zmq.Context, timeout_s: float) -> zmq.Socket:
    socket = context.socket(zmq.REQ)
    socket.setsockopt(zmq.LINGER, 0)
    # 未建立连接时不排队，发送超时即视为对端不可达
    socket.setsockopt(zmq.IMMEDIATE, 1)
    socket.setsockopt(zmq.SNDTIMEO, int(timeout_s * 1000))
    return socket


def link_listen(endpoint: str, timeout_s: float = DEFAULT_TIMEOUT_S) -> Link:
    """
    在 host:port 上监听（服务端角色）

    Raises:
        ValidationError: 端点格式错误
        SessionError: 端口无法绑定
    """
    address = tcp_address(endpoint)
    context = zmq.Context()
    socket = context.socket(zmq.REP)
    socket.setsockopt(zmq.LINGER, 0)
    try:
        socket.bind(address)
    except zmq.ZMQError as e:
        socket.close()
        context.term()
        raise SessionError(f"无法绑定 {address}: {e}") from e
    logger.info(f"服务端链路监听在 {address}")
    return Link(socket, 'server', address, timeout_s, context)


def link_connect(endpoint: str, timeout_s: float = DEFAULT_TIMEOUT_S) -> Link:
    """
    连接到 host:port（客户端角色）

    zmq 的连接是异步的；对端不存在时在第一次发送超时后抛出 SessionError。
    """
    address = tcp_address(endpoint)
    context = zmq.Context()
    socket = _client_socket(context, timeout_s)
    try:
        socket.connect(address)
    except zmq.ZMQError as e:
        socket.close()
        context.term()
        raise SessionError(f"无法连接 {address}: {e}") from e
    logger.info(f"客户端链路连接到 {address}")
    return Link(socket, 'client', address, timeout_s, context)


def loopback_link(timeout_s: float = DEFAULT_TIMEOUT_S) -> Tuple[Link, Link]:
    """
    进程内链路对

    Returns:
        (client_link, server_link)
    """
    context = zmq.Context.instance()
    address = f"inproc://splitstream-{next(_loopback_ids)}"
    server_socket = context.socket(zmq.REP)
    server_socket.setsockopt(zmq.LINGER, 0)
    server_socket.bind(address)
    client_socket = _client_socket(context, timeout_s)
    client_socket.connect(address)
    logger.info(f"进程内链路已建立: {address}")
    return (Link(client_socket, 'client', address, timeout_s),
            Link(server_socket, 'server', address, timeout_s))
