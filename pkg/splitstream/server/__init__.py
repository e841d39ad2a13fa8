"""
链路模块
包含 SPLW 线协议、ZeroMQ 链路、分割训练客户端与服务端
"""

from . import wire
from .link import Link, byte_count, link_listen, link_connect, loopback_link
from .split_client import SplitClient
from .split_server import SplitServer

__all__ = [
    'wire', 'Link', 'byte_count', 'link_listen', 'link_connect', 'loopback_link',
    'SplitClient', 'SplitServer',
]
