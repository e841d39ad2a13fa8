"""
splitstream Utils 模块
包含日志、异常体系和通用工具函数
"""

from .logger import logger, create_logger, get_structured_logger, setup_logging_from_config
from .errors import (
    SplitStreamError, DimensionError, ValidationError, FormatError, StateError,
    FramingError, ProtocolError, ControlError, SessionError, LinkTimeoutError,
)
from .util import parse_endpoint, tcp_address, seeded_rng

__all__ = [
    'logger', 'create_logger', 'get_structured_logger', 'setup_logging_from_config',
    'SplitStreamError', 'DimensionError', 'ValidationError', 'FormatError', 'StateError',
    'FramingError', 'ProtocolError', 'ControlError', 'SessionError', 'LinkTimeoutError',
    'parse_endpoint', 'tcp_address', 'seeded_rng',
]
