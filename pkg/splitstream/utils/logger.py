"""
splitstream 日志模块

loopback 模式下客户端与服务端线程共用一个进程，文本格式带线程名以区分两侧；
训练循环通过 get_structured_logger 附带 epoch、stage_b、字节数等字段，
文本输出追加为 key=value，JSON 输出展开为独立的键。
"""

import json
import logging
from datetime import date, datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict

import numpy as np

TEXT_FORMAT = '[%(levelname)s][%(asctime)s][%(threadName)s] %(message)s'
FILE_FORMAT = '[%(levelname)s][%(asctime)s][%(threadName)s][%(name)s] %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

_SIZE_UNITS = {'KB': 1024, 'MB': 1024 ** 2, 'GB': 1024 ** 3}


def _plain(value):
    """numpy 标量/数组与路径转为可序列化的 Python 值"""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    return value


def _short(value):
    value = _plain(value)
    if isinstance(value, float):
        return f'{value:.6g}'
    return value


class JSONFormatter(logging.Formatter):
    """每条记录一行 JSON"""

    def format(self, record):
        entry = {
            'timestamp': datetime.fromtimestamp(record.created).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'thread': record.threadName,
            'message': record.getMessage(),
            'function': record.funcName,
            'line': record.lineno,
        }
        if record.exc_info:
            entry['exception'] = self.formatException(record.exc_info)
        for key, value in getattr(record, 'fields', {}).items():
            entry[key] = _plain(value)
        return json.dumps(entry, ensure_ascii=False, default=str)


class KeyValueFormatter(logging.Formatter):
    """文本格式，结构化字段以 key=value 追加在消息后"""

    def format(self, record):
        text = super().format(record)
        fields = getattr(record, 'fields', None)
        if fields:
            text += ' ' + ' '.join(f'{k}={_short(v)}' for k, v in fields.items())
        return text


class ColoredFormatter(KeyValueFormatter):
    """按级别着色的控制台格式"""

    COLORS = {
        'DEBUG': '\033[36m',
        'INFO': '\033[32m',
        'WARNING': '\033[33m',
        'ERROR': '\033[31m',
        'CRITICAL': '\033[35m',
    }
    RESET = '\033[0m'

    def format(self, record):
        return f"{self.COLORS.get(record.levelname, '')}{super().format(record)}{self.RESET}"


class StructuredLogger:
    """
    带关键字字段的日志记录器

    用法::

        slog = get_structured_logger('splitstream.schedules')
        slog.info("epoch 完成", epoch=3, stage_b=4, tx_bytes=2048)
    """

    def __init__(self, name: str = 'splitstream'):
        self.logger = logging.getLogger(name)

    def log(self, level: int, message: str, **fields):
        # stacklevel 指向 debug/info/... 的调用方
        self.logger.log(level, message, extra={'fields': fields}, stacklevel=3)

    def debug(self, message: str, **fields):
        self.log(logging.DEBUG, message, **fields)

    def info(self, message: str, **fields):
        self.log(logging.INFO, message, **fields)

    def warning(self, message: str, **fields):
        self.log(logging.WARNING, message, **fields)

    def error(self, message: str, **fields):
        self.log(logging.ERROR, message, **fields)


def _parse_size(text: str) -> int:
    unit = text[-2:].upper()
    if unit in _SIZE_UNITS:
        return int(text[:-2]) * _SIZE_UNITS[unit]
    return int(text)


def create_logger(
    name: str = 'splitstream',
    level: str = 'INFO',
    console_output: bool = True,
    file_output: bool = False,
    log_dir: str = 'logs',
    max_file_size: str = '10MB',
    backup_count: int = 10,
    json_format: bool = False,
    colored_console: bool = True
) -> logging.Logger:
    """
    创建（或重新配置）日志记录器

    Args:
        name: 日志记录器名称，子模块的 logging.getLogger(__name__) 挂在 'splitstream' 下
        level: 日志级别
        console_output: 是否输出到控制台（stderr）
        file_output: 是否写入 {log_dir}/splitstream-YYYY-MM-DD.log
        log_dir: 日志文件目录
        max_file_size: 单个日志文件最大大小，如 '10MB'
        backup_count: 轮转保留的文件数
        json_format: 控制台与文件都使用 JSON 行
        colored_console: 文本格式时控制台是否着色

    Returns:
        logging.Logger: 配置好的日志记录器
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, level.upper()))
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.propagate = False

    if json_format:
        console_formatter = file_formatter = JSONFormatter()
    else:
        file_formatter = KeyValueFormatter(FILE_FORMAT, datefmt=DATE_FORMAT)
        console_cls = ColoredFormatter if colored_console else KeyValueFormatter
        console_formatter = console_cls(TEXT_FORMAT, datefmt=DATE_FORMAT)

    if console_output:
        stream_handler = logging.StreamHandler()
        stream_handler.setFormatter(console_formatter)
        logger.addHandler(stream_handler)

    if file_output:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            Path(log_dir) / f"splitstream-{date.today():%Y-%m-%d}.log",
            maxBytes=_parse_size(max_file_size),
            backupCount=backup_count,
            encoding='utf-8'
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)

    return logger


def setup_logging_from_config(config_dict: Dict[str, Any]) -> logging.Logger:
    """从配置字典（如实验配置的 logging 段）设置日志，键与 create_logger 参数一致"""
    return create_logger(**config_dict)


def get_structured_logger(name: str = 'splitstream') -> StructuredLogger:
    return StructuredLogger(name)


# 默认日志记录器，仅输出到控制台
logger = create_logger()
