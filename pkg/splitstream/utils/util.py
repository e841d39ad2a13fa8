import numpy as np
from splitstream.utils.errors import ValidationError


def parse_endpoint(endpoint: str):
    """
    解析 host:port 形式的端点。

    :param endpoint: 端点字符串，如 '127.0.0.1:5555'
    :return: (host, port)
    """
    if not isinstance(endpoint, str) or ':' not in endpoint:
        raise ValidationError(f"端点格式必须为 host:port，got {endpoint!r}")
    host, _, port_text = endpoint.rpartition(':')
    if not host or not port_text.isdigit():
        raise ValidationError(f"端点格式必须为 host:port，got {endpoint!r}")
    port = int(port_text)
    if not 0 < port < 65536:
        raise ValidationError(f"端口必须在 (0, 65536) 范围内，got {port}")
    return host, port


def tcp_address(endpoint: str) -> str:
    host, port = parse_endpoint(endpoint)
    return f"tcp://{host}:{port}"


def seeded_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    由主种子和若干整数键派生独立的随机数生成器。

    同一组 (seed, keys) 总是得到相同的序列，例如 seeded_rng(seed, epoch)
    用于每个 epoch 的数据打乱。
    """
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])
