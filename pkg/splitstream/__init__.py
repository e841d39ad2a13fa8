"""
splitstream - 带可学习压缩瓶颈的分割学习引擎

统一的访问接口，支持 splitstream.xxx 的访问模式
"""

from importlib.metadata import version, PackageNotFoundError

try:
    __version__ = version("splitstream")
except PackageNotFoundError:
    __version__ = "0.1.0"  # fallback version

# 核心功能直接导入
from splitstream.core.model import SplitModel, build_vgg11_like, build_mlp, split_at
from splitstream.core.schedules import TrainPlan, deprune_train, prune_train
from splitstream.core.config import ExperimentConfig, load_config

# 子模块导入
from splitstream import core, server, utils

__all__ = [
    # 核心功能
    'SplitModel', 'build_vgg11_like', 'build_mlp', 'split_at',
    'TrainPlan', 'deprune_train', 'prune_train',
    'ExperimentConfig', 'load_config',
    # 子模块
    'core', 'server', 'utils',
]
