"""
splitstream Core 模块
包含自动微分、压缩模块、模型分割、训练调度、数据与配置
"""

# 自动微分
from .tensor import Tensor, Parameter, Tape
# 压缩模块
from .compression import CompressionConfig, LossWeights, Budget
# 模型
from .model import SplitModel, build_vgg11_like, build_mlp, split_at, describe_layers
# 训练调度
from .schedules import TrainPlan, TrainedSet, select_lr, deprune_train, prune_train
# 数据与配置
from .data import Dataset, load_dataset
from .config import ExperimentConfig, load_config

__all__ = [
    'Tensor', 'Parameter', 'Tape',
    'CompressionConfig', 'LossWeights', 'Budget',
    'SplitModel', 'build_vgg11_like', 'build_mlp', 'split_at', 'describe_layers',
    'TrainPlan', 'TrainedSet', 'select_lr', 'deprune_train', 'prune_train',
    'Dataset', 'load_dataset',
    'ExperimentConfig', 'load_config',
]
