"""
splitstream 配置模块

实验配置以 YAML 描述，加载为 pydantic 模型树；各实验组（arm）的约束在模型校验阶段检查。

示例::

    arm: deprune
    split: 5
    model: {kind: vgg11-like, width_scale: 0.5}
    dataset: {kind: cifar10-binary, subset: [0, 1], train_per_class: 2000, test_per_class: 500}
    compression: {r: 1}
    loss_weights: {delta: 0.1, lambda: 0.5, epsilon: 0.1}
    plan:
      total_epochs: 20
      stages:
        - {b: 4, epochs: 15}
        - {b: phi, epochs: null}
"""

import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from splitstream.core.compression import Budget, CompressionConfig, LossWeights
from splitstream.core.data import DATA_ENV
from splitstream.core.schedules import TrainPlan
from splitstream.utils.errors import ValidationError

ARMS = ('deprune', 'prune', 'no-compression', 'high-compression', 'from-scratch-at-B', 'no-module')
LINK_ARMS = ('deprune', 'no-compression', 'high-compression')

Arm = Literal['deprune', 'prune', 'no-compression', 'high-compression', 'from-scratch-at-B', 'no-module']


class _Spec(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True)


class ModelSpec(_Spec):
    """骨干网络：vgg11-like 使用 width_scale，mlp 使用 widths（首项为输入维度，末项为类别数）"""
    kind: Literal['vgg11-like', 'mlp'] = 'vgg11-like'
    width_scale: float = Field(0.5, gt=0, le=1)
    widths: Optional[List[int]] = None
    image_size: int = Field(32, gt=0)

    @model_validator(mode='after')
    def _check_widths(self):
        if self.kind == 'mlp' and (not self.widths or len(self.widths) < 2):
            raise ValueError("mlp 模型需要至少 2 个 widths")
        return self


class DatasetSpec(_Spec):
    kind: Literal['cifar10-binary', 'idx', 'synthetic'] = 'synthetic'
    root: Optional[str] = None
    subset: Optional[List[int]] = None
    train_per_class: Optional[int] = Field(None, gt=0)
    test_per_class: Optional[int] = Field(None, gt=0)
    files: Optional[Dict[str, str]] = None
    # synthetic
    classes: int = Field(2, ge=2)
    dims: int = Field(64, gt=0)
    n_per_class: int = Field(500, gt=0)
    seed: Optional[int] = None
    image_shape: Optional[List[int]] = None


class CompressionSpec(_Spec):
    r: int = Field(1, ge=1)
    phi: Optional[int] = Field(None, gt=0)
    bypass: bool = False
    kernel: Optional[int] = Field(None, gt=0)

    def to_config(self) -> CompressionConfig:
        return CompressionConfig(r=self.r, phi=self.phi, bypass=self.bypass, kernel=self.kernel)


class LossWeightsSpec(_Spec):
    delta: float = Field(1.0, gt=0)
    lam: float = Field(0.5, ge=0, le=1, alias='lambda')
    epsilon: float = Field(0.1, ge=0)

    def to_weights(self) -> LossWeights:
        return LossWeights(delta=self.delta, lam=self.lam, epsilon=self.epsilon)


class StageSpec(_Spec):
    """一个预算阶段；b 可写 'phi'，epochs 为 null 表示总 epoch 数的剩余部分"""
    b: Union[int, Literal['phi']]
    B: Optional[float] = Field(None, ge=0)
    epochs: Optional[int] = Field(None, gt=0)

    @model_validator(mode='after')
    def _check_b(self):
        if isinstance(self.b, int) and self.b <= 0:
            raise ValueError(f"b 必须为正数，got {self.b}")
        return self


class PlanSpec(_Spec):
    stages: List[StageSpec]
    total_epochs: Optional[int] = Field(None, gt=0)
    l_k: int = Field(2, ge=0)
    gamma_boost: float = Field(5.0, gt=0)
    base_lr: float = Field(1e-5, gt=0)
    weight_decay: float = Field(5e-4, ge=0)
    batch_size: int = Field(64, ge=2)
    reset_threshold: float = 0.5

    @model_validator(mode='after')
    def _check_epochs(self):
        if not self.stages:
            raise ValueError("plan.stages 不能为空")
        open_stages = [i for i, s in enumerate(self.stages) if s.epochs is None]
        if open_stages and open_stages != [len(self.stages) - 1]:
            raise ValueError("只有最后一个阶段可以省略 epochs")
        if open_stages:
            if self.total_epochs is None:
                raise ValueError("最后一个阶段省略 epochs 时必须给出 total_epochs")
            used = sum(s.epochs for s in self.stages[:-1])
            if self.total_epochs <= used:
                raise ValueError(f"total_epochs={self.total_epochs} 不大于前面阶段之和 {used}")
        elif self.total_epochs is not None and self.total_epochs != sum(s.epochs for s in self.stages):
            raise ValueError("total_epochs 与各阶段 epochs 之和不一致")
        return self

    def resolved_epochs(self) -> List[int]:
        epochs = [s.epochs for s in self.stages]
        if epochs[-1] is None:
            epochs[-1] = self.total_epochs - sum(epochs[:-1])
        return epochs


class TransportSpec(_Spec):
    kind: Literal['loopback', 'tcp'] = 'loopback'
    role: Literal['loopback', 'client', 'server'] = 'loopback'
    listen: Optional[str] = None
    connect: Optional[str] = None
    timeout_s: float = Field(60.0, gt=0)

    @model_validator(mode='after')
    def _check_role(self):
        if self.kind == 'loopback' and self.role != 'loopback':
            raise ValueError(f"loopback 传输只支持 role=loopback，got {self.role}")
        if self.kind == 'tcp':
            if self.role == 'loopback':
                raise ValueError("tcp 传输需要 role=client 或 role=server")
            if self.role == 'server' and not self.listen:
                raise ValueError("server 角色需要 listen 端点")
            if self.role == 'client' and not self.connect:
                raise ValueError("client 角色需要 connect 端点")
        return self


class LoggingSpec(_Spec):
    level: str = 'INFO'
    file_output: bool = False
    log_dir: str = 'logs'
    json_format: bool = False
    progress: bool = False

    def logger_kwargs(self) -> dict:
        return {'level': self.level, 'file_output': self.file_output, 'log_dir': self.log_dir,
                'json_format': self.json_format}


class ExperimentConfig(_Spec):
    """完整实验配置"""
    arm: Arm = 'deprune'
    seed: int = 0
    split: int = Field(5, ge=0)
    output: str = 'runs/metrics.csv'
    model: ModelSpec = Field(default_factory=ModelSpec)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    compression: CompressionSpec = Field(default_factory=CompressionSpec)
    loss_weights: LossWeightsSpec = Field(default_factory=LossWeightsSpec)
    plan: PlanSpec
    transport: TransportSpec = Field(default_factory=TransportSpec)
    logging: LoggingSpec = Field(default_factory=LoggingSpec)

    @model_validator(mode='after')
    def _check_arm(self):
        stages = self.plan.stages
        numeric = [s.b for s in stages if s.b != 'phi']
        if self.arm in ('no-compression', 'high-compression', 'from-scratch-at-B', 'no-module') and len(stages) != 1:
            raise ValueError(f"{self.arm} 只允许一个阶段，got {len(stages)} 个")
        if self.arm == 'no-compression' and stages[0].b != 'phi':
            raise ValueError("no-compression 要求 b=phi")
        if self.arm == 'high-compression' and stages[0].b == 'phi':
            raise ValueError("high-compression 需要一个较小的整数 b")
        if self.arm == 'deprune':
            if any(s.b == 'phi' for s in stages[:-1]):
                raise ValueError("deprune 计划中只有最后一个阶段可以是 b=phi")
            if any(a >= b for a, b in zip(numeric, numeric[1:])):
                raise ValueError(f"deprune 计划的预算必须严格递增，got {numeric}")
        if self.arm == 'prune':
            if stages[0].b != 'phi' or any(s.b == 'phi' for s in stages[1:]):
                raise ValueError("prune 计划必须以 b=phi 开始，之后为整数预算")
            if any(a <= b for a, b in zip(numeric, numeric[1:])):
                raise ValueError(f"prune 计划的预算必须严格递减，got {numeric}")
        return self

    @property
    def uses_link(self) -> bool:
        return self.arm in LINK_ARMS


def resolve_plan(cfg: ExperimentConfig, phi: int) -> TrainPlan:
    """
    把配置中的计划解析为 TrainPlan（'phi' → φ，省略的 epochs → 剩余 epoch 数）

    Raises:
        ValidationError: 预算超过 φ
    """
    stages = []
    for s in cfg.plan.stages:
        b = phi if s.b == 'phi' else s.b
        if b > phi:
            raise ValidationError(f"预算 b={b} 超过 φ={phi}")
        stages.append(Budget(b, s.B))
    p = cfg.plan
    return TrainPlan(
        stages=stages, epochs=p.resolved_epochs(), l_k=p.l_k, gamma_boost=p.gamma_boost,
        base_lr=p.base_lr, weight_decay=p.weight_decay, batch_size=p.batch_size, seed=cfg.seed,
        reset_threshold=p.reset_threshold, weights=cfg.loss_weights.to_weights(),
    )


def parse_config(data: dict) -> ExperimentConfig:
    """
    校验配置字典

    Raises:
        ValidationError: 配置不合法（包装 pydantic 的校验信息）
    """
    try:
        cfg = ExperimentConfig.model_validate(data or {})
    except PydanticValidationError as e:
        raise ValidationError(f"配置无效: {e}") from e
    env_root = os.environ.get(DATA_ENV)
    if env_root and cfg.dataset.root != env_root:
        cfg = cfg.model_copy(update={'dataset': cfg.dataset.model_copy(update={'root': env_root})})
    return cfg


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """从 YAML 文件加载实验配置"""
    with open(path, 'r', encoding='utf-8') as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise ValidationError(f"无法解析配置文件 {path}: {e}") from e
    return parse_config(data)


def apply_overrides(cfg: ExperimentConfig, arm: Optional[str] = None, seed: Optional[int] = None,
                    role: Optional[str] = None, listen: Optional[str] = None,
                    connect: Optional[str] = None, output: Optional[str] = None) -> ExperimentConfig:
    """
    用命令行参数覆盖配置并重新校验

    role 为 client/server 时传输切换为 tcp，为 loopback 时切换为进程内链路。
    """
    data = cfg.model_dump(mode='json', by_alias=True)
    if arm is not None:
        data['arm'] = arm
    if seed is not None:
        data['seed'] = seed
    if output is not None:
        data['output'] = output
    transport = data['transport']
    if role is not None:
        transport['role'] = role
        transport['kind'] = 'loopback' if role == 'loopback' else 'tcp'
    if listen is not None:
        transport['listen'] = listen
    if connect is not None:
        transport['connect'] = connect
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    """配置转为 YAML 文本（用于指标 CSV 的注释头）"""
    return yaml.safe_dump(cfg.model_dump(mode='json', by_alias=True), sort_keys=False, allow_unicode=True)
