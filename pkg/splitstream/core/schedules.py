"""
splitstream 训练调度模块

- deprune：客户端与服务端锁步训练，预算从小到大分阶段放开；客户端经链路发送压缩载荷，
  服务端回传对载荷与 f 的梯度；
- prune：单进程内完整前向/反向，预算从 φ 逐级缩小，每级结束保存参数并重置饱和门控；
- select_lr：非初始阶段前 l_k 个 epoch 学习率乘以 γ。

本地训练的各个入口按锁步分割训练应当传输的帧长度累计虚拟字节数。
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from splitstream.core import ops
from splitstream.core.checkpoint import save_checkpoint
from splitstream.core.compression import (
    DEFAULT_RESET_THRESHOLD, Budget, FilterVector, LossWeights, compress, decompress,
    prune_loss, reset_prune, select_channels, total_loss,
)
from splitstream.core.data import Dataset, eval_batches, iter_batches
from splitstream.core.model import ModelState, SplitModel, forward_layers
from splitstream.core.optim import DEFAULT_LR, DEFAULT_WEIGHT_DECAY, sgd_step
from splitstream.core.tensor import Tensor, Tape
from splitstream.server import wire
from splitstream.server.link import Link
from splitstream.server.split_client import SplitClient
from splitstream.utils.errors import (
    ControlError, FramingError, ProtocolError, SplitStreamError, ValidationError,
    validate_non_negative, validate_positive,
)
from splitstream.utils.logger import get_structured_logger
from splitstream.utils.util import seeded_rng

slog = get_structured_logger('splitstream.schedules')

DEFAULT_BOOST_EPOCHS = 2
DEFAULT_GAMMA_BOOST = 5.0
DEFAULT_BATCH_SIZE = 64
EVAL_BATCH_SIZE = 256


# ── 计划与状态 ──

@dataclass(frozen=True)
class TrainPlan:
    """
    训练计划

    Attributes:
        stages (tuple): 按执行顺序排列的预算阶段
        epochs (tuple): 与 stages 一一对应的 epoch 数
        l_k (int): 非初始阶段学习率提升的 epoch 数
        gamma_boost (float): 学习率提升倍数 γ
        base_lr (float): 基础学习率
        weight_decay (float): 权重衰减
        batch_size (int): 批大小
        seed (int): 随机种子（初始化与数据打乱）
        reset_threshold (float): prune 阶段切换时重置门控的阈值
        weights (LossWeights): pruneLoss / totalLoss 权重
    """
    stages: Tuple[Budget, ...]
    epochs: Tuple[int, ...]
    l_k: int = DEFAULT_BOOST_EPOCHS
    gamma_boost: float = DEFAULT_GAMMA_BOOST
    base_lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    batch_size: int = DEFAULT_BATCH_SIZE
    seed: int = 0
    reset_threshold: float = DEFAULT_RESET_THRESHOLD
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        object.__setattr__(self, 'stages', tuple(self.stages))
        object.__setattr__(self, 'epochs', tuple(int(e) for e in self.epochs))
        if not self.stages:
            raise ValidationError("训练计划至少需要一个阶段")
        if len(self.stages) != len(self.epochs):
            raise ValidationError(f"阶段数 {len(self.stages)} 与 epoch 列表长度 {len(self.epochs)} 不一致")
        for e in self.epochs:
            validate_positive(e, 'epochs')
        validate_non_negative(self.l_k, 'l_k')
        validate_positive(self.gamma_boost, 'gamma_boost')
        validate_positive(self.base_lr, 'base_lr')
        validate_non_negative(self.weight_decay, 'weight_decay')
        validate_positive(self.batch_size, 'batch_size')
        if len(self.epochs) > 1 and self.l_k > min(self.epochs[1:]):
            raise ValidationError(f"l_k={self.l_k} 不能超过非初始阶段的最小 epoch 数 {min(self.epochs[1:])}")

    @property
    def budgets(self) -> List[int]:
        return [s.b for s in self.stages]

    @property
    def total_epochs(self) -> int:
        return sum(self.epochs)

    def epochs_per_budget(self) -> Dict[int, int]:
        return {s.b: e for s, e in zip(self.stages, self.epochs)}

    def locate(self, epoch: int) -> Tuple[int, int]:
        """全局 epoch → (阶段, 阶段内 epoch)"""
        for stage, count in enumerate(self.epochs):
            if epoch < count:
                return stage, epoch
            epoch -= count
        raise ValidationError(f"epoch 超出计划范围（共 {self.total_epochs} 个）")

    def validate_deprune(self, phi: int):
        """deprune 计划：b 严格递增且不超过 φ"""
        budgets = self.budgets
        if any(a >= b for a, b in zip(budgets, budgets[1:])):
            raise ValidationError(f"deprune 计划的预算必须严格递增，got {budgets}")
        if budgets[-1] > phi:
            raise ValidationError(f"预算 {budgets[-1]} 超过 φ={phi}")

    def validate_prune(self, phi: int):
        """prune 计划：首阶段 b == φ，之后严格递减"""
        budgets = self.budgets
        if budgets[0] != phi:
            raise ValidationError(f"prune 计划的首阶段必须是 b=φ={phi}，got {budgets[0]}")
        if any(a <= b for a, b in zip(budgets, budgets[1:])):
            raise ValidationError(f"prune 计划的预算必须严格递减，got {budgets}")


def select_lr(stage_index: int, epoch_in_stage: int, plan: TrainPlan) -> float:
    """非初始阶段的前 l_k 个 epoch 返回 base_lr·γ，其余返回 base_lr"""
    if stage_index > 0 and epoch_in_stage < plan.l_k:
        return plan.base_lr * plan.gamma_boost
    return plan.base_lr


@dataclass
class StageState:
    """
    一个 epoch 内的训练进度

    tx_bytes / rx_bytes 为会话累计的数据面字节数，只增不减。
    """
    stage: int
    epoch_in_stage: int
    lr: float
    tx_bytes: int = 0
    rx_bytes: int = 0
    batches: int = 0
    samples: int = 0
    task_loss_sum: float = 0.0
    prune_loss_sum: float = 0.0
    sum_f: float = 0.0

    def update_bytes(self, tx_total: int, rx_total: int):
        if tx_total < self.tx_bytes or rx_total < self.rx_bytes:
            raise ValidationError(f"累计字节数不能减少: ({self.tx_bytes}, {self.rx_bytes}) → ({tx_total}, {rx_total})")
        self.tx_bytes, self.rx_bytes = tx_total, rx_total

    def record(self, task_loss: float, p_loss: float, sum_f: float, samples: int):
        self.batches += 1
        self.samples += samples
        self.task_loss_sum += task_loss
        self.prune_loss_sum += p_loss
        self.sum_f = sum_f

    @property
    def mean_task_loss(self) -> float:
        return self.task_loss_sum / self.batches if self.batches else float('nan')

    @property
    def mean_prune_loss(self) -> float:
        return self.prune_loss_sum / self.batches if self.batches else float('nan')


@dataclass
class TrainedSet:
    """
    prune 每个阶段结束时的参数集合 Θ

    Attributes:
        checkpoints (dict): b → 参数与统计量快照
        accuracies (dict): b → 保存时的测试准确率
        paths (dict): b → 检查点文件路径（写盘时）
    """
    checkpoints: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)
    accuracies: Dict[int, float] = field(default_factory=dict)
    paths: Dict[int, Path] = field(default_factory=dict)

    def add(self, b: int, arrays: Dict[str, np.ndarray], accuracy: float, path: Optional[Path] = None):
        self.checkpoints[b] = arrays
        self.accuracies[b] = accuracy
        if path is not None:
            self.paths[b] = path

    @property
    def budgets(self) -> List[int]:
        return list(self.checkpoints)

    def __len__(self):
        return len(self.checkpoints)

    def __contains__(self, b: int):
        return b in self.checkpoints

    def __getitem__(self, b: int) -> Dict[str, np.ndarray]:
        return self.checkpoints[b]


@dataclass
class BatchResult:
    """单个训练批次的指标（字节数为会话累计值）"""
    epoch: int
    stage: int
    b: int
    batch: int
    task_loss: float
    prune_loss: float
    sum_f: float
    tx_bytes: int
    rx_bytes: int
    samples: int


@dataclass
class EpochResult:
    """单个 epoch 的汇总指标"""
    epoch: int
    stage: int
    b: int
    test_acc: float
    tx_bytes: int
    rx_bytes: int
    samples: int
    seconds: float
    task_loss: float
    prune_loss: float
    sum_f: float

    @property
    def samples_per_sec(self) -> float:
        return self.samples / self.seconds if self.seconds > 0 else 0.0


BatchCallback = Optional[Callable[[BatchResult], None]]
EpochCallback = Optional[Callable[[EpochResult], None]]


# ── 模型两半 ──

@dataclass
class ClientHalf:
    """客户端持有的层 1..n 与压缩模块（含 f̂）"""
    model: SplitModel
    state: ModelState

    @classmethod
    def init(cls, model: SplitModel, seed: int, dtype=np.float32) -> 'ClientHalf':
        return cls(model, model.client_state(model.init_state(seed, dtype)))

    @property
    def filter(self) -> FilterVector:
        return self.state.filter

    def forward(self, x: Tensor, train: bool = True) -> Tuple[Tensor, Tensor]:
        """l_0 → l_n → (l_c, f)"""
        l_n = forward_layers(self.model.client_layers, x, self.state, train=train)
        return compress(l_n, self.model.compression_cfg, self.filter, self.state, train=train)


@dataclass
class ServerHalf:
    """服务端持有的解压模块与层 n+1..L"""
    model: SplitModel
    state: ModelState

    @classmethod
    def init(cls, model: SplitModel, seed: int, dtype=np.float32) -> 'ServerHalf':
        return cls(model, model.server_state(model.init_state(seed, dtype)))

    def forward(self, payload: Tensor, indices, train: bool = True) -> Tensor:
        """(载荷, 下标) → l_d → logits"""
        l_d = decompress(payload, indices, self.model.compression_cfg, self.state, train=train)
        return forward_layers(self.model.server_layers, l_d, self.state, train=train)


def split_halves(model: SplitModel, state: ModelState) -> Tuple[ClientHalf, ServerHalf]:
    """在同一个完整状态上构造两半（共享参数对象）"""
    return ClientHalf(model, model.client_state(state)), ServerHalf(model, model.server_state(state))


def _wire_shape(model: SplitModel) -> Tuple[int, int]:
    return model.compression_cfg.compressed_spatial()


def _to_wire(payload: np.ndarray, model: SplitModel) -> np.ndarray:
    h, w = _wire_shape(model)
    return payload.reshape(payload.shape[0], payload.shape[1], h, w)


def _from_wire(payload: np.ndarray, model: SplitModel) -> np.ndarray:
    if model.compression_cfg.vector:
        return payload.reshape(payload.shape[0], payload.shape[1])
    return payload


def _forward_msg(client: ClientHalf, batch_id: int, stage: int, b: int, indices, f: Tensor,
                 labels, payload: Tensor) -> wire.ForwardMsg:
    h, w = _wire_shape(client.model)
    return wire.ForwardMsg(
        batch_id=batch_id, stage=stage, b=b, phi=client.model.phi, height=h, width=w,
        batch=payload.shape[0], indices=np.asarray(indices, dtype=np.int64),
        f=f.data.astype(np.float32), labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        payload=_to_wire(payload.data, client.model).astype(np.float32),
    )


def frame_bytes(model: SplitModel, b: int, batch: int) -> Tuple[int, int]:
    """一个锁步批次的 (前向帧, 反向帧) 字节数"""
    h, w = _wire_shape(model)
    return (wire.forward_frame_size(b, model.phi, h, w, batch),
            wire.backward_frame_size(b, model.phi, h, w, batch))


# ── deprune 客户端 ──

def deprune_client_epoch(client: ClientHalf, plan: TrainPlan, stage: int,
                         data_batches: Iterable[Tuple[np.ndarray, np.ndarray]], link: SplitClient,
                         epoch: int = 0, epoch_in_stage: int = 0,
                         on_batch: BatchCallback = None) -> StageState:
    """
    客户端训练一个 epoch

    每个批次：前向到 l_n → 压缩 → 选取前 b 个通道 → 发送 ForwardMsg → 等待 BackwardMsg
    → 把对载荷和 f 的梯度注入本地 Tape → 对客户端参数（含 f̂）执行 SGD。

    Args:
        client: 客户端半模型
        plan: 训练计划
        stage: 当前阶段下标
        data_batches: (x, y) 批次迭代器
        link: 客户端链路
        epoch: 全局 epoch 编号（写入指标）
        epoch_in_stage: 阶段内 epoch，用于 select_lr

    Raises:
        SessionError: 链路失败，带已完成批次数
        ProtocolError: 批次号或梯度形状不符
    """
    if not 0 <= stage < len(plan.stages):
        raise ValidationError(f"阶段下标 {stage} 超出计划范围")
    budget = plan.stages[stage]
    lr = select_lr(stage, epoch_in_stage, plan)
    state = StageState(stage, epoch_in_stage, lr, *link.link.data_byte_count())

    for i, (x, y) in enumerate(data_batches):
        with Tape() as tape:
            l_c, f = client.forward(Tensor(x), train=True)
            indices, payload = select_channels(l_c, f, budget.b)
        msg = _forward_msg(client, link.allocate_batch_id(), stage, budget.b, indices, f, y, payload)
        reply = link.forward(msg)

        grad = _from_wire(reply.grad_payload, client.model)
        tape.backward_from([(payload, grad), (f, reply.grad_f)])
        sgd_step(client.state.learnable(), lr, plan.weight_decay)

        sum_f = float(np.sum(msg.f, dtype=np.float64))
        state.update_bytes(*link.link.data_byte_count())
        state.record(reply.task_loss, reply.prune_loss, sum_f, len(y))
        slog.debug("批次完成", epoch=epoch, batch=i, stage_b=budget.b,
                   task_loss=reply.task_loss, prune_loss=reply.prune_loss, sum_f=sum_f)
        if on_batch is not None:
            on_batch(BatchResult(epoch, stage, budget.b, i, reply.task_loss, reply.prune_loss,
                                 sum_f, state.tx_bytes, state.rx_bytes, len(y)))
    return state


def evaluate_remote(client: ClientHalf, b: int, batches: Iterable[Tuple[np.ndarray, np.ndarray]],
                    link: SplitClient, stage: int = 0) -> float:
    """经链路推理评估：客户端发送不带标签的前向帧，服务端返回 logits"""
    correct = total = 0
    for x, y in batches:
        l_c, f = client.forward(Tensor(x), train=False)
        indices, payload = select_channels(l_c, f, b)
        msg = _forward_msg(client, link.allocate_batch_id(), stage, b, indices, f, None, payload)
        reply = link.predict(msg)
        correct += int((reply.logits.argmax(axis=1) == y).sum())
        total += len(y)
    return correct / total if total else 0.0


def deprune_train(client: ClientHalf, plan: TrainPlan, dataset: Dataset, link: SplitClient,
                  on_batch: BatchCallback = None, on_epoch: EpochCallback = None,
                  shutdown: bool = True, progress: bool = False) -> List[EpochResult]:
    """
    客户端侧完整的 deprune 会话

    按阶段训练；阶段切换与每个 epoch 结束时发送控制消息，每个 epoch 后经链路评估一次测试集，
    最后通知服务端结束会话。
    """
    plan.validate_deprune(client.model.phi)
    results = []
    epoch = 0
    test = eval_batches(dataset.x_test, dataset.y_test, EVAL_BATCH_SIZE)
    bar = tqdm(total=plan.total_epochs, desc="deprune", disable=not progress)
    for stage, budget in enumerate(plan.stages):
        if stage > 0:
            link.control(wire.CTRL_STAGE_CHANGE, stage=stage, epoch=0, b=budget.b, B=budget.B)
            slog.info("阶段切换", stage=stage, stage_b=budget.b, B=budget.B)
        for e in range(plan.epochs[stage]):
            start = time.perf_counter()
            batches = iter_batches(dataset.x_train, dataset.y_train, plan.batch_size, plan.seed, epoch)
            st = deprune_client_epoch(client, plan, stage, batches, link, epoch, e, on_batch)
            seconds = time.perf_counter() - start
            link.control(wire.CTRL_END_OF_EPOCH, stage=stage, epoch=e, b=budget.b, B=budget.B)
            acc = evaluate_remote(client, budget.b, test, link, stage)
            result = EpochResult(epoch, stage, budget.b, acc, st.tx_bytes, st.rx_bytes, st.samples,
                                 seconds, st.mean_task_loss, st.mean_prune_loss, st.sum_f)
            _log_epoch(result)
            results.append(result)
            if on_epoch is not None:
                on_epoch(result)
            epoch += 1
            bar.update(1)
    bar.close()
    if shutdown:
        link.shutdown()
    return results


def _log_epoch(result: EpochResult):
    slog.info("epoch 完成", epoch=result.epoch, stage_b=result.b, test_acc=result.test_acc,
              tx_bytes=result.tx_bytes, rx_bytes=result.rx_bytes, sum_f=result.sum_f)


# ── deprune 服务端 ──

@dataclass
class ServerSummary:
    """服务端会话统计"""
    batches: int = 0
    predictions: int = 0
    controls: int = 0
    stage: int = 0
    epoch_in_stage: int = 0


def server_train_step(server: ServerHalf, msg: wire.ForwardMsg, budget: Budget, weights: LossWeights,
                      lr: float, weight_decay: float) -> wire.BackwardMsg:
    """
    服务端处理一个训练批次

    解压 → 层 n+1..L → totalLoss(交叉熵, pruneLoss(f, B), ε) → 反向传播 → SGD，
    返回对载荷与 f 的梯度。
    """
    with Tape() as tape:
        payload = Tensor(_from_wire(msg.payload, server.model), requires_grad=True)
        f = Tensor(msg.f, requires_grad=True)
        logits = server.forward(payload, msg.indices, train=True)
        task = ops.softmax_cross_entropy(logits, msg.labels)
        p_loss = prune_loss(f, budget.B, weights)
        total = total_loss(task, p_loss, weights.epsilon)
    tape.backward(total)
    sgd_step(server.state.learnable(), lr, weight_decay)
    return wire.BackwardMsg(
        batch_id=msg.batch_id, stage=msg.stage, b=msg.b, phi=msg.phi, height=msg.height,
        width=msg.width, batch=msg.batch, task_loss=task.item(), prune_loss=p_loss.item(),
        grad_payload=_to_wire(payload.grad, server.model), grad_f=f.grad,
    )


def server_predict(server: ServerHalf, msg: wire.ForwardMsg) -> wire.PredictMsg:
    payload = Tensor(_from_wire(msg.payload, server.model))
    logits = server.forward(payload, msg.indices, train=False)
    return wire.PredictMsg(msg.batch_id, msg.batch, logits.shape[1], logits.data.astype(np.float32))


def _check_dims(server: ServerHalf, msg: wire.ForwardMsg):
    h, w = _wire_shape(server.model)
    if msg.phi != server.model.phi or (msg.height, msg.width) != (h, w):
        raise ProtocolError(
            f"前向消息维度不符: φ={msg.phi} H'={msg.height} W'={msg.width}，期望 φ={server.model.phi} H'={h} W'={w}"
        )


def _handle_control(msg: wire.ControlMsg, plan: TrainPlan, summary: ServerSummary) -> int:
    """更新服务端阶段状态，返回 Ack 的 ref"""
    summary.controls += 1
    slog.debug("收到控制消息", kind=msg.kind_name, stage=msg.stage, epoch=msg.epoch, stage_b=msg.b)
    if msg.kind == wire.CTRL_STAGE_CHANGE:
        if msg.stage != summary.stage + 1 or msg.stage >= len(plan.stages):
            raise ControlError(f"阶段切换必须递增 1: 当前 {summary.stage}，收到 {msg.stage}")
        budget = plan.stages[msg.stage]
        if msg.b != budget.b or not np.isclose(msg.B, budget.B, rtol=1e-6):
            raise ControlError(f"预算不一致: 客户端 b={msg.b} B={msg.B}，服务端 b={budget.b} B={budget.B}")
        summary.stage = msg.stage
        summary.epoch_in_stage = 0
        slog.info("服务端阶段切换", stage=msg.stage, stage_b=budget.b)
        return msg.stage
    if msg.kind == wire.CTRL_END_OF_EPOCH:
        if msg.stage != summary.stage:
            raise ControlError(f"epoch 结束消息的阶段 {msg.stage} 与服务端阶段 {summary.stage} 不一致")
        summary.epoch_in_stage = msg.epoch + 1
        return msg.epoch
    return msg.epoch


def _abort(link: Link):
    """出错时尽力回复关闭消息，使客户端不必等到超时"""
    try:
        link.send_msg(wire.ControlMsg(wire.CTRL_SHUTDOWN, 0, 0, 0, 0.0))
    except SplitStreamError:
        pass


def deprune_server_loop(server: ServerHalf, plan: TrainPlan, link: Link,
                        stop: Optional[Callable[[], bool]] = None) -> ServerSummary:
    """
    服务端会话主循环

    训练帧做一步训练并回复 BackwardMsg；推理帧回复 PredictMsg；控制消息更新阶段并回复 Ack；
    收到 shutdown 后回复 Ack 并返回。

    Raises:
        ProtocolError: 畸形帧或意外的消息类型
        ControlError: 客户端的阶段或预算与服务端计划不一致
        SessionError: 链路失败或超时
    """
    plan.validate_deprune(server.model.phi)
    summary = ServerSummary()
    while True:
        frame = link.recv(stop)
        done = False
        try:
            try:
                msg = wire.decode(frame)
            except (FramingError, ValidationError) as e:
                raise ProtocolError(f"收到畸形帧: {e}") from e
            if isinstance(msg, wire.ForwardMsg):
                _check_dims(server, msg)
                if msg.inference:
                    reply = server_predict(server, msg)
                    summary.predictions += 1
                else:
                    if msg.stage != summary.stage or msg.b != plan.stages[summary.stage].b:
                        raise ControlError(
                            f"前向消息的阶段/预算 ({msg.stage}, b={msg.b}) 与服务端 "
                            f"({summary.stage}, b={plan.stages[summary.stage].b}) 不一致"
                        )
                    lr = select_lr(summary.stage, summary.epoch_in_stage, plan)
                    reply = server_train_step(server, msg, plan.stages[summary.stage], plan.weights,
                                              lr, plan.weight_decay)
                    summary.batches += 1
                    slog.debug("服务端批次完成", batch_id=msg.batch_id, task_loss=reply.task_loss,
                               prune_loss=reply.prune_loss)
            elif isinstance(msg, wire.ControlMsg):
                reply = wire.AckMsg(wire.MSG_CONTROL, _handle_control(msg, plan, summary))
                done = msg.kind == wire.CTRL_SHUTDOWN
            else:
                raise ProtocolError(f"服务端不接受 {type(msg).__name__} 消息")
        except SplitStreamError as e:
            slog.error(f"服务端会话中止: {e}", batches=summary.batches)
            _abort(link)
            raise
        link.send_msg(reply)
        if done:
            slog.info("服务端会话结束", batches=summary.batches, predictions=summary.predictions)
            return summary


# ── 本地训练（prune / 从零训练 / 无模块） ──

def local_train_step(model: SplitModel, state: ModelState, x: np.ndarray, y: np.ndarray, budget: Budget,
                     weights: LossWeights, lr: float, weight_decay: float) -> Tuple[float, float, float]:
    """
    单进程内完整的压缩感知训练步

    Returns:
        (task_loss, prune_loss, sum_f)
    """
    client, server = split_halves(model, state)
    with Tape() as tape:
        l_c, f = client.forward(Tensor(x), train=True)
        indices, payload = select_channels(l_c, f, budget.b)
        logits = server.forward(payload, indices, train=True)
        task = ops.softmax_cross_entropy(logits, y)
        p_loss = prune_loss(f, budget.B, weights)
        total = total_loss(task, p_loss, weights.epsilon)
    tape.backward(total)
    sum_f = float(np.sum(f.data, dtype=np.float64))
    sgd_step(state.learnable(), lr, weight_decay)
    return task.item(), p_loss.item(), sum_f


def evaluate(client: ClientHalf, server: ServerHalf, b: int,
             batches: Iterable[Tuple[np.ndarray, np.ndarray]]) -> float:
    """
    本地评估：评估模式下客户端 → 压缩 → 前 b 个通道 → 解压 → 服务端

    Returns:
        float: argmax(p) == y 的比例
    """
    correct = total = 0
    for x, y in batches:
        l_c, f = client.forward(Tensor(x), train=False)
        indices, payload = select_channels(l_c, f, b)
        logits = server.forward(payload, indices, train=False)
        correct += int((logits.data.argmax(axis=1) == y).sum())
        total += len(y)
    return correct / total if total else 0.0


def evaluate_state(model: SplitModel, state: ModelState, b: int, dataset: Dataset) -> float:
    client, server = split_halves(model, state)
    return evaluate(client, server, b, eval_batches(dataset.x_test, dataset.y_test, EVAL_BATCH_SIZE))


def _check_dataset(dataset: Dataset):
    if len(dataset.y_train) < 2 or len(dataset.y_test) == 0:
        raise ValidationError(f"数据集为空或样本过少: {dataset}")


def _train_local(model: SplitModel, plan: TrainPlan, dataset: Dataset, state: ModelState,
                 on_batch: BatchCallback, on_epoch: EpochCallback, after_stage, progress: bool) -> ModelState:
    _check_dataset(dataset)
    tx = rx = 0
    epoch = 0
    bar = tqdm(total=plan.total_epochs, desc="train", disable=not progress)
    for stage, budget in enumerate(plan.stages):
        for e in range(plan.epochs[stage]):
            lr = select_lr(stage, e, plan)
            st = StageState(stage, e, lr, tx, rx)
            start = time.perf_counter()
            batches = iter_batches(dataset.x_train, dataset.y_train, plan.batch_size, plan.seed, epoch)
            for i, (x, y) in enumerate(batches):
                task, p_loss, sum_f = local_train_step(model, state, x, y, budget, plan.weights,
                                                       lr, plan.weight_decay)
                fwd, bwd = frame_bytes(model, budget.b, len(y))
                tx, rx = tx + fwd, rx + bwd
                st.update_bytes(tx, rx)
                st.record(task, p_loss, sum_f, len(y))
                if on_batch is not None:
                    on_batch(BatchResult(epoch, stage, budget.b, i, task, p_loss, sum_f, tx, rx, len(y)))
            seconds = time.perf_counter() - start
            acc = evaluate_state(model, state, budget.b, dataset)
            result = EpochResult(epoch, stage, budget.b, acc, tx, rx, st.samples, seconds,
                                 st.mean_task_loss, st.mean_prune_loss, st.sum_f)
            _log_epoch(result)
            if on_epoch is not None:
                on_epoch(result)
            epoch += 1
            bar.update(1)
        if after_stage is not None:
            after_stage(stage, budget, acc)
    bar.close()
    return state


def prune_train(model: SplitModel, plan: TrainPlan, dataset: Dataset,
                checkpoint_dir: Optional[Path] = None, on_batch: BatchCallback = None,
                on_epoch: EpochCallback = None, progress: bool = False) -> TrainedSet:
    """
    prune 训练

    只在 b=φ 的首阶段随机初始化，之后每个阶段沿用上一阶段的全部参数。每个阶段结束时
    把参数快照存入 Θ（给定 checkpoint_dir 时同时写出 theta_{b}.splt），再对门控执行 reset_prune
    （最后一个阶段之后不再重置）。

    Raises:
        ValidationError: 计划不是从 φ 开始严格递减，或数据集为空
    """
    plan.validate_prune(model.phi)
    trained = TrainedSet()
    state = model.init_state(plan.seed)

    def after_stage(stage: int, budget: Budget, acc: float):
        arrays = state.arrays()
        path = None
        if checkpoint_dir is not None:
            path = save_checkpoint(Path(checkpoint_dir) / f"theta_{budget.b}.splt", arrays)
        trained.add(budget.b, arrays, acc, path)
        slog.info("阶段参数已保存", stage_b=budget.b, test_acc=acc, path=path)
        if stage < len(plan.stages) - 1:
            seed = int(seeded_rng(plan.seed, stage).integers(2 ** 31))
            reset_prune(state.filter, plan.reset_threshold, rng_seed=seed)

    _train_local(model, plan, dataset, state, on_batch, on_epoch, after_stage, progress)
    return trained


def train_from_scratch(model: SplitModel, plan: TrainPlan, dataset: Dataset,
                       on_batch: BatchCallback = None, on_epoch: EpochCallback = None,
                       progress: bool = False) -> ModelState:
    """在单一预算上从随机初始化开始的压缩感知训练（prune 的对照组）"""
    if len(plan.stages) != 1:
        raise ValidationError(f"从零训练只允许一个阶段，got {plan.budgets}")
    if plan.stages[0].b > model.phi:
        raise ValidationError(f"预算 {plan.stages[0].b} 超过 φ={model.phi}")
    state = model.init_state(plan.seed)
    return _train_local(model, plan, dataset, state, on_batch, on_epoch, None, progress)


def backbone_params(state: ModelState):
    """骨干网络的可训练参数（不含压缩/解压模块）"""
    return [p for name, p in state.params.items()
            if p.learnable and not name.startswith(('compress.', 'decompress.'))]


def train_unsplit_epoch(model: SplitModel, state: ModelState,
                        batches: Iterable[Tuple[np.ndarray, np.ndarray]], lr: float,
                        weight_decay: float = DEFAULT_WEIGHT_DECAY,
                        on_batch: Optional[Callable[[int, float, int], None]] = None) -> float:
    """
    不分割、不插入压缩模块地训练一个 epoch

    Returns:
        float: 平均交叉熵
    """
    losses = []
    params = backbone_params(state)
    for i, (x, y) in enumerate(batches):
        with Tape() as tape:
            logits = forward_layers(model.layers, Tensor(x), state, train=True)
            loss = ops.softmax_cross_entropy(logits, y)
        tape.backward(loss)
        sgd_step(params, lr, weight_decay)
        losses.append(loss.item())
        if on_batch is not None:
            on_batch(i, losses[-1], len(y))
    return float(np.mean(losses)) if losses else float('nan')


def evaluate_unsplit(model: SplitModel, state: ModelState, batches: Iterable[Tuple[np.ndarray, np.ndarray]]) -> float:
    correct = total = 0
    for x, y in batches:
        logits = forward_layers(model.layers, Tensor(x), state, train=False)
        correct += int((logits.data.argmax(axis=1) == y).sum())
        total += len(y)
    return correct / total if total else 0.0


def train_unsplit(model: SplitModel, plan: TrainPlan, dataset: Dataset,
                  on_batch: BatchCallback = None, on_epoch: EpochCallback = None,
                  progress: bool = False) -> ModelState:
    """无压缩模块的完整模型训练，不产生任何网络流量"""
    _check_dataset(dataset)
    state = model.init_state(plan.seed)
    test = eval_batches(dataset.x_test, dataset.y_test, EVAL_BATCH_SIZE)
    width = model.phi_tilde
    epoch = 0
    for stage, count in enumerate(plan.epochs):
        for e in tqdm(range(count), desc="unsplit", disable=not progress):
            samples = 0

            def batch_done(i, loss, n):
                nonlocal samples
                samples += n
                if on_batch is not None:
                    on_batch(BatchResult(epoch, stage, width, i, loss, 0.0, 0.0, 0, 0, n))

            start = time.perf_counter()
            batches = iter_batches(dataset.x_train, dataset.y_train, plan.batch_size, plan.seed, epoch)
            loss = train_unsplit_epoch(model, state, batches, select_lr(stage, e, plan),
                                       plan.weight_decay, batch_done)
            seconds = time.perf_counter() - start
            acc = evaluate_unsplit(model, state, test)
            result = EpochResult(epoch, stage, width, acc, 0, 0, samples, seconds, loss, 0.0, 0.0)
            _log_epoch(result)
            if on_epoch is not None:
                on_epoch(result)
            epoch += 1
    return state
