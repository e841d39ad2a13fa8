"""
splitstream 实验模块

按配置执行一个实验组（arm）并写出指标 CSV：

- deprune / no-compression / high-compression：真实链路上的分割训练
  （loopback 在同一进程内启动服务端线程；tcp 按 role 只运行一侧）；
- prune / from-scratch-at-B：单进程压缩感知训练，字节数按帧长度公式虚拟累计；
- no-module：不插入压缩模块的完整模型训练，字节数为 0。
"""

import time
from pathlib import Path
from typing import Optional, Tuple

from splitstream.core.checkpoint import load_checkpoint
from splitstream.core.compression import compression_ratio
from splitstream.core.config import ExperimentConfig, dump_config, resolve_plan
from splitstream.core.data import Dataset, load_dataset
from splitstream.core.metrics import MetricsRecord, MetricsWriter
from splitstream.core.model import SplitModel, build_mlp, build_vgg11_like, split_at
from splitstream.core.schedules import (
    BatchResult, ClientHalf, EpochResult, ServerHalf, ServerSummary, TrainPlan,
    deprune_train, evaluate_state, prune_train, train_from_scratch, train_unsplit,
)
from splitstream.server.link import link_connect, link_listen, loopback_link
from splitstream.server.split_client import SplitClient
from splitstream.server.split_server import SplitServer
from splitstream.utils.errors import SessionError, ValidationError
from splitstream.utils.logger import get_structured_logger, setup_logging_from_config

slog = get_structured_logger('splitstream.experiment')


def build_model(cfg: ExperimentConfig, dataset: Dataset) -> Tuple[SplitModel, Dataset]:
    """
    按配置构建分割模型

    mlp 模型要求输入为向量，图像数据会被展平。

    Returns:
        (model, dataset): 分割模型与（必要时展平后的）数据集

    Raises:
        ValidationError: mlp 的首尾宽度与数据维度或类别数不一致
    """
    spec = cfg.model
    if spec.kind == 'mlp':
        if dataset.x_train.ndim > 2:
            dataset = Dataset(dataset.name, dataset.x_train.reshape(len(dataset.y_train), -1), dataset.y_train,
                              dataset.x_test.reshape(len(dataset.y_test), -1), dataset.y_test, dataset.classes)
        widths = list(spec.widths)
        if widths[0] != dataset.input_shape[0] or widths[-1] != dataset.num_classes:
            raise ValidationError(
                f"mlp widths {widths} 与数据维度 {dataset.input_shape[0]} / 类别数 {dataset.num_classes} 不一致"
            )
        layers = build_mlp(widths)
    else:
        if len(dataset.input_shape) != 3:
            raise ValidationError(f"vgg11-like 需要图像输入 [C, H, W]，got {dataset.input_shape}")
        channels, size, _ = dataset.input_shape
        if size != spec.image_size:
            raise ValidationError(f"model.image_size={spec.image_size} 与数据图像边长 {size} 不一致")
        layers = build_vgg11_like(dataset.num_classes, spec.width_scale, in_channels=channels, image_size=size)
    model = split_at(layers, cfg.split, cfg.compression.to_config(), input_shape=dataset.input_shape)
    return model, dataset


class RunRecorder:
    """把训练回调转为指标行，每个 epoch 结束时落盘"""

    def __init__(self, writer: MetricsWriter, model: SplitModel, bypass_ratio: bool = False):
        self.writer = writer
        self.model = model
        self.bypass_ratio = bypass_ratio
        self.start = time.perf_counter()
        self.last_epoch: Optional[EpochResult] = None
        self.samples = 0

    def wall_ms(self) -> float:
        return (time.perf_counter() - self.start) * 1000.0

    def on_batch(self, r: BatchResult):
        self.writer.write(MetricsRecord(
            kind='batch', wall_ms=self.wall_ms(), epoch=r.epoch, stage_b=r.b, batch=r.batch,
            task_loss=r.task_loss, prune_loss=r.prune_loss, sum_f=r.sum_f,
            tx_bytes=r.tx_bytes, rx_bytes=r.rx_bytes,
        ))

    def on_epoch(self, r: EpochResult):
        self.writer.write(MetricsRecord(
            kind='epoch', wall_ms=self.wall_ms(), epoch=r.epoch, stage_b=r.b,
            task_loss=r.task_loss, prune_loss=r.prune_loss, sum_f=r.sum_f, test_acc=r.test_acc,
            tx_bytes=r.tx_bytes, rx_bytes=r.rx_bytes, samples_per_sec=r.samples_per_sec,
            compression_ratio=self.ratio(r.b),
        ))
        self.writer.flush()
        self.last_epoch = r
        self.samples += r.samples

    def ratio(self, b: int) -> float:
        if self.bypass_ratio:
            return 1.0
        return compression_ratio(self.model.compression_cfg, b)

    def summary(self, totals: Tuple[int, int], stage_b: Optional[int] = None,
                test_acc: Optional[float] = None):
        last = self.last_epoch
        wall = self.wall_ms()
        b = stage_b if stage_b is not None else (last.b if last else 0)
        self.writer.write(MetricsRecord(
            kind='summary', wall_ms=wall, epoch=last.epoch if last else 0, stage_b=b,
            test_acc=test_acc if test_acc is not None else (last.test_acc if last else None),
            tx_bytes=int(totals[0]), rx_bytes=int(totals[1]),
            samples_per_sec=self.samples / (wall / 1000.0) if wall > 0 and self.samples else None,
            compression_ratio=self.ratio(b) if b else None,
        ))
        slog.info("实验完成", test_acc=test_acc if test_acc is not None else (last.test_acc if last else None),
                  tx_bytes=int(totals[0]), rx_bytes=int(totals[1]), wall_ms=wall)


# ── 链路实验组 ──

def _run_link_client(cfg: ExperimentConfig, model: SplitModel, plan: TrainPlan, dataset: Dataset,
                     recorder: RunRecorder) -> Tuple[int, int]:
    """客户端角色（loopback 时同时在后台线程运行服务端），返回客户端链路的 (tx, rx)"""
    t = cfg.transport
    client_half = ClientHalf.init(model, cfg.seed)
    server: Optional[SplitServer] = None
    if t.role == 'loopback':
        client_link, server_link = loopback_link(t.timeout_s)
        server = SplitServer(ServerHalf.init(model, cfg.seed), plan, server_link)
        server.start()
    else:
        client_link = link_connect(t.connect, t.timeout_s)

    client = SplitClient(client_link)
    try:
        deprune_train(client_half, plan, dataset, client, recorder.on_batch, recorder.on_epoch,
                      progress=cfg.logging.progress)
        totals = client_link.byte_count()
    except Exception:
        if server is not None and server.error is not None:
            slog.error(f"服务端错误: {server.error}")
        raise
    finally:
        if server is not None:
            server.stop()
        client.close()
    if server is not None and server.error is not None:
        raise server.error
    return totals


def serve(cfg: ExperimentConfig, model: SplitModel, plan: TrainPlan) -> Tuple[ServerSummary, Tuple[int, int]]:
    """
    服务端角色：监听 transport.listen，服务一个客户端会话直到收到 shutdown

    Raises:
        SessionError: 会话因链路或协议错误中止
    """
    t = cfg.transport
    server = SplitServer(ServerHalf.init(model, cfg.seed), plan, link_listen(t.listen, t.timeout_s))
    server.start()
    try:
        while not server.join(timeout=1.0):
            pass
    except KeyboardInterrupt:
        server.stop()
        raise
    if server.error is not None:
        raise server.error
    if server.summary is None:
        raise SessionError("服务端会话未正常结束")
    return server.summary, server.link.byte_count()


# ── 入口 ──

def run_experiment(cfg: ExperimentConfig) -> Path:
    """
    执行一个实验组并写出指标 CSV

    Returns:
        Path: 指标 CSV 路径

    Raises:
        SplitStreamError: 会话或协议错误；此前的指标行已写入文件
    """
    setup_logging_from_config(cfg.logging.logger_kwargs())
    dataset = load_dataset(cfg.dataset, cfg.seed)
    model, dataset = build_model(cfg, dataset)
    plan = resolve_plan(cfg, model.phi)
    output = Path(cfg.output)
    slog.info("开始实验", arm=cfg.arm, split=cfg.split, layers=model.num_layers, phi=model.phi,
              phi_tilde=model.phi_tilde, budgets=plan.budgets, epochs=list(plan.epochs), role=cfg.transport.role)

    with MetricsWriter(output, dump_config(cfg)) as writer:
        recorder = RunRecorder(writer, model, bypass_ratio=cfg.arm == 'no-module')
        try:
            if cfg.uses_link and cfg.transport.role == 'server':
                summary, totals = serve(cfg, model, plan)
                recorder.summary(totals, stage_b=plan.stages[summary.stage].b)
            elif cfg.uses_link:
                totals = _run_link_client(cfg, model, plan, dataset, recorder)
                recorder.summary(totals)
            elif cfg.arm == 'prune':
                checkpoint_dir = output.parent / 'checkpoints'
                trained = prune_train(model, plan, dataset, checkpoint_dir, recorder.on_batch,
                                      recorder.on_epoch, progress=cfg.logging.progress)
                last = recorder.last_epoch
                recorder.summary((last.tx_bytes, last.rx_bytes), test_acc=trained.accuracies[plan.budgets[-1]])
            elif cfg.arm == 'from-scratch-at-B':
                train_from_scratch(model, plan, dataset, recorder.on_batch, recorder.on_epoch,
                                   progress=cfg.logging.progress)
                last = recorder.last_epoch
                recorder.summary((last.tx_bytes, last.rx_bytes))
            else:
                train_unsplit(model, plan, dataset, recorder.on_batch, recorder.on_epoch,
                              progress=cfg.logging.progress)
                recorder.summary((0, 0))
        except Exception as e:
            slog.error(f"实验中止: {e}", arm=cfg.arm)
            raise
    return output


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: Path, b: int) -> float:
    """
    载入检查点并在预算 b 下评估测试集准确率

    Raises:
        FormatError: 检查点格式错误
        ValidationError: 检查点与模型结构不符，或 b 越界
    """
    dataset = load_dataset(cfg.dataset, cfg.seed)
    model, dataset = build_model(cfg, dataset)
    if not 1 <= b <= model.phi:
        raise ValidationError(f"b 必须在 [1, {model.phi}] 范围内，got {b}")
    state = model.init_state(cfg.seed)
    state.load_arrays(load_checkpoint(checkpoint))
    acc = evaluate_state(model, state, b, dataset)
    slog.info("检查点评估完成", checkpoint=str(checkpoint), stage_b=b, test_acc=acc)
    return acc

