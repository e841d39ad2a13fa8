"""
splitstream 指标模块

每次实验写出一个 CSV：文件开头是以 '# ' 为前缀的完整配置（YAML），随后是固定列顺序的表头与数据行。
行类型 kind 取 batch / epoch / summary：

- batch、epoch 行的 tx_bytes / rx_bytes 为累计的训练数据面字节数（Forward/Backward 帧）；
- summary 行的 tx_bytes / rx_bytes 为会话结束时链路计数的总值（含控制、确认与评估帧）。

wall_ms 与 samples_per_sec 依赖机器速度，确定性比较时排除。
"""

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import numpy as np
import pandas as pd

from splitstream.utils.errors import FormatError, ValidationError
from splitstream.utils.logger import logger

COLUMNS = [
    'kind', 'wall_ms', 'epoch', 'stage_b', 'batch', 'task_loss', 'prune_loss', 'sum_f',
    'test_acc', 'tx_bytes', 'rx_bytes', 'samples_per_sec', 'compression_ratio',
]
WALL_CLOCK_COLUMNS = ('wall_ms', 'samples_per_sec')
ROW_KINDS = ('batch', 'epoch', 'summary')

DEFAULT_TOLERANCE = 0.02
DEFAULT_THRESHOLD = 0.95

_INT_FIELDS = ('epoch', 'stage_b', 'batch', 'tx_bytes', 'rx_bytes')


@dataclass
class MetricsRecord:
    """CSV 中的一行；不适用的字段为 None"""
    kind: str
    wall_ms: float
    epoch: int
    stage_b: int
    batch: Optional[int] = None
    task_loss: Optional[float] = None
    prune_loss: Optional[float] = None
    sum_f: Optional[float] = None
    test_acc: Optional[float] = None
    tx_bytes: int = 0
    rx_bytes: int = 0
    samples_per_sec: Optional[float] = None
    compression_ratio: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ROW_KINDS:
            raise ValidationError(f"未知的行类型: {self.kind}")

    def to_row(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_row(cls, row: Mapping) -> 'MetricsRecord':
        """
        由 CSV 行（dict 或 pandas Series）构造记录

        Raises:
            FormatError: 缺少列或取值无法解析
        """
        values = {}
        try:
            for f in fields(cls):
                value = row[f.name]
                if value is None or (isinstance(value, float) and math.isnan(value)):
                    values[f.name] = None
                elif f.name == 'kind':
                    values[f.name] = str(value)
                elif f.name in _INT_FIELDS:
                    values[f.name] = int(value)
                else:
                    values[f.name] = float(value)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"无法解析指标行: {e}") from e
        return cls(**values)


class MetricsWriter:
    """
    指标 CSV 写入器

    行先缓存在内存中，每个 epoch 结束或出错时 flush 到文件。

    用法::

        with MetricsWriter(path, dump_config(cfg)) as writer:
            writer.write(record)
    """

    def __init__(self, path: Union[str, Path], config_text: str = ''):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._rows: List[Dict[str, object]] = []
        self.rows_written = 0
        with open(self.path, 'w', encoding='utf-8', newline='') as fh:
            for line in config_text.splitlines():
                fh.write(f"# {line}\n")
            fh.write(','.join(COLUMNS) + '\n')

    def write(self, record: MetricsRecord):
        self._rows.append(record.to_row())

    def flush(self):
        if not self._rows:
            return
        frame = pd.DataFrame(self._rows, columns=COLUMNS)
        for name in _INT_FIELDS:
            frame[name] = frame[name].astype('Int64')
        with open(self.path, 'a', encoding='utf-8', newline='') as fh:
            frame.to_csv(fh, header=False, index=False, lineterminator='\n')
        self.rows_written += len(self._rows)
        self._rows.clear()

    def close(self):
        self.flush()

    def __enter__(self) -> 'MetricsWriter':
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    """
    读取指标 CSV（跳过配置注释头）

    Raises:
        FormatError: 列与固定列顺序不一致
    """
    frame = pd.read_csv(path, comment='#')
    if list(frame.columns) != COLUMNS:
        raise FormatError(f"{path} 的列 {list(frame.columns)} 与指标格式不一致")
    return frame


def read_records(path: Union[str, Path]) -> List[MetricsRecord]:
    return [MetricsRecord.from_row(row) for _, row in read_metrics(path).iterrows()]


def read_config_header(path: Union[str, Path]) -> str:
    """取出 CSV 开头嵌入的配置文本"""
    lines = []
    with open(path, 'r', encoding='utf-8') as fh:
        for line in fh:
            if not line.startswith('#'):
                break
            lines.append(line[2:] if line.startswith('# ') else line[1:])
    return ''.join(lines)


def deterministic_view(frame: pd.DataFrame) -> pd.DataFrame:
    """去掉与机器速度相关的列，用于比较两次运行"""
    return frame.drop(columns=list(WALL_CLOCK_COLUMNS))


# ── 跨运行比较 ──

@dataclass
class ComparisonReport:
    """
    两次运行的比较结果

    Attributes:
        reached (bool): A 是否匹配到 B 的最终准确率（含容差回退）且达到阈值准确率
        target_acc (float): B 的最终测试准确率
        match_epoch (int | None): A 首次达到 target_acc 的 epoch，从未达到时取首次达到 target_acc − tolerance 的 epoch
        byte_ratio (float): A 在 match_epoch 的累计字节 / B 在最终 epoch 的累计字节
        epochs_a (int | None): A 达到 threshold·target_acc 所需的 epoch 数
        epochs_b (int | None): B 达到 threshold·target_acc 所需的 epoch 数
        speedup (float): epochs_b / epochs_a
        throughput_ratio (float): A 与 B 平均 samples_per_sec 之比
    """
    reached: bool
    target_acc: float
    match_epoch: Optional[int]
    byte_ratio: float
    epochs_a: Optional[int]
    epochs_b: Optional[int]
    speedup: float
    throughput_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        if not self.reached:
            return f"未达到目标准确率 {self.target_acc:.4f}"
        return (f"目标准确率 {self.target_acc:.4f}，匹配 epoch {self.match_epoch}，"
                f"字节比 {self.byte_ratio:.4f}，加速比 {self.speedup:.4f}，吞吐比 {self.throughput_ratio:.4f}")


def _epoch_rows(path: Union[str, Path]) -> pd.DataFrame:
    frame = read_metrics(path)
    rows = frame[frame['kind'] == 'epoch'].sort_values('epoch').reset_index(drop=True)
    if rows.empty:
        raise ValidationError(f"{path} 中没有 epoch 行")
    return rows


def _epochs_to(rows: pd.DataFrame, target: float) -> Optional[int]:
    hits = rows.index[rows['test_acc'] >= target]
    return int(rows.loc[hits[0], 'epoch']) + 1 if len(hits) else None


def _ratio(a: float, b: float) -> float:
    return float(a) / float(b) if b else float('nan')


def compare_runs(csv_a: Union[str, Path], csv_b: Union[str, Path], tolerance: float = DEFAULT_TOLERANCE,
                 threshold: float = DEFAULT_THRESHOLD) -> ComparisonReport:
    """
    比较两次运行

    - 匹配 epoch：A 首个 test_acc ≥ B 最终准确率的 epoch；A 从未达到时，退而取首个
      test_acc ≥ B 最终准确率 − tolerance 的 epoch；
    - 字节比：A 在匹配 epoch 的累计字节数，除以 B 最终 epoch 的累计字节数；
    - 加速比：B 达到 threshold × B 最终准确率所需 epoch 数，除以 A 所需的 epoch 数；
    - 吞吐比：A 与 B 的平均 samples_per_sec 之比。

    A 未达到目标时 reached 为 False，相关比值为 NaN。
    """
    a, b = _epoch_rows(csv_a), _epoch_rows(csv_b)
    target = float(b['test_acc'].iloc[-1])
    b_bytes = b['tx_bytes'].iloc[-1] + b['rx_bytes'].iloc[-1]

    hits = a.index[a['test_acc'] >= target]
    if not len(hits):
        hits = a.index[a['test_acc'] >= target - tolerance]
    match_epoch = int(a.loc[hits[0], 'epoch']) if len(hits) else None
    byte_ratio = float('nan')
    if match_epoch is not None:
        row = a.loc[hits[0]]
        byte_ratio = _ratio(row['tx_bytes'] + row['rx_bytes'], b_bytes)

    epochs_a = _epochs_to(a, threshold * target)
    epochs_b = _epochs_to(b, threshold * target)
    speedup = _ratio(epochs_b, epochs_a) if epochs_a and epochs_b else float('nan')
    throughput = _ratio(np.nanmean(a['samples_per_sec']), np.nanmean(b['samples_per_sec']))

    report = ComparisonReport(
        reached=match_epoch is not None and epochs_a is not None,
        target_acc=target, match_epoch=match_epoch, byte_ratio=byte_ratio,
        epochs_a=epochs_a, epochs_b=epochs_b, speedup=speedup, throughput_ratio=throughput,
    )
    logger.info(report.summary())
    return report
