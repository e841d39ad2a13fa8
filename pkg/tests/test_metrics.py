"""指标 CSV 与跨运行比较测试"""

import math

import pytest

from splitstream.cli import EXIT_NOT_REACHED, EXIT_OK, main
from splitstream.core.metrics import (
    COLUMNS, MetricsRecord, MetricsWriter, compare_runs, deterministic_view, read_config_header,
    read_metrics, read_records,
)
from splitstream.utils.errors import FormatError, ValidationError


def write_run(path, accs, bytes_total, sps=100.0):
    """每个 epoch 一行，tx 与 rx 各占累计字节数的一半"""
    with MetricsWriter(path, "arm: test\nseed: 0") as writer:
        for epoch, (acc, total) in enumerate(zip(accs, bytes_total)):
            writer.write(MetricsRecord('epoch', 10.0 * epoch, epoch, 4, test_acc=acc,
                                       tx_bytes=total // 2, rx_bytes=total - total // 2, samples_per_sec=sps))
    return path


class TestWriter:

    def test_header_and_columns(self, tmp_path):
        path = tmp_path / 'm.csv'
        with MetricsWriter(path, "arm: deprune\nplan:\n  l_k: 2") as writer:
            writer.write(MetricsRecord('batch', 1.5, 0, 4, batch=0, task_loss=0.7, prune_loss=1.2,
                                       sum_f=3.0, tx_bytes=100, rx_bytes=80))
        lines = path.read_text(encoding='utf-8').splitlines()
        assert lines[:3] == ["# arm: deprune", "# plan:", "#   l_k: 2"]
        assert lines[3] == ','.join(COLUMNS)
        assert read_config_header(path) == "arm: deprune\nplan:\n  l_k: 2\n"

    def test_records_round_trip(self, tmp_path):
        rows = [
            MetricsRecord('batch', 1.0, 0, 4, batch=3, task_loss=0.5, prune_loss=0.25, sum_f=3.5,
                          tx_bytes=2048, rx_bytes=1024),
            MetricsRecord('epoch', 2.0, 0, 4, test_acc=0.75, tx_bytes=4096, rx_bytes=2048,
                          samples_per_sec=512.0, compression_ratio=32.0),
            MetricsRecord('summary', 3.0, 0, 4, test_acc=0.75, tx_bytes=5000, rx_bytes=2500),
        ]
        path = tmp_path / 'm.csv'
        with MetricsWriter(path) as writer:
            for r in rows:
                writer.write(r)
        assert read_records(path) == rows

    def test_flush_appends(self, tmp_path):
        path = tmp_path / 'm.csv'
        writer = MetricsWriter(path)
        writer.write(MetricsRecord('epoch', 0.0, 0, 4))
        writer.flush()
        writer.write(MetricsRecord('epoch', 1.0, 1, 4))
        writer.close()
        assert writer.rows_written == 2
        assert read_metrics(path)['epoch'].tolist() == [0, 1]

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            MetricsRecord('step', 0.0, 0, 4)

    def test_wrong_columns(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text("kind,epoch\nepoch,0\n", encoding='utf-8')
        with pytest.raises(FormatError):
            read_metrics(path)

    def test_deterministic_view(self, tmp_path):
        frame = read_metrics(write_run(tmp_path / 'a.csv', [0.5], [10]))
        view = deterministic_view(frame)
        assert 'wall_ms' not in view.columns and 'samples_per_sec' not in view.columns
        assert 'tx_bytes' in view.columns


class TestCompare:

    def test_reached(self, tmp_path):
        a = write_run(tmp_path / 'a.csv', [0.5, 0.8, 0.9], [100, 200, 300], sps=100.0)
        b = write_run(tmp_path / 'b.csv', [0.6, 0.87, 0.91], [1000, 2000, 3000], sps=50.0)
        report = compare_runs(a, b)
        assert report.reached
        assert report.target_acc == pytest.approx(0.91)
        assert report.match_epoch == 2
        assert report.byte_ratio == pytest.approx(0.1)
        assert (report.epochs_a, report.epochs_b) == (3, 2)
        assert report.speedup == pytest.approx(2 / 3)
        assert report.throughput_ratio == pytest.approx(2.0)

    def test_identical_runs(self, tmp_path):
        # 倒数第二个 epoch 已在默认容差内
        a = write_run(tmp_path / 'a.csv', [0.5, 0.80, 0.81], [100, 200, 300])
        report = compare_runs(a, a)
        assert report.match_epoch == 2
        assert (report.byte_ratio, report.speedup, report.throughput_ratio) == (1.0, 1.0, 1.0)

    def test_exact_match_preferred_over_tolerance(self, tmp_path):
        a = write_run(tmp_path / 'a.csv', [0.5, 0.80, 0.81, 0.9], [100, 200, 300, 400])
        b = write_run(tmp_path / 'b.csv', [0.6, 0.81], [1000, 2000])
        report = compare_runs(a, b, tolerance=0.02)
        assert report.match_epoch == 2
        assert report.byte_ratio == pytest.approx(0.15)

    def test_tolerance_fallback(self, tmp_path):
        a = write_run(tmp_path / 'a.csv', [0.5, 0.8, 0.8], [100, 200, 300])
        b = write_run(tmp_path / 'b.csv', [0.6, 0.81], [1000, 2000])
        assert compare_runs(a, b, tolerance=0.02).match_epoch == 1
        assert compare_runs(a, b, tolerance=0.0).match_epoch is None

    def test_not_reached(self, tmp_path):
        a = write_run(tmp_path / 'a.csv', [0.4, 0.5], [100, 200])
        b = write_run(tmp_path / 'b.csv', [0.6, 0.9], [1000, 2000])
        report = compare_runs(a, b)
        assert not report.reached
        assert report.match_epoch is None
        assert math.isnan(report.byte_ratio)

    def test_no_epoch_rows(self, tmp_path):
        path = tmp_path / 'empty.csv'
        MetricsWriter(path).close()
        with pytest.raises(ValidationError):
            compare_runs(path, path)

    def test_cli_exit_codes(self, tmp_path, capsys):
        good = write_run(tmp_path / 'good.csv', [0.9], [100])
        bad = write_run(tmp_path / 'bad.csv', [0.1], [100])
        with pytest.raises(SystemExit) as info:
            main(['compare', '--a', str(good), '--b', str(good)])
        assert info.value.code == EXIT_OK
        assert '"reached": true' in capsys.readouterr().out
        with pytest.raises(SystemExit) as info:
            main(['compare', '--a', str(bad), '--b', str(good)])
        assert info.value.code == EXIT_NOT_REACHED
