"""日志模块测试"""

import json
import logging
import threading

import numpy as np

from splitstream.utils.logger import create_logger, get_structured_logger, setup_logging_from_config


class TestLogger:

    def test_json_fields(self, capsys):
        create_logger('splitstream.test_json', json_format=True)
        get_structured_logger('splitstream.test_json').info("epoch 完成", epoch=3, stage_b=4, tx_bytes=2048)
        entry = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert entry['message'] == "epoch 完成"
        assert (entry['epoch'], entry['stage_b'], entry['tx_bytes']) == (3, 4, 2048)
        assert entry['level'] == 'INFO'

    def test_console_key_values(self, capsys):
        create_logger('splitstream.test_console', colored_console=False)
        get_structured_logger('splitstream.test_console').info("阶段切换", stage=1, lr=5e-05)
        line = capsys.readouterr().err.strip()
        assert line.endswith("阶段切换 stage=1 lr=5e-05")
        assert '\033[' not in line

    def test_colored_console_appends_fields(self, capsys):
        create_logger('splitstream.test_color')
        get_structured_logger('splitstream.test_color').warning("慢批次", wall_ms=12.3456789)
        line = capsys.readouterr().err
        assert "wall_ms=12.3457" in line

    def test_level_filter(self, capsys):
        create_logger('splitstream.test_level', level='WARNING', json_format=True)
        slog = get_structured_logger('splitstream.test_level')
        slog.info("不应输出", epoch=1)
        slog.error("应输出")
        lines = capsys.readouterr().err.strip().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])['level'] == 'ERROR'

    def test_file_output(self, tmp_path):
        logger = setup_logging_from_config({
            'name': 'splitstream.test_file', 'console_output': False, 'file_output': True,
            'log_dir': str(tmp_path), 'json_format': True,
        })
        get_structured_logger('splitstream.test_file').info("写入文件", batch=7)
        for handler in logger.handlers:
            handler.flush()
        files = list(tmp_path.glob('*.log'))
        assert len(files) == 1
        entry = json.loads(files[0].read_text(encoding='utf-8').splitlines()[-1])
        assert entry['batch'] == 7
        for handler in logger.handlers:
            handler.close()

    def test_no_propagation(self):
        logger = create_logger('splitstream.test_propagate')
        assert logger.propagate is False
        assert logger.level == logging.INFO

    def test_numpy_fields_serialized(self, capsys):
        create_logger('splitstream.test_numpy', json_format=True)
        get_structured_logger('splitstream.test_numpy').info(
            "批次完成", task_loss=np.float32(0.5), batch=np.int64(2), indices=np.array([1, 3]))
        entry = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert (entry['task_loss'], entry['batch'], entry['indices']) == (0.5, 2, [1, 3])

    def test_caller_location(self, capsys):
        create_logger('splitstream.test_caller', json_format=True)
        get_structured_logger('splitstream.test_caller').info("定位")
        entry = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert entry['function'] == 'test_caller_location'

    def test_thread_name_in_text(self, capsys):
        create_logger('splitstream.test_thread', colored_console=False)
        slog = get_structured_logger('splitstream.test_thread')
        thread = threading.Thread(target=lambda: slog.info("服务端批次完成"), name='splitstream-server')
        thread.start()
        thread.join()
        assert "[splitstream-server] 服务端批次完成" in capsys.readouterr().err

    def test_reconfigure_replaces_handlers(self):
        create_logger('splitstream.test_reconf')
        logger = create_logger('splitstream.test_reconf', json_format=True)
        assert len(logger.handlers) == 1
