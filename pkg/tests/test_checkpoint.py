"""检查点格式测试"""

import struct

import numpy as np
import pytest

from splitstream.core.checkpoint import (
    MAGIC, VERSION, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
)
from splitstream.utils.errors import FormatError, ValidationError


@pytest.fixture
def arrays(rng):
    return {
        '1.weight': rng.standard_normal((3, 2)).astype(np.float32),
        '1.bias': np.zeros(2, np.float32),
        'compress.f_hat': rng.uniform(-0.1, 0.1, 4).astype(np.float32),
        'stats': np.arange(3, dtype=np.float64),
        'scalar': np.float32(2.5),
    }


class TestCheckpoint:

    def test_header_layout(self, arrays):
        blob = encode_checkpoint(arrays)
        assert blob[:4] == MAGIC
        assert blob[4] == VERSION
        assert struct.unpack_from('<I', blob, 5)[0] == len(arrays)

    def test_round_trip_preserves_values(self, arrays):
        decoded = decode_checkpoint(encode_checkpoint(arrays))
        assert set(decoded) == set(arrays)
        for name, value in arrays.items():
            assert decoded[name].dtype == np.asarray(value).dtype
            np.testing.assert_array_equal(decoded[name], value)

    def test_deterministic_order(self, arrays):
        reordered = dict(reversed(list(arrays.items())))
        assert encode_checkpoint(arrays) == encode_checkpoint(reordered)

    def test_model_state_reload(self, mlp_model, tmp_path):
        state = mlp_model.init_state(seed=4)
        path = save_checkpoint(tmp_path / 'nested' / 'theta_4.splt', state.arrays())
        fresh = mlp_model.init_state(seed=99)
        fresh.load_arrays(load_checkpoint(path))
        for name, p in state.params.items():
            np.testing.assert_array_equal(fresh.params[name].data, p.data)

    def test_bad_magic(self, arrays):
        blob = bytearray(encode_checkpoint(arrays))
        blob[:4] = b'NOPE'
        with pytest.raises(FormatError, match="魔数"):
            decode_checkpoint(bytes(blob))

    def test_bad_version(self, arrays):
        blob = bytearray(encode_checkpoint(arrays))
        blob[4] = VERSION + 1
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(blob))

    @pytest.mark.parametrize("cut", [3, 9, 12, 40])
    def test_truncated(self, arrays, cut):
        blob = encode_checkpoint(arrays)
        with pytest.raises(FormatError):
            decode_checkpoint(blob[:-cut] if cut < len(blob) else blob[:2])

    def test_trailing_bytes(self, arrays):
        with pytest.raises(FormatError, match="多余"):
            decode_checkpoint(encode_checkpoint(arrays) + b'\x00')

    def test_unsupported_dtype(self):
        with pytest.raises(ValidationError):
            encode_checkpoint({'x': np.zeros(2, dtype=np.complex64)})

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / 'absent.splt')
