"""压缩/解压模块与剪枝损失测试"""

import math

import numpy as np
import pytest

from conftest import finite_difference, rel_error
from splitstream.core import ops
from splitstream.core.compression import (
    F_HAT_INIT_RANGE, Budget, CompressionConfig, FilterVector, LossWeights, compress, compression_ratio,
    decompress, init_compression, payload_nbytes, prune_loss, prune_loss_value, reset_prune,
    select_channels, select_indices, total_loss,
)
from splitstream.core.model import ModelState
from splitstream.core.tensor import Parameter, Tape, Tensor
from splitstream.utils.errors import DimensionError, ValidationError

F64 = np.float64


def make_state(cfg: CompressionConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    params, buffers = init_compression(cfg, np.random.default_rng(seed), dtype)
    return ModelState(params, buffers)


def set_f_hat(state: ModelState, values):
    state.params['compress.f_hat'].data[...] = values


class TestCompressionConfig:

    @pytest.mark.parametrize("r, compressed", [(1, 32), (2, 17), (3, 12)])
    def test_compressed_spatial(self, r, compressed):
        cfg = CompressionConfig(r=r).resolve(8, (32, 32))
        assert cfg.kernel_size == 2 + r
        assert cfg.compressed_spatial() == (compressed, compressed)
        assert cfg.restore_padding() == 0

    def test_phi_defaults_to_phi_tilde(self):
        cfg = CompressionConfig(r=2).resolve(16, (8, 8))
        assert cfg.phi == cfg.phi_tilde == 16

    def test_phi_larger_than_phi_tilde(self):
        with pytest.raises(ValidationError):
            CompressionConfig(phi=20).resolve(16, (8, 8))

    def test_vector_requires_r1(self):
        with pytest.raises(ValidationError):
            CompressionConfig(r=2).resolve(12, None)
        assert CompressionConfig().resolve(12, None).compressed_spatial() == (1, 1)

    def test_unrestorable_shape(self):
        # 高宽需要不同的 output_padding
        with pytest.raises(DimensionError):
            CompressionConfig(r=2).resolve(4, (32, 31))

    def test_budget_defaults(self):
        assert Budget(4).B == 4.0
        assert Budget(4, 3.5).B == 3.5
        with pytest.raises(ValidationError):
            Budget(0)

    def test_loss_weights_validation(self):
        with pytest.raises(ValidationError):
            LossWeights(delta=0)
        with pytest.raises(ValidationError):
            LossWeights(lam=1.5)
        with pytest.raises(ValidationError):
            LossWeights(epsilon=-0.1)


class TestCompress:

    def test_saturated_open_gate(self, rng):
        cfg = CompressionConfig(r=2).resolve(4, (8, 8))
        state = make_state(cfg)
        set_f_hat(state, 40.0)
        x = Tensor(rng.standard_normal((2, 4, 8, 8)))
        l_c, f = compress(x, cfg, state.filter, state)
        np.testing.assert_allclose(f.data, 1.0)
        assert l_c.shape == (2, 4, 5, 5)

    def test_saturated_closed_gate(self, rng):
        cfg = CompressionConfig(r=2).resolve(4, (8, 8))
        state = make_state(cfg)
        set_f_hat(state, [40.0, -40.0, 40.0, 40.0])
        l_c, _ = compress(Tensor(rng.standard_normal((2, 4, 8, 8))), cfg, state.filter, state)
        assert np.abs(l_c.data[:, 1]).max() < 1e-12

    def test_channel_mismatch(self):
        cfg = CompressionConfig().resolve(4, (8, 8))
        state = make_state(cfg)
        with pytest.raises(DimensionError):
            compress(Tensor(np.zeros((1, 3, 8, 8))), cfg, state.filter, state)

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_round_trip_restores_shape(self, r, rng):
        cfg = CompressionConfig(r=r).resolve(4, (32, 32))
        state = make_state(cfg)
        x = Tensor(rng.standard_normal((2, 4, 32, 32)))
        l_c, f = compress(x, cfg, state.filter, state)
        indices, payload = select_channels(l_c, f, b=cfg.phi)
        assert indices == list(range(cfg.phi))
        np.testing.assert_array_equal(payload.data, l_c.data)
        l_d = decompress(payload, indices, cfg, state)
        assert l_d.shape == x.shape

    def test_identity_kernels_reproduce_gated_input(self, rng):
        c = 3
        cfg = CompressionConfig(r=1).resolve(c, (6, 6))
        state = make_state(cfg)
        eye = np.zeros((c, c, 3, 3), dtype=np.float32)
        eye[np.arange(c), np.arange(c), 1, 1] = 1.0
        state.params['compress.weight'].data[...] = eye
        state.params['decompress.weight'].data[...] = eye
        set_f_hat(state, [0.3, -1.2, 2.0])
        x = rng.standard_normal((2, c, 6, 6)).astype(np.float32)
        l_c, f = compress(Tensor(x), cfg, state.filter, state, train=False)
        indices, payload = select_channels(l_c, f, b=c)
        l_d = decompress(payload, indices, cfg, state, train=False)
        expected = x * f.data[None, :, None, None]
        np.testing.assert_allclose(l_d.data, expected, rtol=3e-5, atol=1e-6)

    def test_single_channel_zero_fill(self, rng, monkeypatch):
        cfg = CompressionConfig(r=2).resolve(4, (8, 8))
        state = make_state(cfg)
        payload = Tensor(rng.standard_normal((2, 1, 5, 5)))
        captured = {}
        original = ops.conv_transpose2d

        def spy(z, *args, **kwargs):
            captured['z'] = z.data.copy()
            return original(z, *args, **kwargs)

        monkeypatch.setattr(ops, "conv_transpose2d", spy)
        decompress(payload, [2], cfg, state)
        z = captured['z']
        assert z.shape == (2, 4, 5, 5)
        nonzero = [k for k in range(4) if np.abs(z[:, k]).sum() > 0]
        assert nonzero == [2]

    def test_vector_mode(self, rng):
        cfg = CompressionConfig().resolve(12, None)
        state = make_state(cfg)
        x = Tensor(rng.standard_normal((5, 12)))
        l_c, f = compress(x, cfg, state.filter, state)
        indices, payload = select_channels(l_c, f, b=4)
        assert payload.shape == (5, 4)
        assert decompress(payload, indices, cfg, state).shape == (5, 12)

    def test_bypass_is_identity(self, rng):
        cfg = CompressionConfig(bypass=True).resolve(4, (8, 8))
        state = make_state(cfg)
        assert set(state.params) == {'compress.f_hat'}
        x = Tensor(rng.standard_normal((2, 4, 8, 8)))
        l_c, f = compress(x, cfg, state.filter, state)
        indices, payload = select_channels(l_c, f, b=4)
        np.testing.assert_array_equal(decompress(payload, indices, cfg, state).data, x.data)

    def test_decompress_rejects_bad_indices(self):
        cfg = CompressionConfig().resolve(4, (8, 8))
        state = make_state(cfg)
        payload = Tensor(np.zeros((1, 2, 8, 8)))
        with pytest.raises(ValidationError):
            decompress(payload, [1, 1], cfg, state)
        with pytest.raises(ValidationError):
            decompress(payload, [3, 4], cfg, state)
        with pytest.raises(ValidationError):
            decompress(payload, [0, 1, 2], cfg, state)


class TestSelectChannels:

    def test_top_two(self):
        assert select_indices(np.array([0.9, 0.1, 0.5, 0.7]), 2) == [0, 3]

    def test_ties_prefer_small_index(self):
        assert select_indices(np.full(5, 0.5), 3) == [0, 1, 2]

    def test_full_budget(self):
        assert select_indices(np.array([0.2, 0.8, 0.1]), 3) == [0, 1, 2]

    @pytest.mark.parametrize("b", [0, 5])
    def test_budget_out_of_range(self, b):
        with pytest.raises(ValidationError):
            select_indices(np.ones(4), b)

    def test_permutation_consistent(self, rng):
        f = rng.uniform(0, 1, 10)
        perm = rng.permutation(10)
        selected = set(select_indices(f, 4))
        permuted = select_indices(f[perm], 4)
        assert {int(perm[i]) for i in permuted} == selected

    def test_payload_in_index_order(self, rng):
        l_c = Tensor(rng.standard_normal((2, 4, 3, 3)))
        indices, payload = select_channels(l_c, np.array([0.9, 0.1, 0.5, 0.7]), 2)
        np.testing.assert_array_equal(payload.data, l_c.data[:, [0, 3]])


class TestPruneLoss:

    def test_at_budget(self):
        w = LossWeights(delta=1.0, lam=0.5)
        assert prune_loss(np.array([1.0, 1.0, 0.5]), 2.5, w).item() == pytest.approx(1.5)

    def test_formula(self):
        w = LossWeights(delta=1.0, lam=1.0)
        assert prune_loss(np.array([2.0, 1.0]), 2.0, w).item() == pytest.approx(math.e + 1 / math.e, rel=1e-6)
        assert prune_loss_value(3.0, 2.0, w) == pytest.approx(3.0861613, abs=1e-6)

    @pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("lam", [0.25, 0.5, 1.0])
    def test_minimizer(self, delta, lam):
        B = 4.0
        w = LossWeights(delta=delta, lam=lam)
        grid = np.linspace(B - 3, B + 3, 6001)
        values = np.array([prune_loss_value(s, B, w) for s in grid])
        expected = B + math.log(lam) / (2 * delta)
        assert grid[values.argmin()] == pytest.approx(expected, abs=1e-3)
        # 梯度在极小点处为零
        f = Tensor(np.array([expected / 2, expected / 2]), requires_grad=True, dtype=F64)
        with Tape() as tape:
            loss = prune_loss(f, B, w)
        tape.backward(loss)
        np.testing.assert_allclose(f.grad, 0.0, atol=1e-9)

    @pytest.mark.parametrize("lam", [0.25, 1.0])
    def test_strictly_convex(self, lam):
        w = LossWeights(delta=1.0, lam=lam)
        grid = np.linspace(-2, 8, 201)
        values = np.array([prune_loss_value(s, 3.0, w) for s in grid])
        assert np.all(values[:-2] - 2 * values[1:-1] + values[2:] > 0)

    def test_symmetric_for_unit_lambda(self):
        w = LossWeights(delta=0.7, lam=1.0)
        for t in (0.1, 0.5, 2.0):
            assert prune_loss_value(3.0 + t, 3.0, w) == pytest.approx(prune_loss_value(3.0 - t, 3.0, w), abs=1e-6)

    def test_exponent_clamped(self):
        value = prune_loss(np.full(512, 1.0, dtype=np.float32), 4.0, LossWeights(delta=1.0)).item()
        assert math.isfinite(value)
        assert value == pytest.approx(math.exp(30), rel=1e-5)


class TestTotalLoss:

    def test_zero_epsilon(self):
        assert total_loss(Tensor(2.0), Tensor(3.0), 0.0).item() == 2.0

    def test_arithmetic(self):
        assert total_loss(Tensor(2.0), Tensor(3.0), 0.5).item() == pytest.approx(3.5)

    def test_non_scalar(self):
        with pytest.raises(ValidationError):
            total_loss(Tensor(np.ones(2)), Tensor(1.0), 0.1)

    def test_gradient_through_gate(self, rng):
        """totalLoss 对 f̂ 与卷积权重的梯度（压缩 → 选择 → 解压 → 交叉熵）"""
        cfg = CompressionConfig(r=2).resolve(3, (6, 6))
        state = make_state(cfg, seed=3, dtype=F64)
        set_f_hat(state, [2.0, -1.0, 0.5])
        x = rng.standard_normal((4, 3, 6, 6))
        labels = [0, 1, 1, 0]
        head = rng.standard_normal((3 * 36, 2))
        w = LossWeights(delta=0.5, lam=0.5, epsilon=0.3)

        def forward():
            l_c, f = compress(Tensor(x, dtype=F64), cfg, state.filter, state)
            indices, payload = select_channels(l_c, f, b=2)
            l_d = decompress(payload, indices, cfg, state)
            logits = ops.dense(ops.flatten(l_d), Tensor(head, dtype=F64), Tensor(np.zeros(2), dtype=F64))
            return total_loss(ops.softmax_cross_entropy(logits, labels), prune_loss(f, 2.0, w), w.epsilon)

        with Tape() as tape:
            loss = forward()
        tape.backward(loss)

        for name in ('compress.f_hat', 'compress.weight', 'decompress.weight'):
            p = state.params[name]
            numeric = finite_difference(lambda: forward().item(), p.data)
            assert rel_error(p.grad, numeric) <= 1e-3, name

    def test_gradient_wrt_payload(self, rng):
        cfg = CompressionConfig(r=2).resolve(3, (6, 6))
        state = make_state(cfg, seed=5, dtype=F64)
        payload = rng.standard_normal((2, 2, 4, 4))
        g = rng.standard_normal((2, 3, 6, 6))
        t = Tensor(payload, requires_grad=True, dtype=F64)

        def scalar(p):
            return ops.sum_all(ops.mul(decompress(p, [0, 2], cfg, state), Tensor(g, dtype=F64)))

        with Tape() as tape:
            loss = scalar(t)
        tape.backward(loss)
        numeric = finite_difference(lambda: scalar(Tensor(payload, dtype=F64)).item(), payload)
        assert rel_error(t.grad, numeric) <= 1e-3


class TestResetPrune:

    def test_saturation_cases(self):
        filt = FilterVector(Parameter([40.0, -40.0]))
        reset_prune(filt, threshold=0.5, rng_seed=1)
        assert -F_HAT_INIT_RANGE <= filt.f_hat.data[0] <= F_HAT_INIT_RANGE
        assert filt.f_hat.data[1] == -40.0

    def test_threshold_one_is_noop(self):
        filt = FilterVector(Parameter([40.0, 3.0, -2.0]))
        before = filt.f_hat.data.copy()
        reset_prune(filt, threshold=1.0)
        np.testing.assert_array_equal(filt.f_hat.data, before)

    def test_deterministic(self):
        a = reset_prune(FilterVector(Parameter([5.0, 6.0, -5.0])), rng_seed=9)
        b = reset_prune(FilterVector(Parameter([5.0, 6.0, -5.0])), rng_seed=9)
        np.testing.assert_array_equal(a.f_hat.data, b.f_hat.data)

    def test_init_range(self, rng):
        filt = FilterVector.init(1000, rng)
        assert np.abs(filt.f_hat.data).max() <= F_HAT_INIT_RANGE
        assert abs(float(filt.f.mean()) - 0.5) < 0.01


class TestPayloadSize:

    def test_vgg_split_payload(self):
        # φ̃=128、16×16 特征图、r=1、b=φ 时每样本 128 KiB
        cfg = CompressionConfig().resolve(128, (16, 16))
        assert payload_nbytes(cfg, 128, 1) == 131072
        assert payload_nbytes(cfg, 64, 1) == 65536

    def test_ratio(self):
        cfg = CompressionConfig().resolve(128, (16, 16))
        assert compression_ratio(cfg, 4) == pytest.approx(32.0)
        cfg2 = CompressionConfig(r=2).resolve(8, (32, 32))
        assert compression_ratio(cfg2, 8) == pytest.approx(1024 / 289)
