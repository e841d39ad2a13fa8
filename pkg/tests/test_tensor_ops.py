"""自动微分引擎与原语操作测试"""

import math

import numpy as np
import pytest

from conftest import finite_difference, rel_error
from splitstream.core import ops
from splitstream.core.optim import sgd_step
from splitstream.core.tensor import Parameter, Tape, Tensor, backward
from splitstream.utils.errors import DimensionError, StateError, ValidationError

SEEDS = range(20)
F64 = np.float64


def t64(a, grad=True):
    return Tensor(a, requires_grad=grad, dtype=F64)


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for bi in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = b[fi]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ci, i * stride + u, j * stride + v] * w[fi, ci, u, v]
                    out[bi, fi, i, j] = acc
    return out


def check_grads(build, arrays, tol=1e-3):
    """build(*tensors) -> 标量；对每个输入比较解析梯度与中心差分"""
    tensors = [t64(a) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
    tape.backward(loss)
    for k, a in enumerate(arrays):
        probe = [np.array(x, dtype=F64, copy=True) for x in arrays]

        def fn():
            return build(*[t64(x, grad=False) for x in probe]).item()

        numeric = finite_difference(fn, probe[k])
        assert rel_error(tensors[k].grad, numeric) <= tol


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum_all(ops.mul(out, Tensor(weights, dtype=out.dtype)))


class TestDense:

    def test_identity_weights(self):
        y = ops.dense(Tensor([[1, 2]]), Tensor([[1, 0], [0, 1]]), Tensor([0, 0]))
        np.testing.assert_array_equal(y.data, [[1, 2]])

    def test_zero_weights(self):
        y = ops.dense(Tensor([[1, 2]]), Tensor(np.zeros((2, 2))), Tensor([3, 4]))
        np.testing.assert_array_equal(y.data, [[3, 4]])

    def test_matches_triple_loop(self, rng):
        x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                expected[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(4))
        y = ops.dense(t64(x), t64(w), t64(b))
        np.testing.assert_allclose(y.data, expected, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
            ops.dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


class TestConv:

    def test_scalar_kernel(self, rng):
        x = rng.standard_normal((1, 1, 3, 3))
        y = ops.conv2d(t64(x), t64(np.full((1, 1, 1, 1), 2.0)), t64(np.zeros(1)))
        np.testing.assert_allclose(y.data, 2 * x)

    def test_summation_kernel_center(self, rng):
        x = rng.standard_normal((1, 1, 3, 3))
        y = ops.conv2d(t64(x), t64(np.ones((1, 1, 3, 3))), t64(np.zeros(1)), stride=1, padding=1)
        assert y.data[0, 0, 1, 1] == pytest.approx(x.sum())

    def test_matches_seven_loop_oracle(self, rng):
        x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        for stride, padding in [(1, 0), (2, 1), (3, 2)]:
            y = ops.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=padding)
            np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, padding), atol=1e-5)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), Tensor(np.zeros(1)))

    @pytest.mark.parametrize("stride", [1, 2, 3])
    @pytest.mark.parametrize("padding", [0, 1, 2, 3])
    @pytest.mark.parametrize("kernel", [1, 2, 3, 4, 5])
    def test_shape_formulas(self, stride, padding, kernel):
        h = 9
        x =Tensor(np.zeros((1, 2, h, h)))
        y = ops.conv2d(x, Tensor(np.zeros((3, 2, kernel, kernel))), Tensor(np.zeros(3)), stride, padding)
        ho = (h + 2 * padding - kernel) // stride + 1
        assert y.shape == (1, 3, ho, ho)
        out_h = (ho - 1) * stride - 2 * padding + kernel
        if out_h > 0:
            z = ops.conv_transpose2d(Tensor(np.zeros((1, 3, ho, ho))), Tensor(np.zeros((3, 2, kernel, kernel))),
                                     Tensor(np.zeros(2)), stride, padding)
            assert z.shape == (1, 2, out_h, out_h)


class TestConvTranspose:

    def test_r2_restoration_arithmetic(self):
        y = ops.conv_transpose2d(Tensor(np.zeros((1, 1, 17, 17))), Tensor(np.zeros((1, 1, 4, 4))),
                                 Tensor(np.zeros(1)), stride=2, padding=2)
        assert y.shape[2:] == (32, 32)

    def test_identity_size(self):
        y = ops.conv_transpose2d(Tensor(np.zeros((1, 1, 11, 11))), Tensor(np.zeros((1, 1, 3, 3))),
                                 Tensor(np.zeros(1)), stride=1, padding=1)
        assert y.shape[2:] == (11, 11)

    def test_equals_conv_input_gradient(self, rng):
        w = rng.standard_normal((3, 2, 3, 3))  # conv: 2 → 3 通道
        z = t64(rng.standard_normal((2, 2, 8, 8)))
        g = rng.standard_normal((2, 3, 4, 4))
        with Tape() as tape:
            out = ops.conv2d(z, t64(w, grad=False), t64(np.zeros(3), grad=False), stride=2, padding=1)
            loss = weighted_sum(out, g)
        tape.backward(loss)
        y = ops.conv_transpose2d(t64(g), t64(w), t64(np.zeros(2)), stride=2, padding=1, output_padding=1)
        np.testing.assert_allclose(y.data, z.grad, atol=1e-5)

    def test_non_positive_output(self):
        with pytest.raises(DimensionError):
            ops.conv_transpose2d(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.zeros((1, 1, 1, 1))),
                                 Tensor(np.zeros(1)), stride=1, padding=1)

    def test_output_padding_range(self):
        with pytest.raises(ValidationError):
            ops.conv_transpose2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))),
                                 Tensor(np.zeros(1)), stride=2, padding=1, output_padding=2)


class TestBatchNorm:

    def _stats(self, c):
        return np.zeros(c), np.ones(c)

    def test_constant_input_gives_beta(self):
        x = np.ones((4, 2, 3, 3)) * np.array([1.0, -2.0])[None, :, None, None]
        beta = np.array([0.3, -0.7])
        y = ops.batchnorm(t64(x), t64(np.ones(2)), t64(beta), *self._stats(2), train=True)
        np.testing.assert_allclose(y.data, np.broadcast_to(beta[None, :, None, None], x.shape), atol=1e-6)

    def test_standardized_input_identity(self, rng):
        x = rng.standard_normal((64, 3))
        x = (x - x.mean(0)) / x.std(0)
        y = ops.batchnorm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), *self._stats(3), train=True)
        np.testing.assert_allclose(y.data, x, atol=1e-4)

    def test_output_statistics(self, rng):
        x = rng.standard_normal((8, 3, 5, 5)) * 4 + 2
        gamma, beta = np.array([0.5, 1.0, 2.0]), np.array([-1.0, 0.0, 3.0])
        y = ops.batchnorm(t64(x), t64(gamma), t64(beta), *self._stats(3), train=True).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), beta, atol=1e-3)
        np.testing.assert_allclose(y.std(axis=(0, 2, 3)), gamma, atol=1e-3)

    def test_running_stats_and_eval(self, rng):
        x = rng.standard_normal((16, 2)) + 5
        mean, var = self._stats(2)
        ops.batchnorm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), mean, var, train=True)
        np.testing.assert_allclose(mean, 0.1 * x.mean(0))
        np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(0, ddof=1))
        frozen = (mean.copy(), var.copy())
        y = ops.batchnorm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), mean, var, train=False)
        np.testing.assert_allclose(y.data, (x - frozen[0]) / np.sqrt(frozen[1] + ops.BN_EPS))
        np.testing.assert_array_equal(mean, frozen[0])

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ops.batchnorm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                          np.zeros(2), np.ones(2))


class TestElementwise:

    def test_sigmoid_zero(self):
        assert ops.sigmoid(Tensor([0.0])).item() == 0.5

    def test_sigmoid_saturates_without_overflow(self):
        y = ops.sigmoid(Tensor([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(y, [0.0, 1.0])

    def test_uniform_logits(self):
        for k in (2, 5, 10):
            loss = ops.softmax_cross_entropy(Tensor(np.zeros((3, k))), [0, 1, 1])
            assert loss.item() == pytest.approx(math.log(k), rel=1e-6)

    def test_cross_entropy_formula(self, rng):
        logits = rng.standard_normal((6, 4))
        labels = rng.integers(0, 4, 6)
        expected = np.mean([-logits[i, labels[i]] + np.log(np.exp(logits[i]).sum()) for i in range(6)])
        assert ops.softmax_cross_entropy(t64(logits), labels).item() == pytest.approx(expected, abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_maxpool_picks_max(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(ops.maxpool2d(Tensor(x)).data, [[[[5, 7], [13, 15]]]])


class TestBackward:

    def test_linear_case(self, rng):
        x = rng.standard_normal(5)
        w = t64(rng.standard_normal(5))
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(w, t64(x, grad=False)))
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, x)

    def test_two_branches_add(self, rng):
        a = t64(rng.standard_normal(4))
        with Tape() as tape:
            loss = ops.add(ops.sum_all(ops.scale(a, 2.0)), ops.sum_all(ops.scale(a, 3.0)))
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, np.full(4, 5.0))

    def test_unreachable_untouched(self):
        a, b = t64(np.ones(2)), t64(np.ones(2))
        with Tape() as tape:
            loss = ops.sum_all(a)
        tape.backward(loss)
        assert b.grad is None

    def test_non_scalar_rejected(self):
        a = t64(np.ones(3))
        with Tape() as tape:
            out = ops.scale(a, 2.0)
        with pytest.raises(ValidationError):
            tape.backward(out)

    def test_second_backward_rejected(self):
        a = t64(np.ones(3))
        with Tape() as tape:
            loss = ops.sum_all(a)
        tape.backward(loss)
        with pytest.raises(StateError):
            tape.backward(loss)
        with pytest.raises(StateError):
            with tape:
                pass

    def test_tensor_backward_requires_tape(self):
        with pytest.raises(StateError):
            backward(Tensor(1.0))

    def test_dtype_preserved(self):
        y = ops.sigmoid(Tensor(np.zeros(3), dtype=np.float64))
        assert y.dtype == np.float64
        assert ops.sigmoid(Tensor(np.zeros(3))).dtype == np.float32


class TestGradients:
    """每个原语的解析梯度与中心差分比较（双精度参考，20 个种子）"""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_dense(self, seed):
        r = np.random.default_rng(seed)
        g = r.standard_normal((3, 2))
        check_grads(lambda x, w, b: weighted_sum(ops.dense(x, w, b), g),
                    [r.standard_normal((3, 4)), r.standard_normal((4, 2)), r.standard_normal(2)])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d(self, seed):
        r = np.random.default_rng(seed)
        g = r.standard_normal((2, 3, 3, 3))
        check_grads(lambda x, w, b: weighted_sum(ops.conv2d(x, w, b, stride=2, padding=1), g),
                    [r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv_transpose2d(self, seed):
        r = np.random.default_rng(seed)
        g = r.standard_normal((2, 2, 6, 6))
        check_grads(lambda x, w, b: weighted_sum(
            ops.conv_transpose2d(x, w, b, stride=2, padding=1, output_padding=1), g),
            [r.standard_normal((2, 3, 3, 3)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(2)])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batchnorm_train(self, seed):
        r = np.random.default_rng(seed)
        g = r.standard_normal((4, 3, 2, 2))

        def build(x, gamma, beta):
            return weighted_sum(ops.batchnorm(x, gamma, beta, np.zeros(3), np.ones(3), train=True), g)

        check_grads(build, [r.standard_normal((4, 3, 2, 2)), r.uniform(0.5, 1.5, 3), r.standard_normal(3)])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batchnorm_eval(self, seed):
        r = np.random.default_rng(seed)
        g = r.standard_normal((4, 3))
        mean, var = r.standard_normal(3), r.uniform(0.5, 2.0, 3)
        check_grads(lambda x, gamma, beta: weighted_sum(
            ops.batchnorm(x, gamma, beta, mean.copy(), var.copy(), train=False), g),
            [r.standard_normal((4, 3)), r.uniform(0.5, 1.5, 3), r.standard_normal(3)])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu_sigmoid(self, seed):
        r = np.random.default_rng(seed)
        # 远离 0 处的折点
        x = r.uniform(0.1, 2.0, (3, 4)) * r.choice([-1, 1], (3, 4))
        g = r.standard_normal((3, 4))
        check_grads(lambda a: weighted_sum(ops.relu(a), g), [x])
        check_grads(lambda a: weighted_sum(ops.sigmoid(a), g), [x])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_maxpool(self, seed):
        r = np.random.default_rng(seed)
        x = (r.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1).astype(F64)
        g = r.standard_normal((2, 2, 2, 2))
        check_grads(lambda a: weighted_sum(ops.maxpool2d(a), g), [x])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_channel_ops(self, seed):
        r = np.random.default_rng(seed)
        g_mul = r.standard_normal((2, 4, 3, 3))
        check_grads(lambda x, f: weighted_sum(ops.channel_mul(x, f), g_mul),
                    [r.standard_normal((2, 4, 3, 3)), r.standard_normal(4)])
        g_gather = r.standard_normal((2, 2, 3, 3))
        check_grads(lambda x: weighted_sum(ops.gather_channels(x, [1, 3]), g_gather),
                    [r.standard_normal((2, 4, 3, 3))])
        g_scatter = r.standard_normal((2, 4, 3, 3))
        check_grads(lambda x: weighted_sum(ops.scatter_channels(x, [0, 2], 4), g_scatter),
                    [r.standard_normal((2, 2, 3, 3))])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_cross_entropy(self, seed):
        r = np.random.default_rng(seed)
        labels = r.integers(0, 5, 4)
        check_grads(lambda z: ops.softmax_cross_entropy(z, labels), [r.standard_normal((4, 5))])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_prune_loss(self, seed):
        r = np.random.default_rng(seed)
        f = r.uniform(0, 1, 6)
        check_grads(lambda v: ops.prune_loss_op(v, budget=2.5, delta=0.7, lam=0.5), [f])

    def test_float32_composite(self, rng):
        """单精度下 dense → relu → CE 的梯度与双精度差分一致"""
        x = rng.standard_normal((4, 5)).astype(np.float32)
        w = Parameter(rng.standard_normal((5, 3)), name='w')
        b = Parameter(np.zeros(3), name='b')
        labels = [0, 1, 2, 1]
        with Tape() as tape:
            loss = ops.softmax_cross_entropy(ops.relu(ops.dense(Tensor(x), w, b)), labels)
        tape.backward(loss)
        w64 = w.data.astype(F64)

        def fn():
            return ops.softmax_cross_entropy(
                ops.relu(ops.dense(t64(x, False), t64(w64, False), t64(b.data, False))), labels).item()

        assert rel_error(w.grad, finite_difference(fn, w64)) <= 1e-3


class TestSgd:

    def test_plain_step(self):
        p = Parameter([1.0])
        p.grad = np.array([1.0], dtype=np.float32)
        sgd_step([p], lr=0.1, weight_decay=0.0)
        assert p.data[0] == pytest.approx(0.9)
        assert p.grad is None

    def test_decay_only(self):
        p = Parameter([1.0])
        p.grad = np.zeros(1, dtype=np.float32)
        sgd_step([p], lr=0.1, weight_decay=0.5)
        assert p.data[0] == pytest.approx(0.95)

    def test_two_steps_equal_accumulated(self, rng):
        g1, g2 = rng.standard_normal(3), rng.standard_normal(3)
        a = Parameter(np.ones(3), dtype=F64)
        for g in (g1, g2):
            a.grad = g.copy()
            sgd_step([a], lr=0.1, weight_decay=0.0)
        b = Parameter(np.ones(3), dtype=F64)
        b.grad = g1 + g2
        sgd_step([b], lr=0.1, weight_decay=0.0)
        np.testing.assert_allclose(a.data, b.data)

    def test_missing_grad(self):
        with pytest.raises(StateError):
            sgd_step([Parameter([1.0], name='w')], lr=0.1)

    def test_disconnected_param_fails_after_first_step(self):
        used = Parameter([1.0, 2.0], name='used')
        unused = Parameter([3.0], name='unused')
        unused.grad = np.ones(1, dtype=np.float32)
        with Tape() as tape:
            loss = ops.sum_all(used)
        tape.backward(loss)
        sgd_step([used, unused], lr=0.1, weight_decay=0.0)
        assert unused.data[0] == pytest.approx(2.9)

        with Tape() as tape:
            loss = ops.sum_all(used)
        tape.backward(loss)
        with pytest.raises(StateError, match="unused"):
            sgd_step([used, unused], lr=0.1, weight_decay=0.0)
        np.testing.assert_allclose(used.data, [0.9, 1.9], rtol=1e-6)

    def test_frozen_param_skipped(self):
        p = Parameter([1.0], learnable=False)
        sgd_step([p], lr=0.1)
        assert p.data[0] == 1.0

    def test_invalid_lr(self):
        with pytest.raises(ValidationError):
            sgd_step([], lr=0.0)
