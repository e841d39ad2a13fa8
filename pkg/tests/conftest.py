"""测试共享夹具"""

import os
from pathlib import Path

import numpy as np
import pytest

from splitstream.core.compression import CompressionConfig
from splitstream.core.data import DATA_ENV, synth_dataset
from splitstream.core.model import build_mlp, build_vgg11_like, split_at
from splitstream.server.link import loopback_link


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def synth():
    """两类 16 维高斯团"""
    return synth_dataset(classes=2, dims=16, n_per_class=64, seed=7, test_per_class=32)


@pytest.fixture
def mlp_model():
    """widths [16, 12, 8, 2]，在第 1 层后分割，φ = φ̃ = 12"""
    return split_at(build_mlp([16, 12, 8, 2]), 1, CompressionConfig())


@pytest.fixture
def bypass_mlp_model():
    return split_at(build_mlp([16, 12, 8, 2]), 1, CompressionConfig(bypass=True))


@pytest.fixture
def tiny_vgg():
    """宽度系数 1/16 的 VGG11-like，在第 5 层后分割（8×16×16）"""
    return split_at(build_vgg11_like(2, width_scale=1 / 16), 5, CompressionConfig(r=2))


@pytest.fixture
def loopback():
    client, server = loopback_link(timeout_s=10.0)
    yield client, server
    client.close()
    server.close()


@pytest.fixture
def cifar_root():
    """CIFAR-10 二进制数据目录；不存在时跳过"""
    root = os.environ.get(DATA_ENV)
    if not root:
        pytest.skip(f"未设置 {DATA_ENV}，跳过需要 CIFAR-10 的测试")
    path = Path(root)
    if not (path / 'data_batch_1.bin').exists() and not (path / 'cifar-10-batches-bin' / 'data_batch_1.bin').exists():
        pytest.skip(f"{path} 下没有 CIFAR-10 二进制文件")
    return path


def finite_difference(fn, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """对标量函数 fn 在 x 处做中心差分（原地扰动后恢复）"""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        up = fn()
        x[idx] = orig - h
        down = fn()
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8))
