# -*- coding: utf-8 -*-
"""
pytest 共享夹具
"""

import numpy as np
import pytest

from core.graph import Dataset
from tests.toy_models import (
    blobs,
    conv_bn_net,
    heterogeneous_mlp,
    mlp,
    random_inputs,
    residual_net,
    train_classifier,
    write_fixture,
)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def mlp_graph():
    return mlp(np.random.default_rng(7))


@pytest.fixture
def smooth_mlp_graph():
    return mlp(np.random.default_rng(11), sizes=(3, 5, 2), activation="sigmoid")


@pytest.fixture
def conv_bn_graph():
    return conv_bn_net(np.random.default_rng(3))


@pytest.fixture
def residual_graph():
    return residual_net(np.random.default_rng(5))


@pytest.fixture
def mlp_data(mlp_graph):
    return Dataset(random_inputs(np.random.default_rng(8), mlp_graph, 32))


@pytest.fixture(scope="session")
def toy_classifier():
    """在团簇数据上训练好的三层分类器及其训练/留出数据"""
    rng = np.random.default_rng(2024)
    train = blobs(rng, 240)
    held_out = blobs(rng, 120)
    graph = train_classifier(mlp(np.random.default_rng(99), sizes=(4, 12, 12, 3)), train)
    return graph, train, held_out


@pytest.fixture(scope="session")
def noisy_classifier():
    """团簇相互重叠、浮点输出远未饱和的分类器及其训练/留出数据"""
    rng = np.random.default_rng(2025)
    train = blobs(rng, 1000, spread=2.0)
    held_out = blobs(rng, 500, spread=2.0)
    graph = train_classifier(mlp(np.random.default_rng(77), sizes=(4, 16, 16, 3)), train, steps=400, lr=0.02)
    return graph, train, held_out


@pytest.fixture(scope="session")
def heterogeneous_classifier():
    """层间宽度、激活与尺度各异的分类器及其训练数据"""
    rng = np.random.default_rng(2026)
    train = blobs(rng, 600, spread=1.5)
    graph = train_classifier(heterogeneous_mlp(np.random.default_rng(31)), train, steps=400, lr=0.02)
    return graph, train


@pytest.fixture
def classifier_files(tmp_path, toy_classifier):
    """写到临时目录的分类器模型与训练数据"""
    graph, train, held_out = toy_classifier
    model_path, data_path = write_fixture(graph, train, tmp_path / "fixture")
    return model_path, data_path
