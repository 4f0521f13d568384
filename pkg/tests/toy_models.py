# -*- coding: utf-8 -*-
"""
测试用的小型网络与数据集构造函数
"""

from dataclasses import replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from core.autodiff import backward
from core.graph import Dataset, LayerSpec, NetworkGraph, build_graph
from core.network import bias_id, forward_record, weight_id
from core.optimizer import OptimState, radam_step
from core.serialization import save_dataset, save_model


def dense(name: str, source: str, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> LayerSpec:
    params = {"weight": np.asarray(weight, dtype=np.float64)}
    if bias is not None:
        params["bias"] = np.asarray(bias, dtype=np.float64)
    return LayerSpec(name, "dense", (source,), params)


def conv(name: str, source: str, weight: np.ndarray, bias: Optional[np.ndarray] = None,
         stride: int = 1, pad: int = 0) -> LayerSpec:
    params = {"weight": np.asarray(weight, dtype=np.float64)}
    if bias is not None:
        params["bias"] = np.asarray(bias, dtype=np.float64)
    return LayerSpec(name, "conv2d", (source,), params, {"stride": stride, "pad": pad})


def unary(name: str, kind: str, source: str, **attrs) -> LayerSpec:
    return LayerSpec(name, kind, (source,), {}, attrs)


def batchnorm(name: str, source: str, rng: np.random.Generator, channels: int, eps: float = 1e-5) -> LayerSpec:
    params = {
        "gamma": rng.uniform(0.5, 1.5, channels),
        "beta": rng.normal(0.0, 0.3, channels),
        "mean": rng.normal(0.0, 0.3, channels),
        "var": rng.uniform(0.5, 2.0, channels),
    }
    return LayerSpec(name, "batchnorm", (source,), params, {"eps": eps})


def mlp(rng: np.random.Generator, sizes: Sequence[int] = (4, 6, 5, 3),
        activation: Union[str, Sequence[str]] = "relu",
        scales: Optional[Sequence[float]] = None) -> NetworkGraph:
    """全连接网络：除最后一层外每层接激活，比较点为各激活输出与网络输出"""
    depth = len(sizes) - 1
    activations = [activation] * (depth - 1) if isinstance(activation, str) else list(activation)
    scales = [1.0] * depth if scales is None else list(scales)
    layers = []
    points = []
    source = "input"
    for index, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        weight = rng.normal(0.0, scales[index - 1] / np.sqrt(fan_in), (fan_out, fan_in))
        layers.append(dense(f"fc{index}", source, weight, rng.normal(0.0, 0.1, fan_out)))
        source = f"fc{index}"
        if index < depth:
            layers.append(unary(f"act{index}", activations[index - 1], source))
            source = f"act{index}"
            points.append(source)
    points.append(source)
    return build_graph((sizes[0],), layers, points)


def heterogeneous_mlp(rng: np.random.Generator) -> NetworkGraph:
    """各层宽度、激活函数与权重尺度都不相同的四层网络"""
    return mlp(rng, sizes=(4, 12, 10, 8, 3), activation=("relu", "sigmoid", "relu"), scales=(2.0, 0.5, 1.5, 0.3))


def conv_bn_net(rng: np.random.Generator) -> NetworkGraph:
    """conv → bn → relu → flatten → dense，比较点 bn / relu / fc"""
    layers = [
        conv("conv", "input", rng.normal(0.0, 0.4, (3, 2, 3, 3)), rng.normal(0.0, 0.1, 3), pad=1),
        batchnorm("bn", "conv", rng, 3),
        unary("relu", "relu", "bn"),
        unary("flat", "flatten", "relu"),
        dense("fc", "flat", rng.normal(0.0, 0.15, (3, 48)), rng.normal(0.0, 0.1, 3)),
    ]
    return build_graph((2, 4, 4), layers, ["bn", "relu", "fc"])


def residual_net(rng: np.random.Generator) -> NetworkGraph:
    """带残差相加与通道拼接的全连接网络"""
    layers = [
        dense("fc1", "input", rng.normal(0.0, 0.5, (4, 4)), rng.normal(0.0, 0.1, 4)),
        unary("act1", "relu", "fc1"),
        dense("fc2", "act1", rng.normal(0.0, 0.5, (4, 4)), rng.normal(0.0, 0.1, 4)),
        LayerSpec("res", "add", ("act1", "fc2")),
        unary("act2", "sigmoid", "res"),
        LayerSpec("cat", "concat", ("act2", "act1")),
        dense("fc3", "cat", rng.normal(0.0, 0.5, (2, 8)), rng.normal(0.0, 0.1, 2)),
    ]
    return build_graph((4,), layers, ["act1", "res", "act2", "cat", "fc3"])


def random_inputs(rng: np.random.Generator, graph: NetworkGraph, count: int) -> np.ndarray:
    return rng.normal(0.0, 1.0, (count,) + graph.input_shape)


def blobs(rng: np.random.Generator, count: int, dims: int = 4, classes: int = 3,
          spread: float = 0.6) -> Dataset:
    """可分的高斯团簇分类数据"""
    centers = np.random.default_rng(1234).normal(0.0, 2.0, (classes, dims))
    labels = rng.integers(0, classes, count)
    inputs = centers[labels] + rng.normal(0.0, spread, (count, dims))
    return Dataset(inputs, labels.astype(np.int64))


def with_params(graph: NetworkGraph, params: Dict[str, np.ndarray]) -> NetworkGraph:
    layers = []
    for layer in graph.layers:
        if layer.is_weighted:
            updated = dict(layer.params, weight=params[weight_id(layer.name)])
            if bias_id(layer.name) in params:
                updated["bias"] = params[bias_id(layer.name)]
            layer = replace(layer, params=updated)
        layers.append(layer)
    return graph.with_layers(layers)


def train_classifier(graph: NetworkGraph, dataset: Dataset, steps: int = 300, lr: float = 0.05) -> NetworkGraph:
    """用引擎自身的计算带与 RAdam 做全批量交叉熵训练"""
    params = {}
    for layer in graph.weighted_layers():
        params[weight_id(layer.name)] = layer.weight
        if layer.bias is not None:
            params[bias_id(layer.name)] = layer.bias
    targets = np.eye(graph.output_shape[0])[dataset.labels]
    state = OptimState()
    for _ in range(steps):
        tape, _, logits = forward_record(with_params(graph, params), dataset.inputs)
        seed = (softmax(logits, axis=1) - targets) / len(dataset)
        grads = backward(tape, {tape.output_id: seed}, list(params))
        params, state = radam_step(params, grads, state, lr)
    return with_params(graph, params)


def write_fixture(graph: NetworkGraph, dataset: Dataset, directory: Path,
                  stem: str = "toy") -> Tuple[Path, Path]:
    """把模型与数据写到目录，返回 (模型清单路径, 数据集路径)"""
    directory.mkdir(parents=True, exist_ok=True)
    model_path = save_model(graph, directory / f"{stem}.eptq.json")
    data_path = save_dataset(dataset, directory / f"{stem}.eptqd")
    return model_path, data_path
