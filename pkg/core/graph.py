# -*- coding: utf-8 -*-
"""
网络图模块
定义网络图数据模型、形状推断、位宽分配与 BatchNorm 折叠
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config.settings import EDGE_LAYER_BITS, FLOAT_BITS, MAX_BITS, MIN_BITS
from .errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

INPUT_NAME = "input"

LAYER_KINDS = [
    "dense", "conv2d", "batchnorm", "relu", "add", "concat",
    "softmax", "sigmoid", "flatten", "avgpool",
]
WEIGHTED_KINDS = ["dense", "conv2d"]

# 每种层需要的参数角色
REQUIRED_PARAMS = {
    "dense": ["weight"],
    "conv2d": ["weight"],
    "batchnorm": ["gamma", "beta", "mean", "var"],
}
OPTIONAL_PARAMS = {
    "dense": ["bias"],
    "conv2d": ["bias"],
}

Shape = Tuple[int, ...]


def validate_bits(bits: int, where: str) -> int:
    """位宽只能是 2..16 或 32"""
    if bits != FLOAT_BITS and not (MIN_BITS <= bits <= MAX_BITS):
        raise GraphError(f"{where}: 非法位宽 {bits}（允许 {MIN_BITS}..{MAX_BITS} 或 {FLOAT_BITS}）")
    return int(bits)


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """单层描述"""
    name: str
    kind: str
    inputs: Tuple[str, ...]
    params: Mapping[str, np.ndarray] = field(default_factory=dict)
    attrs: Mapping[str, Any] = field(default_factory=dict)
    bits_weight: int = FLOAT_BITS
    bits_activation: int = FLOAT_BITS

    @property
    def is_weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    @property
    def weight(self) -> Optional[np.ndarray]:
        return self.params.get("weight")

    @property
    def bias(self) -> Optional[np.ndarray]:
        return self.params.get("bias")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class NetworkGraph:
    """
    网络图：按拓扑顺序排列的层，最后一层为输出

    comparison_points 是比较浮点与量化激活的层名（非线性输出、无非线性的卷积、残差加、拼接）
    """
    input_shape: Shape
    layers: Tuple[LayerSpec, ...]
    comparison_points: Tuple[str, ...]
    shapes: Mapping[str, Shape] = field(default_factory=dict)

    @property
    def output_name(self) -> str:
        return self.layers[-1].name

    @property
    def output_shape(self) -> Shape:
        return self.shapes[self.output_name]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise GraphError(f"未知层: {name}")

    def weighted_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.is_weighted]

    def layer_index(self, name: str) -> int:
        """带权层编号 ℓ ∈ {1..L}"""
        for index, layer in enumerate(self.weighted_layers(), start=1):
            if layer.name == name:
                return index
        raise GraphError(f"{name} 不是带权层")

    def with_layers(self, layers: Sequence[LayerSpec],
                    comparison_points: Optional[Sequence[str]] = None) -> "NetworkGraph":
        """返回替换了层（及比较点）并重新校验的新图"""
        points = self.comparison_points if comparison_points is None else tuple(comparison_points)
        return build_graph(self.input_shape, layers, points)


@dataclass(frozen=True, eq=False)
class Dataset:
    """代表性数据集；标签可选，流水线本身不读取标签"""
    inputs: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __iter__(self) -> Iterator[Tuple[np.ndarray, Optional[int]]]:
        for index in range(len(self)):
            label = None if self.labels is None else int(self.labels[index])
            yield self.inputs[index], label

    @property
    def sample_shape(self) -> Shape:
        return tuple(self.inputs.shape[1:])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def take(self, count: int) -> "Dataset":
        labels = None if self.labels is None else self.labels[:count]
        return Dataset(self.inputs[:count], labels)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.inputs[indices], labels)


def _expect_params(layer: LayerSpec) -> None:
    required = REQUIRED_PARAMS.get(layer.kind, [])
    allowed = set(required) | set(OPTIONAL_PARAMS.get(layer.kind, []))
    for role in required:
        if role not in layer.params:
            raise GraphError(f"层 {layer.name} 缺少参数 {role}")
    for role in layer.params:
        if role not in allowed:
            raise GraphError(f"层 {layer.name} 含有多余参数 {role}")
        if not np.all(np.isfinite(layer.params[role])):
            raise GraphError(f"层 {layer.name} 的参数 {role} 含有非有限值")


def _layer_shape(layer: LayerSpec, in_shapes: List[Shape]) -> Shape:
    """推断单层输出形状（不含批维度）"""
    kind = layer.kind
    if kind in ("add", "concat"):
        if len(in_shapes) < 2 or (kind == "add" and len(in_shapes) != 2):
            raise ShapeError(f"层 {layer.name}: {kind} 的输入个数不正确 ({len(in_shapes)})")
    elif len(in_shapes) != 1:
        raise ShapeError(f"层 {layer.name}: 需要恰好一个输入，实际 {len(in_shapes)} 个")

    first = in_shapes[0]
    if kind == "dense":
        weight = layer.weight
        if len(first) != 1 or weight.ndim != 2 or weight.shape[1] != first[0]:
            raise ShapeError(f"层 {layer.name}: 权重 {weight.shape} 与输入 {first} 不匹配")
        out = (weight.shape[0],)
    elif kind == "conv2d":
        weight = layer.weight
        stride, pad = int(layer.attrs.get("stride", 1)), int(layer.attrs.get("pad", 0))
        if len(first) != 3 or weight.ndim != 4 or weight.shape[1] != first[0]:
            raise ShapeError(f"层 {layer.name}: 权重 {weight.shape} 与输入 {first} 不匹配")
        if stride < 1 or pad < 0:
            raise ShapeError(f"层 {layer.name}: 非法 stride={stride} 或 pad={pad}")
        out_h = (first[1] + 2 * pad - weight.shape[2]) // stride + 1
        out_w = (first[2] + 2 * pad - weight.shape[3]) // stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"层 {layer.name}: 卷积核大于输入")
        out = (weight.shape[0], out_h, out_w)
    elif kind == "batchnorm":
        for role in ("gamma", "beta", "mean", "var"):
            if layer.params[role].shape != (first[0],):
                raise ShapeError(f"层 {layer.name}: {role} 形状应为 ({first[0]},)")
        if np.any(layer.params["var"] + float(layer.attrs.get("eps", 0.0)) <= 0):
            raise ShapeError(f"层 {layer.name}: 方差加 eps 必须为正")
        out = first
    elif kind in ("relu", "softmax", "sigmoid"):
        out = first
    elif kind == "add":
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"层 {layer.name}: 残差相加形状不一致 {in_shapes}")
        out = first
    elif kind == "concat":
        tails = {s[1:] for s in in_shapes}
        if len(tails) != 1 or len({len(s) for s in in_shapes}) != 1:
            raise ShapeError(f"层 {layer.name}: 拼接输入除通道外形状必须一致 {in_shapes}")
        out = (sum(s[0] for s in in_shapes),) + first[1:]
    elif kind == "flatten":
        out = (int(np.prod(first)),)
    elif kind == "avgpool":
        kernel = int(layer.attrs.get("kernel", 2))
        stride = int(layer.attrs.get("stride", kernel))
        if len(first) != 3 or kernel < 1 or stride < 1 or kernel > min(first[1:]):
            raise ShapeError(f"层 {layer.name}: 池化参数与输入 {first} 不匹配")
        out = (first[0], (first[1] - kernel) // stride + 1, (first[2] - kernel) // stride + 1)
    else:
        raise GraphError(f"不支持的层类型: {kind}")

    if layer.bias is not None and layer.bias.shape != (out[0],):
        raise ShapeError(f"层 {layer.name}: 偏置形状 {layer.bias.shape} 应为 ({out[0]},)")
    return out


def infer_shapes(input_shape: Shape, layers: Sequence[LayerSpec]) -> Dict[str, Shape]:
    """
    校验连接关系并推断每层输出形状

    Returns:
        层名 -> 单样本形状，包含 "input"
    """
    shapes: Dict[str, Shape] = {INPUT_NAME: tuple(input_shape)}
    for layer in layers:
        if layer.kind not in LAYER_KINDS:
            raise GraphError(f"不支持的层类型: {layer.kind} (层 {layer.name})")
        if layer.name in shapes:
            raise GraphError(f"层名重复或与输入同名: {layer.name}")
        for source in layer.inputs:
            if source not in shapes:
                raise GraphError(f"层 {layer.name} 引用了未定义或后置的输入 {source}（图必须按拓扑排序且无环）")
        _expect_params(layer)
        validate_bits(layer.bits_weight, f"层 {layer.name}")
        validate_bits(layer.bits_activation, f"层 {layer.name}")
        shapes[layer.name] = _layer_shape(layer, [shapes[s] for s in layer.inputs])
    return shapes


def build_graph(input_shape: Sequence[int], layers: Sequence[LayerSpec],
                comparison_points: Sequence[str]) -> NetworkGraph:
    """构建并校验网络图"""
    layers = tuple(layers)
    if not layers:
        raise GraphError("网络图至少需要一层")
    shapes = infer_shapes(tuple(int(d) for d in input_shape), layers)

    consumed = {source for layer in layers for source in layer.inputs}
    if INPUT_NAME not in consumed:
        raise GraphError("网络输入未被任何层使用")
    dangling = [layer.name for layer in layers[:-1] if layer.name not in consumed]
    if dangling:
        raise GraphError(f"网络只能有一个输出，以下层的输出未被使用: {dangling}")

    names = {layer.name for layer in layers}
    unknown = [p for p in comparison_points if p not in names]
    if unknown:
        raise GraphError(f"比较点引用了不存在的层: {unknown}")
    if len(set(comparison_points)) != len(comparison_points):
        raise GraphError("比较点重复")

    return NetworkGraph(tuple(shapes[INPUT_NAME]), layers, tuple(comparison_points), shapes)


def assign_bit_widths(graph: NetworkGraph, bits_weight: int, bits_activation: int,
                      overrides: Optional[Mapping[str, int]] = None,
                      edge_layers_8bit: bool = True) -> NetworkGraph:
    """
    分配位宽

    Args:
        graph: 网络图
        bits_weight: 中间带权层的权重位宽
        bits_activation: 比较点的激活位宽
        overrides: 层名 -> 权重位宽，优先级最高
        edge_layers_8bit: 首尾带权层与网络输出激活固定 8 位

    Returns:
        新的网络图
    """
    validate_bits(bits_weight, "bits_weight")
    validate_bits(bits_activation, "bits_activation")
    overrides = dict(overrides or {})
    names = {layer.name for layer in graph.layers}
    for name in overrides:
        if name not in names:
            raise GraphError(f"位宽覆盖引用了不存在的层: {name}")

    weighted = [layer.name for layer in graph.weighted_layers()]
    edges = {weighted[0], weighted[-1]} if (weighted and edge_layers_8bit) else set()
    points = set(graph.comparison_points)

    layers = []
    for layer in graph.layers:
        w_bits = FLOAT_BITS
        if layer.is_weighted and bits_weight != FLOAT_BITS:
            w_bits = max(bits_weight, EDGE_LAYER_BITS) if layer.name in edges else bits_weight
        if layer.name in overrides:
            w_bits = validate_bits(overrides[layer.name], f"层 {layer.name}")
        a_bits = FLOAT_BITS
        if layer.name in points and bits_activation != FLOAT_BITS:
            a_bits = bits_activation
            if edge_layers_8bit and layer.name == graph.output_name:
                a_bits = max(bits_activation, EDGE_LAYER_BITS)
        layers.append(replace(layer, bits_weight=w_bits, bits_activation=a_bits))
    return graph.with_layers(layers)


def fold_batchnorm(graph: NetworkGraph) -> NetworkGraph:
    """
    把 BatchNorm 折叠进前驱的卷积/全连接层

    W' = γ·W/√(σ²+ε)，b' = γ·(b−μ)/√(σ²+ε)+β；引用被删除 BN 的边与比较点改为指向前驱层。
    没有 BatchNorm 的图原样返回。
    """
    if not any(layer.kind == "batchnorm" for layer in graph.layers):
        return graph

    consumers: Dict[str, List[str]] = {}
    for layer in graph.layers:
        for source in layer.inputs:
            consumers.setdefault(source, []).append(layer.name)

    by_name = {layer.name: layer for layer in graph.layers}
    folded: Dict[str, LayerSpec] = {}
    renamed: Dict[str, str] = {}
    for layer in graph.layers:
        if layer.kind != "batchnorm":
            continue
        source = layer.inputs[0]
        source = renamed.get(source, source)
        predecessor = folded.get(source, by_name.get(source))
        if predecessor is None or not predecessor.is_weighted:
            raise GraphError(f"BatchNorm 层 {layer.name} 没有可折叠的卷积/全连接前驱")
        if consumers.get(source, []) != [layer.name]:
            raise GraphError(f"BatchNorm 层 {layer.name} 的前驱 {source} 还有其他使用者，无法折叠")

        eps = float(layer.attrs.get("eps", 0.0))
        factor = layer.params["gamma"] / np.sqrt(layer.params["var"] + eps)
        weight = predecessor.weight * factor.reshape((-1,) + (1,) * (predecessor.weight.ndim - 1))
        bias = predecessor.bias if predecessor.bias is not None else np.zeros(predecessor.out_channels)
        bias = factor * (bias - layer.params["mean"]) + layer.params["beta"]
        params = dict(predecessor.params, weight=weight, bias=bias)
        folded[predecessor.name] = replace(predecessor, params=params)
        renamed[layer.name] = predecessor.name
        logger.debug("折叠 BatchNorm %s -> %s", layer.name, predecessor.name)

    layers = []
    for layer in graph.layers:
        if layer.kind == "batchnorm":
            continue
        layer = folded.get(layer.name, layer)
        inputs = tuple(renamed.get(source, source) for source in layer.inputs)
        layers.append(replace(layer, inputs=inputs))

    points: List[str] = []
    for point in graph.comparison_points:
        point = renamed.get(point, point)
        if point not in points:
            points.append(point)
    return build_graph(graph.input_shape, layers, points)
