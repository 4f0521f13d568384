# -*- coding: utf-8 -*-
"""
网络执行模块
在计算带上记录浮点或量化网络的前向计算，并提供有限差分雅可比矩阵
"""

import logging
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from config.settings import FINITE_DIFF_MAX_ELEMENTS, FINITE_DIFF_STEP
from .autodiff import Tape, TapeRecorder, Tensor, as_tensor
from .errors import QuantizationError, ShapeError, TapeError
from .graph import INPUT_NAME, LayerSpec, NetworkGraph
from .quantizers import QuantState, quantize_weights_nearest

logger = logging.getLogger(__name__)


def layer_id(name: str) -> str:
    return f"layer:{name}"


def weight_id(name: str) -> str:
    return f"weight:{name}"


def qweight_id(name: str) -> str:
    return f"qweight:{name}"


def bias_id(name: str) -> str:
    return f"bias:{name}"


def rounding_id(name: str) -> str:
    return f"round:{name}"


def log_scale_id(name: str) -> str:
    return f"logscale:{name}"


def _check_coverage(graph: NetworkGraph, quant: QuantState) -> None:
    for layer in graph.weighted_layers():
        if layer.bits_weight < 32 and layer.name not in quant.weights:
            raise QuantizationError(f"量化状态缺少带权层 {layer.name} 的权重参数")
    for point in graph.comparison_points:
        if graph.layer(point).bits_activation < 32 and point not in quant.activations:
            raise QuantizationError(f"量化状态缺少比较点 {point} 的激活参数")


class _LayerEmitter:
    """把一层的若干原语依次记录到计算带，最后一步命名为 layer:<name>"""

    def __init__(self, recorder: TapeRecorder, name: str):
        self.recorder = recorder
        self.name = name
        self.steps: List[Tuple[str, List[str], dict]] = []

    def add(self, op: str, inputs: List[Optional[str]], **attrs) -> None:
        # None 表示上一步的输出
        self.steps.append((op, inputs, attrs))

    def emit(self) -> str:
        previous = None
        for index, (op, inputs, attrs) in enumerate(self.steps):
            resolved = [previous if source is None else source for source in inputs]
            last = index == len(self.steps) - 1
            output = layer_id(self.name) if last else f"{self.name}#{index}"
            previous = self.recorder.apply(op, resolved, output, **attrs)
        return previous


def _perturbed(value: Tensor, tensor: str, perturb: Mapping[str, Tensor]) -> Tensor:
    if tensor in perturb:
        return value + perturb[tensor]
    return value


def _weight_leaf(recorder: TapeRecorder, layer: LayerSpec, quant: Optional[QuantState],
                 perturb: Mapping[str, Tensor]) -> str:
    params = quant.weights.get(layer.name) if quant is not None else None
    if params is None or not params.quantized:
        return recorder.leaf(weight_id(layer.name), _perturbed(layer.weight, weight_id(layer.name), perturb))
    if params.rounding is None:
        return recorder.leaf(qweight_id(layer.name), quantize_weights_nearest(layer.weight, params))
    recorder.leaf(rounding_id(layer.name), params.rounding)
    recorder.leaf(log_scale_id(layer.name), params.log_scale)
    return recorder.apply(
        "soft_round_weight",
        [rounding_id(layer.name), log_scale_id(layer.name)],
        qweight_id(layer.name),
        weight=layer.weight,
        thresholds=params.thresholds,
        bits=params.bits,
        hard=not quant.soft,
    )


def activation_mask(quant: QuantState, layer_index: int, shape: Tuple[int, ...], mix: float):
    """随机丢弃对照组：按 Bernoulli(P) 保留浮点激活，种子由 (mask_seed, iteration, 层序号) 决定"""
    if quant.gradual != "stochastic" or quant.iteration is None:
        return None
    rng = np.random.default_rng([quant.mask_seed, quant.iteration, layer_index])
    return (rng.random(shape) < mix).astype(np.float64)


def forward_record(graph: NetworkGraph, input: Tensor, quant: Optional[QuantState] = None,
                   perturb: Optional[Mapping[str, Tensor]] = None
                   ) -> Tuple[Tape, Dict[str, Tensor], Tensor]:
    """
    记录网络前向

    Args:
        graph: 网络图
        input: 单个样本（形状等于图输入形状）或批量 (N, *input_shape)
        quant: 量化状态，None 时为浮点网络
        perturb: 张量 id -> 加性扰动（有限差分用）

    Returns:
        (计算带, 比较点激活, 网络输出)；单样本调用时均不含批维度
    """
    perturb = {k: np.array(v, dtype=np.float64) for k, v in (perturb or {}).items()}
    x = as_tensor(input, INPUT_NAME)
    squeeze = x.shape == graph.input_shape
    if squeeze:
        x = x[np.newaxis]
    elif x.shape[1:] != graph.input_shape:
        raise ShapeError(f"输入形状 {x.shape} 与网络输入 {graph.input_shape} 不匹配")
    if quant is not None:
        _check_coverage(graph, quant)
    if squeeze:
        perturb = {k: (v[np.newaxis] if k == INPUT_NAME or k.startswith("layer:") else v)
                   for k, v in perturb.items()}

    recorder = TapeRecorder(squeeze_batch=squeeze)
    recorder.leaf(INPUT_NAME, _perturbed(x, INPUT_NAME, perturb), batched=True)
    current: Dict[str, str] = {INPUT_NAME: INPUT_NAME}

    for index, layer in enumerate(graph.layers):
        emitter = _LayerEmitter(recorder, layer.name)
        inputs = [current[source] for source in layer.inputs]
        kind = layer.kind

        if layer.is_weighted:
            weight = _weight_leaf(recorder, layer, quant, perturb)
            if kind == "dense":
                emitter.add("dense", [inputs[0], weight])
            else:
                emitter.add("conv2d", [inputs[0], weight],
                            stride=int(layer.attrs.get("stride", 1)), pad=int(layer.attrs.get("pad", 0)))
            bias = quant.biases.get(layer.name) if quant is not None else None
            if bias is None:
                bias = layer.bias
            if bias is not None:
                recorder.leaf(bias_id(layer.name), _perturbed(bias, bias_id(layer.name), perturb))
                emitter.add("bias_add", [None, bias_id(layer.name)])
        elif kind == "batchnorm":
            roles = ("gamma", "beta", "mean", "var")
            ids = [recorder.leaf(f"bn:{layer.name}:{role}", layer.params[role]) for role in roles]
            emitter.add("batchnorm", [inputs[0]] + ids, eps=float(layer.attrs.get("eps", 0.0)))
        elif kind in ("relu", "softmax", "sigmoid", "flatten"):
            emitter.add(kind, inputs)
        elif kind in ("add", "concat"):
            emitter.add(kind, inputs)
        elif kind == "avgpool":
            kernel = int(layer.attrs.get("kernel", 2))
            emitter.add("avgpool", inputs, kernel=kernel, stride=int(layer.attrs.get("stride", kernel)))
        else:
            raise ShapeError(f"未知层类型: {kind} (层 {layer.name})")

        if quant is not None and layer.name in quant.activations and layer.bits_activation < 32:
            mix = quant.activation_mix(layer.name)
            shape = (x.shape[0],) + graph.shapes[layer.name]
            emitter.add("act_quant", [None], params=quant.activations[layer.name], mix=mix,
                        mask=activation_mask(quant, index, shape, mix))

        if layer_id(layer.name) in perturb:
            recorder.leaf(f"perturb:{layer.name}", perturb[layer_id(layer.name)])
            emitter.add("add", [None, f"perturb:{layer.name}"])

        current[layer.name] = emitter.emit()

    tape = recorder.finish(current[graph.output_name])
    activations = {point: tape.value(layer_id(point)) for point in graph.comparison_points}
    return tape, activations, tape.output


def forward(graph: NetworkGraph, input: Tensor, quant: Optional[QuantState] = None,
            perturb: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """只求网络输出"""
    return forward_record(graph, input, quant, perturb)[2]


def comparison_activations(graph: NetworkGraph, inputs: Tensor,
                           quant: Optional[QuantState] = None) -> Dict[str, Tensor]:
    """批量计算比较点激活（带批维度）"""
    batch = np.asarray(inputs, dtype=np.float64)
    if batch.shape == graph.input_shape:
        batch = batch[np.newaxis]
    _, activations, _ = forward_record(graph, batch, quant)
    return activations


def finite_diff_jacobian(graph: NetworkGraph, input: Tensor, target: str,
                         step: float = FINITE_DIFF_STEP) -> np.ndarray:
    """
    中心差分雅可比矩阵（测试用的暴力基准）

    Args:
        graph: 网络图
        input: 单个样本
        target: 张量 id（input / weight:<层> / bias:<层> / layer:<层>）
        step: 差分步长

    Returns:
        (输出元素数, 目标元素数) 的矩阵，第 i 行为 ∂f_i/∂target
    """
    if np.shape(input) != graph.input_shape:
        raise ShapeError("有限差分只接受单个样本")
    tape, _, output = forward_record(graph, input)
    if not tape.has(target):
        raise TapeError(f"目标张量 {target} 不在计算带上")
    base = tape.value(target)
    if base.size > FINITE_DIFF_MAX_ELEMENTS:
        raise ShapeError(f"目标 {target} 有 {base.size} 个元素，超过有限差分上限 {FINITE_DIFF_MAX_ELEMENTS}")

    jacobian = np.zeros((output.size, base.size))
    delta = np.zeros(base.size)
    for j in range(base.size):
        delta[j] = step
        plus = forward(graph, input, perturb={target: delta.reshape(base.shape)})
        delta[j] = -step
        minus = forward(graph, input, perturb={target: delta.reshape(base.shape)})
        delta[j] = 0.0
        if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
            raise TapeError(f"扰动 {target}[{j}] 后前向出现非有限值")
        jacobian[:, j] = (plus - minus).ravel() / (2.0 * step)
    return jacobian
