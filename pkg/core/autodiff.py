# -*- coding: utf-8 -*-
"""
自动微分模块
以 Wengert 列表 (Tape) 记录前向计算，支持对任意权重或激活张量的向量-雅可比积
"""

import logging
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ShapeError, TapeError

logger = logging.getLogger(__name__)

# 张量统一使用 float64 的 numpy 数组
Tensor = np.ndarray

ForwardFn = Callable[[Sequence[Tensor], Mapping[str, Any]], Tensor]
BackwardFn = Callable[[Tensor, Sequence[Tensor], Tensor, Mapping[str, Any]], List[Optional[Tensor]]]


def as_tensor(value: Any, name: str = "tensor") -> Tensor:
    """
    转换为 float64 张量并拒绝 NaN/Inf

    Args:
        value: 任意数组类数据
        name: 出错时报告的张量名

    Returns:
        连续存储的 float64 数组
    """
    array = np.ascontiguousarray(value, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ShapeError(f"张量 {name} 含有非有限值 (NaN/Inf)")
    return array


@dataclass(frozen=True)
class Primitive:
    """原语：前向与反向规则"""
    name: str
    forward: ForwardFn
    backward: BackwardFn


_PRIMITIVES: Dict[str, Primitive] = {}


def register_primitive(name: str, forward: ForwardFn, backward: BackwardFn) -> None:
    """注册一个原语，重复注册同名原语视为错误"""
    if name in _PRIMITIVES:
        raise TapeError(f"原语 {name} 已注册")
    _PRIMITIVES[name] = Primitive(name, forward, backward)


def get_primitive(name: str) -> Primitive:
    try:
        return _PRIMITIVES[name]
    except KeyError:
        raise TapeError(f"未知原语: {name}") from None


@dataclass(frozen=True)
class TapeNode:
    """一条原语记录"""
    op: str
    inputs: Tuple[str, ...]
    output: str
    attrs: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Tape:
    """
    记录完成后不可变的计算带

    values 中保存每个张量的内部值（激活带批维度），反向传播所需的中间量均从这里读取。
    squeeze_batch 为 True 时对外呈现的激活张量去掉批维度（单样本调用）。
    """
    nodes: Tuple[TapeNode, ...]
    values: Mapping[str, Tensor]
    leaves: Tuple[str, ...]
    batched: frozenset
    output_id: str
    squeeze_batch: bool = False

    def has(self, tensor_id: str) -> bool:
        return tensor_id in self.values

    def _public(self, tensor_id: str, array: Tensor) -> Tensor:
        if self.squeeze_batch and tensor_id in self.batched:
            return array[0]
        return array

    def _internal(self, tensor_id: str, array: Tensor) -> Tensor:
        if self.squeeze_batch and tensor_id in self.batched:
            return array[np.newaxis]
        return array

    def value(self, tensor_id: str) -> Tensor:
        """返回张量对外形状的值"""
        if tensor_id not in self.values:
            raise TapeError(f"张量 {tensor_id} 不在计算带上")
        return self._public(tensor_id, self.values[tensor_id])

    def shape(self, tensor_id: str) -> Tuple[int, ...]:
        return self.value(tensor_id).shape

    @property
    def output(self) -> Tensor:
        return self.value(self.output_id)

    def replay(self) -> Tensor:
        """从叶子重新执行前向，返回输出（对外形状）"""
        values: Dict[str, Tensor] = {leaf: self.values[leaf] for leaf in self.leaves}
        for node in self.nodes:
            primitive = get_primitive(node.op)
            values[node.output] = primitive.forward([values[i] for i in node.inputs], node.attrs)
        return self._public(self.output_id, values[self.output_id])


class TapeRecorder:
    """按拓扑顺序构建 Tape"""

    def __init__(self, squeeze_batch: bool = False):
        self.squeeze_batch = squeeze_batch
        self._values: Dict[str, Tensor] = {}
        self._nodes: List[TapeNode] = []
        self._leaves: List[str] = []
        self._batched: set = set()

    def leaf(self, tensor_id: str, value: Tensor, batched: bool = False) -> str:
        """
        记录一个叶子张量

        Args:
            tensor_id: 张量 id
            value: 内部值（激活需带批维度）
            batched: 是否带批维度
        """
        if tensor_id in self._values:
            raise TapeError(f"张量 id 重复: {tensor_id}")
        self._values[tensor_id] = value
        self._leaves.append(tensor_id)
        if batched:
            self._batched.add(tensor_id)
        return tensor_id

    def apply(self, op: str, inputs: Sequence[str], output_id: str, **attrs: Any) -> str:
        """执行原语前向并记录节点，输出带批维度当且仅当任一输入带批维度"""
        if output_id in self._values:
            raise TapeError(f"张量 id 重复: {output_id}")
        for tensor_id in inputs:
            if tensor_id not in self._values:
                raise TapeError(f"输入 {tensor_id} 尚未记录")
        primitive = get_primitive(op)
        result = primitive.forward([self._values[i] for i in inputs], attrs)
        self._values[output_id] = result
        self._nodes.append(TapeNode(op, tuple(inputs), output_id, MappingProxyType(dict(attrs))))
        if any(i in self._batched for i in inputs):
            self._batched.add(output_id)
        return output_id

    def value(self, tensor_id: str) -> Tensor:
        return self._values[tensor_id]

    def finish(self, output_id: str) -> Tape:
        if output_id not in self._values:
            raise TapeError(f"输出 {output_id} 不在计算带上")
        return Tape(
            nodes=tuple(self._nodes),
            values=MappingProxyType(dict(self._values)),
            leaves=tuple(self._leaves),
            batched=frozenset(self._batched),
            output_id=output_id,
            squeeze_batch=self.squeeze_batch,
        )


def backward(tape: Tape, seeds: Mapping[str, Tensor], targets: Iterable[str]) -> Dict[str, Tensor]:
    """
    多种子反向传播

    Args:
        tape: 计算带
        seeds: 张量 id -> 该张量上的伴随种子（对外形状）
        targets: 需要梯度的张量 id

    Returns:
        每个目标张量的梯度，形状与目标相同；不受种子影响的目标梯度为零
    """
    targets = list(targets)
    for tensor_id in targets:
        if not tape.has(tensor_id):
            raise TapeError(f"目标张量 {tensor_id} 不在计算带上")

    adjoints: Dict[str, Tensor] = {}
    for tensor_id, seed in seeds.items():
        if not tape.has(tensor_id):
            raise TapeError(f"种子张量 {tensor_id} 不在计算带上")
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != tape.shape(tensor_id):
            raise ShapeError(
                f"种子形状 {seed.shape} 与张量 {tensor_id} 的形状 {tape.shape(tensor_id)} 不一致"
            )
        internal = tape._internal(tensor_id, seed)
        adjoints[tensor_id] = adjoints[tensor_id] + internal if tensor_id in adjoints else internal

    for node in reversed(tape.nodes):
        grad = adjoints.get(node.output)
        if grad is None:
            continue
        primitive = get_primitive(node.op)
        input_values = [tape.values[i] for i in node.inputs]
        input_grads = primitive.backward(grad, input_values, tape.values[node.output], node.attrs)
        for tensor_id, input_grad in zip(node.inputs, input_grads):
            if input_grad is None:
                continue
            if tensor_id in adjoints:
                adjoints[tensor_id] = adjoints[tensor_id] + input_grad
            else:
                adjoints[tensor_id] = input_grad

    result = {}
    for tensor_id in targets:
        grad = adjoints.get(tensor_id)
        if grad is None:
            grad = np.zeros_like(tape.values[tensor_id])
        result[tensor_id] = tape._public(tensor_id, grad)
    return result


def vjp(tape: Tape, seed: Tensor, targets: Iterable[str]) -> Dict[str, Tensor]:
    """返回 v^T J^(target)：标量 v·output 对每个目标张量的梯度"""
    return backward(tape, {tape.output_id: seed}, targets)


# ---------------------------------------------------------------------------
# 原语
# ---------------------------------------------------------------------------

def _channel_shape(ndim: int) -> Tuple[int, ...]:
    """按通道轴 (axis 1) 广播的形状"""
    return (1, -1) + (1,) * (ndim - 2)


def _reduce_to_channel(grad: Tensor) -> Tensor:
    axes = tuple(a for a in range(grad.ndim) if a != 1)
    return grad.sum(axis=axes)


def _dense_forward(inputs, attrs):
    x, weight = inputs
    return x @ weight.T


def _dense_backward(grad, inputs, output, attrs):
    x, weight = inputs
    return [grad @ weight, grad.T @ x]


def _conv_windows(x_padded: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    windows = sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def _pad_spatial(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _scatter_windows(grad_cols: Tensor, padded_shape: Tuple[int, ...], stride: int) -> Tensor:
    """把 (N,C,Ho,Wo,kh,kw) 的窗口梯度累加回填充后的输入"""
    _, _, out_h, out_w, kh, kw = grad_cols.shape
    grad_padded = np.zeros(padded_shape)
    for i in range(kh):
        rows = slice(i, i + stride * (out_h - 1) + 1, stride)
        for j in range(kw):
            cols = slice(j, j + stride * (out_w - 1) + 1, stride)
            grad_padded[:, :, rows, cols] += grad_cols[:, :, :, :, i, j]
    return grad_padded


def _crop(grad_padded: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return grad_padded
    return grad_padded[:, :, pad:-pad, pad:-pad]


def _conv2d_forward(inputs, attrs):
    x, weight = inputs
    stride, pad = attrs["stride"], attrs["pad"]
    windows = _conv_windows(_pad_spatial(x, pad), weight.shape[2], weight.shape[3], stride)
    return np.einsum("nchwij,ocij->nohw", windows, weight, optimize=True)


def _conv2d_backward(grad, inputs, output, attrs):
    x, weight = inputs
    stride, pad = attrs["stride"], attrs["pad"]
    x_padded = _pad_spatial(x, pad)
    windows = _conv_windows(x_padded, weight.shape[2], weight.shape[3], stride)
    grad_weight = np.einsum("nchwij,nohw->ocij", windows, grad, optimize=True)
    grad_cols = np.einsum("nohw,ocij->nchwij", grad, weight, optimize=True)
    grad_x = _crop(_scatter_windows(grad_cols, x_padded.shape, stride), pad)
    return [grad_x, grad_weight]


def _bias_forward(inputs, attrs):
    x, bias = inputs
    return x + bias.reshape(_channel_shape(x.ndim))


def _bias_backward(grad, inputs, output, attrs):
    return [grad, _reduce_to_channel(grad)]


def _relu_forward(inputs, attrs):
    return np.maximum(inputs[0], 0.0)


def _relu_backward(grad, inputs, output, attrs):
    # 0 处取次梯度 0
    return [grad * (inputs[0] > 0.0)]


def _add_forward(inputs, attrs):
    return inputs[0] + inputs[1]


def _add_backward(grad, inputs, output, attrs):
    return [grad, grad]


def _concat_forward(inputs, attrs):
    return np.concatenate(inputs, axis=1)


def _concat_backward(grad, inputs, output, attrs):
    bounds = np.cumsum([x.shape[1] for x in inputs])[:-1]
    return list(np.split(grad, bounds, axis=1))


def _batchnorm_forward(inputs, attrs):
    x, gamma, beta, mean, var = inputs
    shape = _channel_shape(x.ndim)
    inv_std = 1.0 / np.sqrt(var + attrs["eps"])
    return (x - mean.reshape(shape)) * (gamma * inv_std).reshape(shape) + beta.reshape(shape)


def _batchnorm_backward(grad, inputs, output, attrs):
    x, gamma, beta, mean, var = inputs
    shape = _channel_shape(x.ndim)
    inv_std = 1.0 / np.sqrt(var + attrs["eps"])
    normalized = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    grad_x = grad * (gamma * inv_std).reshape(shape)
    return [grad_x, _reduce_to_channel(grad * normalized), _reduce_to_channel(grad), None, None]


def _softmax_forward(inputs, attrs):
    x = inputs[0]
    shifted = np.exp(x - x.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _softmax_backward(grad, inputs, output, attrs):
    return [output * (grad - np.sum(grad * output, axis=1, keepdims=True))]


def _sigmoid_forward(inputs, attrs):
    return expit(inputs[0])


def _sigmoid_backward(grad, inputs, output, attrs):
    return [grad * output * (1.0 - output)]


def _flatten_forward(inputs, attrs):
    x = inputs[0]
    return x.reshape(x.shape[0], -1)


def _flatten_backward(grad, inputs, output, attrs):
    return [grad.reshape(inputs[0].shape)]


def _avgpool_forward(inputs, attrs):
    kernel, stride = attrs["kernel"], attrs["stride"]
    return _conv_windows(inputs[0], kernel, kernel, stride).mean(axis=(-2, -1))


def _avgpool_backward(grad, inputs, output, attrs):
    kernel, stride = attrs["kernel"], attrs["stride"]
    grad_cols = np.broadcast_to(
        (grad / (kernel * kernel))[..., np.newaxis, np.newaxis], grad.shape + (kernel, kernel)
    )
    return [_scatter_windows(grad_cols, inputs[0].shape, stride)]


register_primitive("dense", _dense_forward, _dense_backward)
register_primitive("conv2d", _conv2d_forward, _conv2d_backward)
register_primitive("bias_add", _bias_forward, _bias_backward)
register_primitive("relu", _relu_forward, _relu_backward)
register_primitive("add", _add_forward, _add_backward)
register_primitive("concat", _concat_forward, _concat_backward)
register_primitive("batchnorm", _batchnorm_forward, _batchnorm_backward)
register_primitive("softmax", _softmax_forward, _softmax_backward)
register_primitive("sigmoid", _sigmoid_forward, _sigmoid_backward)
register_primitive("flatten", _flatten_forward, _flatten_backward)
register_primitive("avgpool", _avgpool_forward, _avgpool_backward)
