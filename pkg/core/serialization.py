# -*- coding: utf-8 -*-
"""
模型与数据集文件读写模块
模型：JSON 清单 (.eptq.json) + 小端 float64 权重 blob (.eptq.bin)
数据集：二进制 .eptqd 文件
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from config.settings import (
    DATASET_MAGIC,
    FLOAT_BITS,
    MODEL_BLOB_MAGIC,
    MODEL_BLOB_SUFFIX,
    MODEL_FORMAT_NAME,
    MODEL_FORMAT_VERSION,
    MODEL_MANIFEST_SUFFIX,
)
from .errors import DatasetFormatError, ModelFormatError
from .graph import Dataset, LayerSpec, NetworkGraph, build_graph
from .quantizers import ActQuantParams, GradualSchedule, QuantState, WeightQuantParams, weight_codes

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_F64 = np.dtype("<f8")
_U32 = np.dtype("<u4")
_LABEL_FLAG = 1


def blob_path_for(manifest_path: PathLike) -> Path:
    """清单路径对应的 blob 路径"""
    manifest_path = Path(manifest_path)
    name = manifest_path.name
    if name.endswith(MODEL_MANIFEST_SUFFIX):
        name = name[: -len(MODEL_MANIFEST_SUFFIX)]
    return manifest_path.with_name(name + MODEL_BLOB_SUFFIX)


def _param_order(layer: LayerSpec) -> List[str]:
    preferred = ["weight", "bias", "gamma", "beta", "mean", "var"]
    return [role for role in preferred if role in layer.params]


def _layer_entry(layer: LayerSpec) -> Dict[str, Any]:
    return {
        "name": layer.name,
        "kind": layer.kind,
        "inputs": list(layer.inputs),
        "attrs": dict(layer.attrs),
        "bits_weight": layer.bits_weight,
        "bits_activation": layer.bits_activation,
        "params": [
            {"role": role, "shape": list(layer.params[role].shape)} for role in _param_order(layer)
        ],
    }


def _write_model(manifest: Dict[str, Any], arrays: List[np.ndarray], path: PathLike) -> Path:
    path = Path(path)
    blob = blob_path_for(path)
    manifest["blob"] = blob.name
    payload = b"".join(np.ascontiguousarray(a, dtype=_F64).tobytes() for a in arrays)
    blob.write_bytes(MODEL_BLOB_MAGIC + payload)
    path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def save_model(graph: NetworkGraph, path: PathLike, extra: Optional[Mapping[str, Any]] = None) -> Path:
    """
    保存浮点模型

    Args:
        graph: 网络图
        path: 清单文件路径（.eptq.json），blob 写到同名 .eptq.bin
        extra: 附加到清单顶层的字段

    Returns:
        清单路径
    """
    manifest: Dict[str, Any] = {
        "format": MODEL_FORMAT_NAME,
        "version": MODEL_FORMAT_VERSION,
        "input_shape": list(graph.input_shape),
        "output_shape": list(graph.output_shape),
        "comparison_points": list(graph.comparison_points),
        "layers": [_layer_entry(layer) for layer in graph.layers],
    }
    manifest.update(extra or {})
    arrays = [layer.params[role] for layer in graph.layers for role in _param_order(layer)]
    return _write_model(manifest, arrays, path)


def save_quantized_model(graph: NetworkGraph, state: QuantState, path: PathLike,
                         extra: Optional[Mapping[str, Any]] = None) -> Path:
    """
    保存量化模型：带权层存整数码 + 逐通道步长，比较点存激活范围

    重新加载时直接反量化，不需要再次量化。
    """
    manifest: Dict[str, Any] = {
        "format": MODEL_FORMAT_NAME,
        "version": MODEL_FORMAT_VERSION,
        "quantized": True,
        "input_shape": list(graph.input_shape),
        "output_shape": list(graph.output_shape),
        "comparison_points": list(graph.comparison_points),
        "layers": [],
    }
    arrays: List[np.ndarray] = []
    for layer in graph.layers:
        entry = _layer_entry(layer)
        params = dict(layer.params)
        if layer.name in state.biases:
            params["bias"] = state.biases[layer.name]
        weight_params = state.weights.get(layer.name)
        if layer.is_weighted and weight_params is not None and weight_params.quantized:
            params["weight"] = weight_codes(layer.weight, weight_params)
            entry["encoding"] = "codes"
            entry["scales"] = weight_params.step.tolist()
            entry["bits_weight"] = weight_params.bits
        act_params = state.activations.get(layer.name)
        if act_params is not None and act_params.bits != FLOAT_BITS:
            entry["act_range"] = [float(act_params.lo), float(act_params.hi)]
            entry["bits_activation"] = act_params.bits
        for role in _param_order(layer):
            arrays.append(params[role])
        manifest["layers"].append(entry)
    manifest.update(extra or {})
    return _write_model(manifest, arrays, path)


def read_manifest(path: PathLike) -> Dict[str, Any]:
    """读取模型清单，解析错误带行列号"""
    path = Path(path)
    if not path.exists():
        raise ModelFormatError(f"模型文件不存在: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"模型清单解析失败 ({path}) 第 {e.lineno} 行第 {e.colno} 列: {e.msg}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != MODEL_FORMAT_NAME:
        raise ModelFormatError(f"{path} 不是 {MODEL_FORMAT_NAME} 清单")
    if manifest.get("version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"不支持的模型格式版本: {manifest.get('version')}")
    return manifest


def load_model(path: PathLike) -> NetworkGraph:
    """
    加载并校验模型；量化模型的整数码在这里反量化

    Raises:
        ModelFormatError: 文件缺失、解析失败、blob 截断
        GraphError / ShapeError: 结构或形状不一致（报告层名）
    """
    path = Path(path)
    manifest = read_manifest(path)
    blob_file = path.with_name(manifest.get("blob", blob_path_for(path).name))
    if not blob_file.exists():
        raise ModelFormatError(f"权重文件不存在: {blob_file}")
    blob = blob_file.read_bytes()
    if not blob.startswith(MODEL_BLOB_MAGIC):
        raise ModelFormatError(f"权重文件 {blob_file} 的魔数不正确")

    offset = len(MODEL_BLOB_MAGIC)
    layers = []
    try:
        for entry in manifest["layers"]:
            name = entry["name"]
            params: Dict[str, np.ndarray] = {}
            for spec in entry.get("params", []):
                shape = tuple(int(d) for d in spec["shape"])
                count = int(np.prod(shape)) if shape else 1
                nbytes = count * _F64.itemsize
                if offset + nbytes > len(blob):
                    raise ModelFormatError(
                        f"权重文件被截断：层 {name} 的参数 {spec['role']} 需要 {nbytes} 字节，"
                        f"只剩 {len(blob) - offset} 字节"
                    )
                params[spec["role"]] = np.frombuffer(blob, dtype=_F64, count=count, offset=offset) \
                    .reshape(shape).astype(np.float64)
                offset += nbytes
            if entry.get("encoding") == "codes":
                scales = np.asarray(entry["scales"], dtype=np.float64)
                weight = params["weight"]
                params["weight"] = weight * scales.reshape((-1,) + (1,) * (weight.ndim - 1))
            attrs = dict(entry.get("attrs", {}))
            if "act_range" in entry:
                attrs["act_range"] = [float(v) for v in entry["act_range"]]
            layers.append(LayerSpec(
                name=name,
                kind=entry["kind"],
                inputs=tuple(entry["inputs"]),
                params=params,
                attrs=attrs,
                bits_weight=int(entry.get("bits_weight", FLOAT_BITS)),
                bits_activation=int(entry.get("bits_activation", FLOAT_BITS)),
            ))
        if offset != len(blob):
            raise ModelFormatError(f"权重文件 {blob_file} 末尾有 {len(blob) - offset} 个多余字节")
        graph = build_graph(manifest["input_shape"], layers, manifest.get("comparison_points", []))
    except KeyError as e:
        raise ModelFormatError(f"模型清单缺少字段 {e}") from e
    if tuple(manifest.get("output_shape", graph.output_shape)) != graph.output_shape:
        raise ModelFormatError(
            f"清单声明的输出形状 {manifest['output_shape']} 与推断结果 {graph.output_shape} 不一致"
        )
    logger.debug("加载模型 %s: %d 层，%d 个带权层", path, len(graph.layers), len(graph.weighted_layers()))
    return graph


def quant_state_from_graph(graph: NetworkGraph) -> QuantState:
    """从已反量化的量化模型重建激活量化器，权重直接使用（不再量化）"""
    weights = {
        layer.name: WeightQuantParams(np.ones(layer.out_channels), FLOAT_BITS)
        for layer in graph.weighted_layers()
    }
    activations = {}
    for layer in graph.layers:
        if "act_range" in layer.attrs and layer.bits_activation != FLOAT_BITS:
            lo, hi = layer.attrs["act_range"]
            activations[layer.name] = ActQuantParams(lo, hi, layer.bits_activation)
    return QuantState(weights, activations, GradualSchedule(0, 0), gradual="none")


def is_quantized_manifest(path: PathLike) -> bool:
    return bool(read_manifest(path).get("quantized", False))


def save_dataset(dataset: Dataset, path: PathLike) -> Path:
    """写 .eptqd 数据集"""
    path = Path(path)
    count = len(dataset)
    shape = dataset.sample_shape
    flags = _LABEL_FLAG if dataset.has_labels else 0
    header = np.asarray([count, len(shape), *shape, flags], dtype=_U32).tobytes()
    body = np.ascontiguousarray(dataset.inputs, dtype=_F64).tobytes()
    labels = np.asarray(dataset.labels, dtype=_U32).tobytes() if dataset.has_labels else b""
    path.write_bytes(DATASET_MAGIC + header + body + labels)
    return path


def _read_u32(raw: bytes, offset: int, count: int, path: Path) -> Tuple[np.ndarray, int]:
    nbytes = count * _U32.itemsize
    if offset + nbytes > len(raw):
        raise DatasetFormatError(f"数据集 {path} 头部被截断")
    return np.frombuffer(raw, dtype=_U32, count=count, offset=offset), offset + nbytes


def load_dataset(path: PathLike, limit: Optional[int] = None) -> Dataset:
    """
    读取数据集的前 limit 个样本，保持顺序

    Args:
        path: .eptqd 文件路径
        limit: 最多读取的样本数，None 表示全部

    Returns:
        Dataset
    """
    path = Path(path)
    if limit is not None and limit < 1:
        raise DatasetFormatError(f"limit 必须 ≥ 1，实际 {limit}")
    if not path.exists():
        raise DatasetFormatError(f"数据集文件不存在: {path}")
    raw = path.read_bytes()
    if raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetFormatError(f"数据集 {path} 魔数不正确")

    offset = len(DATASET_MAGIC)
    (count, rank), offset = _read_u32(raw, offset, 2, path)
    dims, offset = _read_u32(raw, offset, int(rank), path)
    (flags,), offset = _read_u32(raw, offset, 1, path)
    shape = tuple(int(d) for d in dims)
    if any(d == 0 for d in shape):
        raise DatasetFormatError(f"数据集 {path} 头部声明了零长度维度 {shape}")
    per_sample = int(np.prod(shape)) if shape else 1
    count = int(count)

    has_labels = bool(flags & _LABEL_FLAG)
    expected = offset + count * per_sample * _F64.itemsize + (count * _U32.itemsize if has_labels else 0)
    if len(raw) != expected:
        raise DatasetFormatError(
            f"数据集 {path} 长度 {len(raw)} 与头部声明 ({count} 个 {shape} 样本) 需要的 {expected} 字节不符"
        )

    take = count if limit is None else min(limit, count)
    if limit is not None and limit > count:
        logger.warning("数据集 %s 只有 %d 个样本，少于请求的 %d 个", path, count, limit)
    inputs = np.frombuffer(raw, dtype=_F64, count=take * per_sample, offset=offset) \
        .reshape((take,) + shape).astype(np.float64)
    if not np.all(np.isfinite(inputs)):
        raise DatasetFormatError(f"数据集 {path} 含有非有限值")
    labels = None
    if has_labels:
        label_offset = offset + count * per_sample * _F64.itemsize
        labels = np.frombuffer(raw, dtype=_U32, count=take, offset=label_offset).astype(np.int64)
    return Dataset(inputs, labels)
