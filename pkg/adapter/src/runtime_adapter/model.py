"""Decode ONNX-subset model bytes into an executable graph description.

The decoder is deliberately strict: anything it cannot prove it
understands — unknown operators, unexpected tensor dtypes, structurally
bent messages, dangling value names — raises :class:`ModelParseError`.
The server turns that into a crash reply whose signature is this
exception's class name, which is far more useful to the caller than a
silently wrong execution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .wire import FIXED32, LENGTH, VARINT, WireError, iter_fields, to_signed64, unpack_varints

__all__ = ["ModelGraph", "ModelParseError", "Node", "parse_model"]

# TensorProto.DataType values this runner accepts.
_DTYPE_FLOAT32 = 1
_DTYPE_INT64 = 7

# AttributeProto.AttributeType values.
_ATTR_FLOAT = 1
_ATTR_INT = 2
_ATTR_STRING = 3
_ATTR_INTS = 7

SUPPORTED_OPS = frozenset({
    "Add",
    "AveragePool",
    "BatchNormalization",
    "Clip",
    "Concat",
    "Conv",
    "Flatten",
    "Gemm",
    "MaxPool",
    "Mul",
    "Pad",
    "Relu",
    "Reshape",
    "Sigmoid",
    "Softmax",
    "Tanh",
})


class ModelParseError(Exception):
    """The byte stream is not a model this runner can execute."""


@dataclass(frozen=True)
class Node:
    """One operator invocation: named inputs to named outputs."""

    name: str
    op_type: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: dict[str, object] = field(default_factory=dict)


@dataclass
class ModelGraph:
    """A validated graph: nodes in execution order plus its constants."""

    name: str
    nodes: list[Node]
    initializers: dict[str, np.ndarray]
    input_name: str
    input_shape: tuple[int, ...] | None
    output_names: list[str]


def parse_model(blob: bytes) -> ModelGraph:
    """Decode and validate ``blob``; raise :class:`ModelParseError` if unfit."""
    try:
        return _parse_model(blob)
    except ModelParseError:
        raise
    except (WireError, struct.error, UnicodeDecodeError, ValueError, OverflowError) as exc:
        raise ModelParseError(str(exc)) from exc


def _utf8(value: bytes) -> str:
    return value.decode("utf-8")


def _parse_model(blob: bytes) -> ModelGraph:
    graph_blob = None
    for number, wtype, value in iter_fields(blob):
        if number == 7 and wtype == LENGTH:
            graph_blob = value
    if graph_blob is None:
        raise ModelParseError("model carries no graph")
    return _parse_graph(graph_blob)


def _parse_graph(blob: bytes) -> ModelGraph:
    name = ""
    nodes: list[Node] = []
    initializers: dict[str, np.ndarray] = {}
    declared_inputs: list[tuple[str, tuple[int, ...] | None]] = []
    output_names: list[str] = []
    for number, wtype, value in iter_fields(blob):
        if wtype != LENGTH:
            continue
        if number == 1:
            nodes.append(_parse_node(value))
        elif number == 2:
            name = _utf8(value)
        elif number == 5:
            tensor_name, array = _parse_tensor(value)
            initializers[tensor_name] = array
        elif number == 11:
            declared_inputs.append(_parse_value_info(value))
        elif number == 12:
            output_names.append(_parse_value_info(value)[0])
        # field 13 (intermediate value declarations) carries only shape
        # hints; execution does not need them.
    graph = ModelGraph(
        name=name,
        nodes=nodes,
        initializers=initializers,
        input_name="",
        input_shape=None,
        output_names=output_names,
    )
    _validate(graph, declared_inputs)
    return graph


def _validate(graph: ModelGraph,
              declared_inputs: list[tuple[str, tuple[int, ...] | None]]) -> None:
    if not graph.nodes:
        raise ModelParseError("graph has no nodes")
    if not graph.output_names:
        raise ModelParseError("graph declares no outputs")

    real_inputs = [(n, s) for n, s in declared_inputs if n not in graph.initializers]
    if len(real_inputs) != 1:
        raise ModelParseError(
            f"expected exactly one non-constant graph input, found {len(real_inputs)}")
    graph.input_name, graph.input_shape = real_inputs[0]
    if not graph.input_name:
        raise ModelParseError("graph input has no name")

    available = set(graph.initializers)
    available.add(graph.input_name)
    for node in graph.nodes:
        label = node.name or node.op_type
        if node.op_type not in SUPPORTED_OPS:
            raise ModelParseError(f"unsupported operator {node.op_type!r} at node {label!r}")
        if not node.outputs:
            raise ModelParseError(f"node {label!r} declares no outputs")
        for value_name in node.inputs:
            if not value_name:
                raise ModelParseError(f"node {label!r} has an empty input name")
            if value_name not in available:
                raise ModelParseError(
                    f"node {label!r} consumes {value_name!r} before it is produced")
        for out in node.outputs:
            if not out:
                raise ModelParseError(f"node {label!r} has an empty output name")
            if out in available:
                raise ModelParseError(f"value {out!r} is produced twice")
            available.add(out)
    for out in graph.output_names:
        if out not in available:
            raise ModelParseError(f"declared output {out!r} is never produced")


def _parse_node(blob: bytes) -> Node:
    inputs: list[str] = []
    outputs: list[str] = []
    name = ""
    op_type = ""
    attrs: dict[str, object] = {}
    for number, wtype, value in iter_fields(blob):
        if wtype != LENGTH:
            continue
        if number == 1:
            inputs.append(_utf8(value))
        elif number == 2:
            outputs.append(_utf8(value))
        elif number == 3:
            name = _utf8(value)
        elif number == 4:
            op_type = _utf8(value)
        elif number == 5:
            attr_name, attr_value = _parse_attr(value)
            attrs[attr_name] = attr_value
    if not op_type:
        raise ModelParseError(f"node {name!r} has no operator type")
    return Node(name=name, op_type=op_type, inputs=tuple(inputs),
                outputs=tuple(outputs), attrs=attrs)


def _parse_attr(blob: bytes) -> tuple[str, object]:
    name = ""
    attr_type = None
    f_value = None
    i_value = None
    s_value = None
    ints: list[int] = []
    for number, wtype, value in iter_fields(blob):
        if number == 1 and wtype == LENGTH:
            name = _utf8(value)
        elif number == 2 and wtype == FIXED32:
            f_value = struct.unpack("<f", value)[0]
        elif number == 3 and wtype == VARINT:
            i_value = to_signed64(value)
        elif number == 4 and wtype == LENGTH:
            s_value = _utf8(value)
        elif number == 8:
            if wtype == VARINT:
                ints.append(to_signed64(value))
            elif wtype == LENGTH:
                ints.extend(to_signed64(v) for v in unpack_varints(value))
        elif number == 20 and wtype == VARINT:
            attr_type = value
    if not name:
        raise ModelParseError("attribute has no name")
    if attr_type == _ATTR_FLOAT or (attr_type is None and f_value is not None):
        if f_value is None:
            raise ModelParseError(f"float attribute {name!r} carries no value")
        return name, float(f_value)
    if attr_type == _ATTR_INT or (attr_type is None and i_value is not None):
        if i_value is None:
            raise ModelParseError(f"int attribute {name!r} carries no value")
        return name, int(i_value)
    if attr_type == _ATTR_STRING or (attr_type is None and s_value is not None):
        if s_value is None:
            raise ModelParseError(f"string attribute {name!r} carries no value")
        return name, s_value
    if attr_type == _ATTR_INTS or (attr_type is None and ints):
        return name, tuple(ints)
    raise ModelParseError(f"attribute {name!r} has an unsupported type {attr_type!r}")


def _parse_tensor(blob: bytes) -> tuple[str, np.ndarray]:
    dims: list[int] = []
    dtype = None
    name = ""
    raw: bytes | None = None
    floats: list[float] = []
    int64s: list[int] = []
    for number, wtype, value in iter_fields(blob):
        if number == 1:
            if wtype == VARINT:
                dims.append(value)
            elif wtype == LENGTH:
                dims.extend(unpack_varints(value))
        elif number == 2 and wtype == VARINT:
            dtype = value
        elif number == 4:
            if wtype == FIXED32:
                floats.append(struct.unpack("<f", value)[0])
            elif wtype == LENGTH:
                if len(value) % 4:
                    raise ModelParseError("packed float data is not a multiple of 4 bytes")
                floats.extend(struct.unpack(f"<{len(value) // 4}f", value))
        elif number == 7:
            if wtype == VARINT:
                int64s.append(to_signed64(value))
            elif wtype == LENGTH:
                int64s.extend(to_signed64(v) for v in unpack_varints(value))
        elif number == 8 and wtype == LENGTH:
            name = _utf8(value)
        elif number == 9 and wtype == LENGTH:
            raw = value
    if not name:
        raise ModelParseError("initializer has no name")
    if dtype == _DTYPE_FLOAT32:
        if raw is not None:
            if len(raw) % 4:
                raise ModelParseError(f"initializer {name!r} raw data is not float32-aligned")
            array = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        else:
            array = np.asarray(floats, dtype=np.float32)
    elif dtype == _DTYPE_INT64:
        if raw is not None:
            if len(raw) % 8:
                raise ModelParseError(f"initializer {name!r} raw data is not int64-aligned")
            array = np.frombuffer(raw, dtype="<i8").astype(np.int64)
        else:
            array = np.asarray(int64s, dtype=np.int64)
    else:
        raise ModelParseError(f"initializer {name!r} has unsupported dtype {dtype!r}")
    expected = 1
    for d in dims:
        if d < 0:
            raise ModelParseError(f"initializer {name!r} has a negative dimension")
        expected *= d
    if array.size != expected:
        raise ModelParseError(
            f"initializer {name!r} holds {array.size} values but its shape needs {expected}")
    return name, array.reshape(tuple(dims))


def _parse_value_info(blob: bytes) -> tuple[str, tuple[int, ...] | None]:
    name = ""
    shape: tuple[int, ...] | None = None
    for number, wtype, value in iter_fields(blob):
        if wtype != LENGTH:
            continue
        if number == 1:
            name = _utf8(value)
        elif number == 2:
            shape = _parse_type_shape(value)
    if not name:
        raise ModelParseError("value declaration has no name")
    return name, shape


def _parse_type_shape(blob: bytes) -> tuple[int, ...] | None:
    for number, wtype, value in iter_fields(blob):
        if number == 1 and wtype == LENGTH:  # TypeProto.tensor_type
            for t_number, t_wtype, t_value in iter_fields(value):
                if t_number == 2 and t_wtype == LENGTH:  # TensorTypeProto.shape
                    dims = []
                    for s_number, s_wtype, s_value in iter_fields(t_value):
                        if s_number == 1 and s_wtype == LENGTH:  # dim
                            for d_number, d_wtype, d_value in iter_fields(s_value):
                                if d_number == 1 and d_wtype == VARINT:
                                    dims.append(d_value)
                    return tuple(dims)
    return None
