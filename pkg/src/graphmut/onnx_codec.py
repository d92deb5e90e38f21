"""ONNX-subset model import/export.

Maps the 16 IR layer kinds onto standard ONNX operators (opset 13) so models
can cross the process boundary to real inference runtimes. Only the subset
this IR can express is accepted on import; anything else raises
UnsupportedOperatorError rather than guessing.

Kind mapping highlights: Dense <-> Gemm, ReLU6 <-> Clip with [0, 6] bounds as
scalar initializers, BatchNorm <-> BatchNormalization, padding modes travel as
auto_pad SAME_UPPER/VALID. Weights travel bit-exactly via raw little-endian
float32 buffers.
"""
from __future__ import annotations

import struct

import numpy as np

from . import protowire as pw
from .ir import (
    GraphModel,
    InputSpec,
    LayerNode,
    TensorValue,
    UnsupportedOperatorError,
    infer_shapes,
    resolved_attrs,
    same_pad_amounts,
    tag_regions,
    as_pair,
)

IR_VERSION = 8
OPSET_VERSION = 13
PRODUCER = "graphmut"

_FLOAT = 1
_INT64 = 7

# AttributeProto.type values
_ATTR_FLOAT = 1
_ATTR_INT = 2
_ATTR_STRING = 3
_ATTR_INTS = 7


class OnnxParseError(Exception):
    """Raised when bytes do not decode to a supported ONNX model."""


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------


def _attr_int(name: str, value: int) -> pw.Writer:
    w = pw.Writer()
    w.string_field(1, name)
    w.varint_field(3, value)
    w.varint_field(20, _ATTR_INT)
    return w


def _attr_float(name: str, value: float) -> pw.Writer:
    w = pw.Writer()
    w.string_field(1, name)
    w.float_field(2, value)
    w.varint_field(20, _ATTR_FLOAT)
    return w


def _attr_string(name: str, value: str) -> pw.Writer:
    w = pw.Writer()
    w.string_field(1, name)
    w.bytes_field(4, value.encode("utf-8"))
    w.varint_field(20, _ATTR_STRING)
    return w


def _attr_ints(name: str, values) -> pw.Writer:
    w = pw.Writer()
    w.string_field(1, name)
    for v in values:
        w.varint_field(8, v)
    w.varint_field(20, _ATTR_INTS)
    return w


def _float_tensor(name: str, arr: np.ndarray) -> pw.Writer:
    w = pw.Writer()
    for d in arr.shape:
        w.varint_field(1, int(d))
    w.varint_field(2, _FLOAT)
    w.string_field(8, name)
    w.bytes_field(9, np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return w


def _int64_tensor(name: str, values) -> pw.Writer:
    vals = np.asarray(list(values), dtype="<i8")
    w = pw.Writer()
    w.varint_field(1, int(vals.size))
    w.varint_field(2, _INT64)
    w.string_field(8, name)
    w.bytes_field(9, vals.tobytes())
    return w


def _value_info(name: str, shape) -> pw.Writer:
    shape_w = pw.Writer()
    for d in shape:
        dim = pw.Writer()
        dim.varint_field(1, int(d))
        shape_w.message_field(1, dim)
    tensor_w = pw.Writer()
    tensor_w.varint_field(1, _FLOAT)
    tensor_w.message_field(2, shape_w)
    type_w = pw.Writer()
    type_w.message_field(1, tensor_w)
    vi = pw.Writer()
    vi.string_field(1, name)
    vi.message_field(2, type_w)
    return vi


def _node_writer(op_type: str, name: str, inputs, outputs, attrs=()) -> pw.Writer:
    w = pw.Writer()
    for src in inputs:
        w.string_field(1, src)
    for dst in outputs:
        w.string_field(2, dst)
    w.string_field(3, name)
    w.string_field(4, op_type)
    for attr in attrs:
        w.message_field(5, attr)
    return w


def export_model(model: GraphModel) -> bytes:
    """Serialize a model to ONNX bytes (opset 13)."""
    shapes = infer_shapes(model)
    graph = pw.Writer()
    initializers: list[pw.Writer] = []

    def winit(nid: str, idx: int, tv: TensorValue) -> str:
        name = f"{nid}::w{idx}"
        initializers.append(_float_tensor(name, tv.array))
        return name

    node_writers: list[pw.Writer] = []
    for nid in model.topo_order():
        node = model.nodes[nid]
        attrs = resolved_attrs(node)
        kind = node.kind
        ins = list(node.inputs)
        if kind == "Conv2D":
            kh, kw = as_pair(attrs["kernel"])
            onnx_attrs = [
                _attr_string("auto_pad", "SAME_UPPER" if attrs["padding"] == "same" else "VALID"),
                _attr_ints("kernel_shape", [kh, kw]),
                _attr_ints("strides", [attrs["stride"], attrs["stride"]]),
            ]
            names = [winit(nid, i, tv) for i, tv in enumerate(node.weights)]
            node_writers.append(_node_writer("Conv", nid, ins + names, [nid], onnx_attrs))
        elif kind == "Dense":
            names = [winit(nid, i, tv) for i, tv in enumerate(node.weights)]
            node_writers.append(_node_writer("Gemm", nid, ins + names, [nid]))
        elif kind == "ReLU":
            node_writers.append(_node_writer("Relu", nid, ins, [nid]))
        elif kind == "ReLU6":
            lo = f"{nid}::min"
            hi = f"{nid}::max"
            initializers.append(_float_tensor(lo, np.float32(0.0).reshape(())))
            initializers.append(_float_tensor(hi, np.float32(6.0).reshape(())))
            node_writers.append(_node_writer("Clip", nid, ins + [lo, hi], [nid]))
        elif kind == "Sigmoid":
            node_writers.append(_node_writer("Sigmoid", nid, ins, [nid]))
        elif kind == "Tanh":
            node_writers.append(_node_writer("Tanh", nid, ins, [nid]))
        elif kind == "Softmax":
            node_writers.append(_node_writer("Softmax", nid, ins, [nid], [_attr_int("axis", attrs["axis"])]))
        elif kind == "BatchNorm":
            names = [winit(nid, i, tv) for i, tv in enumerate(node.weights)]
            node_writers.append(
                _node_writer(
                    "BatchNormalization", nid, ins + names, [nid], [_attr_float("epsilon", attrs["epsilon"])]
                )
            )
        elif kind in ("MaxPool", "AvgPool"):
            ph, paw = as_pair(attrs["pool"])
            stride = attrs["stride"] or max(ph, paw)
            onnx_attrs = [
                _attr_string("auto_pad", "SAME_UPPER" if attrs["padding"] == "same" else "VALID"),
                _attr_ints("kernel_shape", [ph, paw]),
                _attr_ints("strides", [stride, stride]),
            ]
            op = "MaxPool" if kind == "MaxPool" else "AveragePool"
            node_writers.append(_node_writer(op, nid, ins, [nid], onnx_attrs))
        elif kind == "Flatten":
            node_writers.append(_node_writer("Flatten", nid, ins, [nid]))
        elif kind == "Reshape":
            shape_name = f"{nid}::shape"
            initializers.append(_int64_tensor(shape_name, node.attrs["shape"]))
            node_writers.append(_node_writer("Reshape", nid, ins + [shape_name], [nid]))
        elif kind == "Pad":
            pads = list(attrs["pads"])
            rank = len(pads) // 2
            onnx_pads = [pads[2 * i] for i in range(rank)] + [pads[2 * i + 1] for i in range(rank)]
            pads_name = f"{nid}::pads"
            value_name = f"{nid}::value"
            initializers.append(_int64_tensor(pads_name, onnx_pads))
            initializers.append(_float_tensor(value_name, np.float32(attrs["value"]).reshape(())))
            node_writers.append(_node_writer("Pad", nid, ins + [pads_name, value_name], [nid]))
        elif kind == "Add":
            node_writers.append(_node_writer("Add", nid, ins, [nid]))
        elif kind == "Mul":
            node_writers.append(_node_writer("Mul", nid, ins, [nid]))
        elif kind == "Concat":
            node_writers.append(_node_writer("Concat", nid, ins, [nid], [_attr_int("axis", attrs["axis"])]))
        else:
            raise UnsupportedOperatorError(f"no ONNX mapping for kind {kind}")

    for w in node_writers:
        graph.message_field(1, w)
    graph.string_field(2, "graphmut")
    for init in initializers:
        graph.message_field(5, init)
    graph.message_field(11, _value_info(model.input.name, model.input.shape))
    for out in model.outputs:
        graph.message_field(12, _value_info(out, shapes[out]))
    for nid in model.topo_order():
        if nid not in model.outputs:
            graph.message_field(13, _value_info(nid, shapes[nid]))

    opset = pw.Writer()
    opset.string_field(1, "")
    opset.varint_field(2, OPSET_VERSION)

    root = pw.Writer()
    root.varint_field(1, IR_VERSION)
    root.string_field(2, PRODUCER)
    root.string_field(3, "0.1.0")
    root.message_field(7, graph)
    root.message_field(8, opset)
    return bytes(root)


# --------------------------------------------------------------------------
# Import
# --------------------------------------------------------------------------


def _parse_tensor(raw: bytes):
    dims: list[int] = []
    dtype = None
    name = ""
    raw_data = None
    float_data: list[float] = []
    int64_data: list[int] = []
    for field, wire, value in pw.iter_fields(raw):
        if field == 1 and wire == pw.VARINT:
            dims.append(pw.to_signed64(value))
        elif field == 2 and wire == pw.VARINT:
            dtype = value
        elif field == 4:
            if wire == pw.LENGTH:  # packed floats
                float_data.extend(struct.unpack(f"<{len(value)//4}f", value))
            else:
                float_data.append(pw.read_float32(value))
        elif field == 7:
            if wire == pw.LENGTH:
                int64_data.extend(pw.to_signed64(v) for v in pw.decode_packed_varints(value))
            else:
                int64_data.append(pw.to_signed64(value))
        elif field == 8 and wire == pw.LENGTH:
            name = value.decode("utf-8")
        elif field == 9 and wire == pw.LENGTH:
            raw_data = value
    if dtype == _FLOAT:
        if raw_data is not None:
            arr = np.frombuffer(raw_data, dtype="<f4").astype(np.float32)
        else:
            arr = np.asarray(float_data, dtype=np.float32)
        return name, arr.reshape(tuple(dims))
    if dtype == _INT64:
        if raw_data is not None:
            arr = np.frombuffer(raw_data, dtype="<i8")
        else:
            arr = np.asarray(int64_data, dtype=np.int64)
        return name, arr.reshape(tuple(dims))
    raise OnnxParseError(f"initializer {name!r}: unsupported data type {dtype}")


def _parse_value_info(raw: bytes):
    name = ""
    shape: list[int] = []
    for field, wire, value in pw.iter_fields(raw):
        if field == 1 and wire == pw.LENGTH:
            name = value.decode("utf-8")
        elif field == 2 and wire == pw.LENGTH:
            for f2, w2, v2 in pw.iter_fields(value):  # TypeProto
                if f2 == 1 and w2 == pw.LENGTH:  # tensor_type
                    for f3, w3, v3 in pw.iter_fields(v2):
                        if f3 == 2 and w3 == pw.LENGTH:  # shape
                            for f4, w4, v4 in pw.iter_fields(v3):
                                if f4 == 1 and w4 == pw.LENGTH:  # dim
                                    for f5, w5, v5 in pw.iter_fields(v4):
                                        if f5 == 1 and w5 == pw.VARINT:
                                            shape.append(pw.to_signed64(v5))
    return name, tuple(shape)


def _parse_attribute(raw: bytes):
    name = ""
    out = {"f": None, "i": None, "s": None, "ints": []}
    for field, wire, value in pw.iter_fields(raw):
        if field == 1 and wire == pw.LENGTH:
            name = value.decode("utf-8")
        elif field == 2 and wire == pw.FIXED32:
            out["f"] = pw.read_float32(value)
        elif field == 3 and wire == pw.VARINT:
            out["i"] = pw.to_signed64(value)
        elif field == 4 and wire == pw.LENGTH:
            out["s"] = value.decode("utf-8")
        elif field == 8:
            if wire == pw.VARINT:
                out["ints"].append(pw.to_signed64(value))
            elif wire == pw.LENGTH:
                out["ints"].extend(pw.to_signed64(v) for v in pw.decode_packed_varints(value))
    return name, out


def _parse_node(raw: bytes):
    inputs: list[str] = []
    outputs: list[str] = []
    name = ""
    op_type = ""
    attrs: dict[str, dict] = {}
    for field, wire, value in pw.iter_fields(raw):
        if field == 1 and wire == pw.LENGTH:
            inputs.append(value.decode("utf-8"))
        elif field == 2 and wire == pw.LENGTH:
            outputs.append(value.decode("utf-8"))
        elif field == 3 and wire == pw.LENGTH:
            name = value.decode("utf-8")
        elif field == 4 and wire == pw.LENGTH:
            op_type = value.decode("utf-8")
        elif field == 5 and wire == pw.LENGTH:
            aname, aval = _parse_attribute(value)
            attrs[aname] = aval
    return {"inputs": inputs, "outputs": outputs, "name": name, "op_type": op_type, "attrs": attrs}


def _square_stride(attrs: dict, default: int = 1) -> int:
    strides = attrs.get("strides", {}).get("ints") if "strides" in attrs else None
    if not strides:
        return default
    if len(set(strides)) != 1:
        raise UnsupportedOperatorError(f"non-square strides {strides} not representable")
    return int(strides[0])


def _padding_mode(attrs: dict, explicit_pads_ok_zero: bool = True) -> str:
    auto = attrs.get("auto_pad", {}).get("s") if "auto_pad" in attrs else None
    if auto in ("SAME_UPPER", "SAME_LOWER"):
        return "same"
    if auto == "VALID":
        return "valid"
    pads = attrs.get("pads", {}).get("ints") if "pads" in attrs else None
    if not pads or all(p == 0 for p in pads):
        return "valid"
    raise UnsupportedOperatorError(f"explicit pads {pads} not representable; use auto_pad")


def import_model(raw: bytes) -> GraphModel:
    """Parse ONNX bytes into a model; unsupported constructs raise."""
    graph_raw = None
    try:
        for field, wire, value in pw.iter_fields(raw):
            if field == 7 and wire == pw.LENGTH:
                graph_raw = value
    except pw.WireError as exc:
        raise OnnxParseError(f"malformed protobuf: {exc}") from exc
    if graph_raw is None:
        raise OnnxParseError("no graph in model bytes")

    raw_nodes = []
    initializers: dict[str, np.ndarray] = {}
    graph_inputs: list[tuple[str, tuple[int, ...]]] = []
    graph_outputs: list[str] = []
    try:
        for field, wire, value in pw.iter_fields(graph_raw):
            if field == 1 and wire == pw.LENGTH:
                raw_nodes.append(_parse_node(value))
            elif field == 5 and wire == pw.LENGTH:
                name, arr = _parse_tensor(value)
                initializers[name] = arr
            elif field == 11 and wire == pw.LENGTH:
                graph_inputs.append(_parse_value_info(value))
            elif field == 12 and wire == pw.LENGTH:
                graph_outputs.append(_parse_value_info(value)[0])
    except pw.WireError as exc:
        raise OnnxParseError(f"malformed graph: {exc}") from exc

    real_inputs = [(n, s) for n, s in graph_inputs if n not in initializers]
    if len(real_inputs) != 1:
        raise OnnxParseError(f"expected exactly one graph input, got {[n for n, _ in real_inputs]}")
    input_name, input_shape = real_inputs[0]
    if not input_shape or any(d < 1 for d in input_shape):
        raise OnnxParseError(f"graph input {input_name!r} lacks a static positive shape")

    def tensor_value(name: str) -> TensorValue:
        if name not in initializers:
            raise OnnxParseError(f"missing initializer {name!r}")
        arr = initializers[name]
        if arr.dtype != np.float32:
            raise OnnxParseError(f"initializer {name!r} is not float32")
        return TensorValue.from_array(arr)

    def int_list(name: str) -> list[int]:
        if name not in initializers:
            raise OnnxParseError(f"missing initializer {name!r}")
        arr = initializers[name]
        if arr.dtype != np.int64:
            raise OnnxParseError(f"initializer {name!r} is not int64")
        return [int(v) for v in arr.ravel()]

    nodes: dict[str, LayerNode] = {}
    for rn in raw_nodes:
        op = rn["op_type"]
        if not rn["outputs"]:
            raise OnnxParseError(f"node {rn['name']!r} has no outputs")
        nid = rn["outputs"][0]
        attrs = rn["attrs"]
        data_ins = [s for s in rn["inputs"] if s not in initializers]
        init_ins = [s for s in rn["inputs"] if s in initializers]

        if op == "Conv":
            kernel = attrs.get("kernel_shape", {}).get("ints")
            if not kernel:
                w_arr = initializers.get(init_ins[0]) if init_ins else None
                if w_arr is None:
                    raise OnnxParseError(f"Conv {nid}: no kernel_shape and no weight initializer")
                kernel = list(w_arr.shape[2:])
            if len(init_ins) != 2:
                raise UnsupportedOperatorError(f"Conv {nid}: expected weight+bias initializers")
            w = tensor_value(init_ins[0])
            node = LayerNode(
                id=nid,
                kind="Conv2D",
                inputs=data_ins,
                attrs={
                    "filters": int(w.shape[0]),
                    "kernel": [int(kernel[0]), int(kernel[1])],
                    "stride": _square_stride(attrs),
                    "padding": _padding_mode(attrs),
                },
                weights=[w, tensor_value(init_ins[1])],
            )
        elif op == "Gemm":
            alpha = attrs.get("alpha", {}).get("f")
            beta = attrs.get("beta", {}).get("f")
            if alpha not in (None, 1.0) or beta not in (None, 1.0):
                raise UnsupportedOperatorError(f"Gemm {nid}: alpha/beta must be 1")
            if attrs.get("transA", {}).get("i") not in (None, 0):
                raise UnsupportedOperatorError(f"Gemm {nid}: transA unsupported")
            if len(init_ins) != 2:
                raise UnsupportedOperatorError(f"Gemm {nid}: expected weight+bias initializers")
            w = tensor_value(init_ins[0])
            if attrs.get("transB", {}).get("i") == 1:
                w = TensorValue.from_array(w.array.T)
            node = LayerNode(
                id=nid, kind="Dense", inputs=data_ins, attrs={"units": int(w.shape[1])},
                weights=[w, tensor_value(init_ins[1])],
            )
        elif op == "Relu":
            node = LayerNode(id=nid, kind="ReLU", inputs=data_ins)
        elif op == "Clip":
            lo = attrs.get("min", {}).get("f")
            hi = attrs.get("max", {}).get("f")
            if lo is None and len(init_ins) >= 1:
                lo = float(initializers[init_ins[0]].ravel()[0])
            if hi is None and len(init_ins) >= 2:
                hi = float(initializers[init_ins[1]].ravel()[0])
            if lo != 0.0 or hi != 6.0:
                raise UnsupportedOperatorError(f"Clip {nid}: only [0, 6] clips are representable, got [{lo}, {hi}]")
            node = LayerNode(id=nid, kind="ReLU6", inputs=data_ins)
        elif op == "Sigmoid":
            node = LayerNode(id=nid, kind="Sigmoid", inputs=data_ins)
        elif op == "Tanh":
            node = LayerNode(id=nid, kind="Tanh", inputs=data_ins)
        elif op == "Softmax":
            axis = attrs.get("axis", {}).get("i")
            node = LayerNode(id=nid, kind="Softmax", inputs=data_ins, attrs={"axis": -1 if axis is None else int(axis)})
        elif op == "BatchNormalization":
            if len(init_ins) != 4:
                raise UnsupportedOperatorError(f"BatchNormalization {nid}: expected 4 initializers")
            eps = attrs.get("epsilon", {}).get("f")
            node = LayerNode(
                id=nid,
                kind="BatchNorm",
                inputs=data_ins,
                attrs={"epsilon": 1e-5 if eps is None else float(eps)},
                weights=[tensor_value(s) for s in init_ins],
            )
        elif op in ("MaxPool", "AveragePool"):
            kernel = attrs.get("kernel_shape", {}).get("ints")
            if not kernel:
                raise OnnxParseError(f"{op} {nid}: kernel_shape required")
            node = LayerNode(
                id=nid,
                kind="MaxPool" if op == "MaxPool" else "AvgPool",
                inputs=data_ins,
                attrs={
                    "pool": [int(kernel[0]), int(kernel[1])],
                    "stride": _square_stride(attrs, default=int(max(kernel))),
                    "padding": _padding_mode(attrs),
                },
            )
        elif op == "Flatten":
            axis = attrs.get("axis", {}).get("i")
            if axis not in (None, 1):
                raise UnsupportedOperatorError(f"Flatten {nid}: only axis=1 is representable")
            node = LayerNode(id=nid, kind="Flatten", inputs=data_ins)
        elif op == "Reshape":
            if len(init_ins) != 1:
                raise UnsupportedOperatorError(f"Reshape {nid}: target shape must be an initializer")
            target = int_list(init_ins[0])
            if any(d < 1 for d in target):
                raise UnsupportedOperatorError(f"Reshape {nid}: only explicit positive dims, got {target}")
            node = LayerNode(id=nid, kind="Reshape", inputs=data_ins, attrs={"shape": target})
        elif op == "Pad":
            mode = attrs.get("mode", {}).get("s")
            if mode not in (None, "constant"):
                raise UnsupportedOperatorError(f"Pad {nid}: mode {mode!r} unsupported")
            if not init_ins:
                raise UnsupportedOperatorError(f"Pad {nid}: pads must be an initializer")
            onnx_pads = int_list(init_ins[0])
            rank = len(onnx_pads) // 2
            pads = []
            for i in range(rank):
                pads += [onnx_pads[i], onnx_pads[rank + i]]
            value = 0.0
            if len(init_ins) >= 2:
                value = float(initializers[init_ins[1]].ravel()[0])
            node = LayerNode(id=nid, kind="Pad", inputs=data_ins, attrs={"pads": pads, "value": value})
        elif op == "Add":
            node = LayerNode(id=nid, kind="Add", inputs=data_ins)
        elif op == "Mul":
            node = LayerNode(id=nid, kind="Mul", inputs=data_ins)
        elif op == "Concat":
            axis = attrs.get("axis", {}).get("i")
            node = LayerNode(id=nid, kind="Concat", inputs=data_ins, attrs={"axis": 1 if axis is None else int(axis)})
        else:
            raise UnsupportedOperatorError(f"ONNX op {op!r} is outside the supported subset")
        nodes[node.id] = node

    if not graph_outputs:
        raise OnnxParseError("graph declares no outputs")
    model = GraphModel(
        input=InputSpec(name=input_name, shape=tuple(int(d) for d in input_shape)),
        nodes=nodes,
        outputs=[o for o in graph_outputs],
    )
    return tag_regions(model)
