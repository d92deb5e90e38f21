"""Run a decoded graph on torch, one node at a time.

Interpreting node by node (instead of compiling the whole graph) is what
makes per-layer capture free: every node's output tensor is in hand the
moment it is produced.  Numeric conventions worth noting:

* Conv and Gemm accumulate in float64 and round to float32 once, so the
  reported tensors do not depend on torch's summation order.
* "SAME_UPPER" padding puts the odd unit of an asymmetric total at the
  trailing edge, and max pooling pads with ``-inf`` so padding can never
  win a window.
* Average pooling divides each window by the number of *real* cells in
  it; zero-padding never dilutes an edge window.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .model import ModelGraph, Node

__all__ = ["ModelExecError", "any_nonfinite", "execute", "select_outputs"]


class ModelExecError(RuntimeError):
    """The graph decoded cleanly but cannot be run as requested."""


def _attr_ints(node: Node, name: str, default: tuple[int, ...] | None = None) -> tuple[int, ...]:
    value = node.attrs.get(name, default)
    if value is None:
        raise ModelExecError(f"{node.op_type} node {node.name!r} lacks attribute {name!r}")
    if isinstance(value, int):
        return (value,)
    return tuple(int(v) for v in value)


def _same_split(size: int, window: int, stride: int) -> tuple[int, int]:
    """(begin, end) padding for ceil(size/stride) outputs, extra at the end."""
    out = -(-size // stride)
    total = max(0, (out - 1) * stride + window - size)
    begin = total // 2
    return begin, total - begin


def _spatial_pads(node: Node, spatial: tuple[int, ...], window: tuple[int, ...],
                  strides: tuple[int, ...]) -> list[tuple[int, int]]:
    """Per-spatial-axis (begin, end) padding for conv/pool nodes."""
    auto_pad = node.attrs.get("auto_pad", "NOTSET")
    if auto_pad in ("SAME_UPPER", "SAME_LOWER"):
        pads = []
        for size, win, stride in zip(spatial, window, strides):
            begin, end = _same_split(size, win, stride)
            if auto_pad == "SAME_LOWER":
                begin, end = end, begin
            pads.append((begin, end))
        return pads
    if auto_pad in ("NOTSET", "", "VALID"):
        if auto_pad == "VALID":
            return [(0, 0)] * len(spatial)
        rank = len(spatial)
        flat = _attr_ints(node, "pads", default=(0,) * (2 * rank))
        if len(flat) != 2 * rank:
            raise ModelExecError(
                f"{node.op_type} node {node.name!r} has {len(flat)} pad values for rank {rank}")
        return [(flat[i], flat[rank + i]) for i in range(rank)]
    raise ModelExecError(f"{node.op_type} node {node.name!r} has unsupported auto_pad {auto_pad!r}")


def _pad_spatial(x: torch.Tensor, pads: list[tuple[int, int]], value: float) -> torch.Tensor:
    """Pad the trailing ``len(pads)`` axes of ``x`` with a constant."""
    if all(b == 0 and e == 0 for b, e in pads):
        return x
    flat: list[int] = []
    for begin, end in reversed(pads):
        flat.extend((begin, end))
    return F.pad(x, flat, mode="constant", value=value)


def _window_and_strides(node: Node) -> tuple[tuple[int, ...], tuple[int, ...]]:
    window = _attr_ints(node, "kernel_shape")
    strides = _attr_ints(node, "strides", default=(1,) * len(window))
    return window, strides


def _conv(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    x, weight = args[0], args[1]
    bias = args[2] if len(args) > 2 else None
    window = _attr_ints(node, "kernel_shape", default=tuple(weight.shape[2:]))
    strides = _attr_ints(node, "strides", default=(1,) * len(window))
    pads = _spatial_pads(node, tuple(x.shape[2:]), window, strides)
    xp = _pad_spatial(x, pads, 0.0)
    groups = int(node.attrs.get("group", 1))
    dilations = _attr_ints(node, "dilations", default=(1,) * len(window))
    y = F.conv2d(xp.double(), weight.double(),
                 bias.double() if bias is not None else None,
                 stride=strides, dilation=dilations, groups=groups)
    return y.float()


def _gemm(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    a, b = args[0].double(), args[1].double()
    if int(node.attrs.get("transA", 0)):
        a = a.t()
    if int(node.attrs.get("transB", 0)):
        b = b.t()
    alpha = float(node.attrs.get("alpha", 1.0))
    beta = float(node.attrs.get("beta", 1.0))
    y = alpha * (a @ b)
    if len(args) > 2:
        y = y + beta * args[2].double()
    return y.float()


def _clip(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    x = args[0]
    lo = args[1] if len(args) > 1 else None
    hi = args[2] if len(args) > 2 else None
    return torch.clamp(x, min=lo, max=hi)


def _batchnorm(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    x, scale, bias, mean, var = args
    eps = float(node.attrs.get("epsilon", 1e-5))
    span = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    normalized = (x - mean.reshape(span)) / torch.sqrt(var.reshape(span) + eps)
    return normalized * scale.reshape(span) + bias.reshape(span)


def _maxpool(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    x = args[0]
    window, strides = _window_and_strides(node)
    pads = _spatial_pads(node, tuple(x.shape[2:]), window, strides)
    xp = _pad_spatial(x, pads, float("-inf"))
    return F.max_pool2d(xp, window, stride=strides)


def _avgpool(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    x = args[0]
    window, strides = _window_and_strides(node)
    pads = _spatial_pads(node, tuple(x.shape[2:]), window, strides)
    xp = _pad_spatial(x, pads, 0.0)
    totals = F.avg_pool2d(xp, window, stride=strides, divisor_override=1)
    mask = _pad_spatial(torch.ones_like(x), pads, 0.0)
    counts = F.avg_pool2d(mask, window, stride=strides, divisor_override=1)
    return totals / counts


def _softmax(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    axis = int(node.attrs.get("axis", -1))
    return torch.softmax(args[0], dim=axis)


def _flatten(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    x = args[0]
    axis = int(node.attrs.get("axis", 1))
    if not -x.ndim <= axis <= x.ndim:
        raise ModelExecError(f"Flatten node {node.name!r} axis {axis} exceeds rank {x.ndim}")
    if axis < 0:
        axis += x.ndim
    lead = math.prod(x.shape[:axis])
    return x.reshape(int(lead), -1)


def _reshape(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    x, shape_tensor = args[0], args[1]
    dims = [int(d) for d in shape_tensor.reshape(-1).tolist()]
    resolved = [x.shape[i] if d == 0 else d for i, d in enumerate(dims)]
    return torch.reshape(x, resolved)


def _pad(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    x, pads_tensor = args[0], args[1]
    value = float(args[2].reshape(-1)[0]) if len(args) > 2 else 0.0
    flat = [int(p) for p in pads_tensor.reshape(-1).tolist()]
    rank = x.ndim
    if len(flat) != 2 * rank:
        raise ModelExecError(
            f"Pad node {node.name!r} carries {len(flat)} pad values for rank {rank}")
    widths = [(flat[i], flat[rank + i]) for i in range(rank)]
    return _pad_spatial(x, widths, value)


def _concat(node: Node, args: list[torch.Tensor]) -> torch.Tensor:
    axis = node.attrs.get("axis")
    if axis is None:
        raise ModelExecError(f"Concat node {node.name!r} lacks attribute 'axis'")
    return torch.cat(args, dim=int(axis))


_KERNELS = {
    "Add": lambda node, args: args[0] + args[1],
    "AveragePool": _avgpool,
    "BatchNormalization": _batchnorm,
    "Clip": _clip,
    "Concat": _concat,
    "Conv": _conv,
    "Flatten": _flatten,
    "Gemm": _gemm,
    "MaxPool": _maxpool,
    "Mul": lambda node, args: args[0] * args[1],
    "Pad": _pad,
    "Relu": lambda node, args: torch.clamp(args[0], min=0.0),
    "Reshape": _reshape,
    "Sigmoid": lambda node, args: torch.sigmoid(args[0]),
    "Softmax": _softmax,
    "Tanh": lambda node, args: torch.tanh(args[0]),
}


def execute(graph: ModelGraph, input_array: np.ndarray) -> list[tuple[str, torch.Tensor]]:
    """Run every node and return (value name, tensor) in execution order."""
    if graph.input_shape is not None and tuple(input_array.shape) != graph.input_shape:
        raise ModelExecError(
            f"input shape {tuple(input_array.shape)} does not match the declared "
            f"{graph.input_shape}")
    env: dict[str, torch.Tensor] = {
        name: torch.from_numpy(array) for name, array in graph.initializers.items()
    }
    env[graph.input_name] = torch.from_numpy(
        np.ascontiguousarray(input_array, dtype=np.float32))
    captured: list[tuple[str, torch.Tensor]] = []
    with torch.no_grad():
        for node in graph.nodes:
            kernel = _KERNELS.get(node.op_type)
            if kernel is None:
                raise ModelExecError(f"no kernel for operator {node.op_type!r}")
            args = [env[name] for name in node.inputs]
            out = kernel(node, args)
            if out.dtype != torch.float32:
                out = out.float()
            out = out.contiguous()
            env[node.outputs[0]] = out
            captured.append((node.outputs[0], out))
    return captured


def select_outputs(graph: ModelGraph,
                   captured: list[tuple[str, torch.Tensor]]) -> list[tuple[str, torch.Tensor]]:
    """Reduce a full capture to the graph's declared outputs, in order."""
    by_name = dict(captured)
    missing = [name for name in graph.output_names if name not in by_name]
    if missing:
        raise ModelExecError(f"declared outputs {missing!r} were never produced")
    return [(name, by_name[name]) for name in graph.output_names]


def any_nonfinite(tensors: list[tuple[str, torch.Tensor]]) -> bool:
    """True when any reported tensor contains NaN or infinity."""
    return any(not torch.isfinite(tensor).all() for _, tensor in tensors)
