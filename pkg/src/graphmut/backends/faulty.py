"""Fault-seeded interpreter: reference semantics with injected misbehaviours.

Each activatable fault perturbs exactly one layer kind:

* ``relu6-nan-mishandle`` — ReLU6 silently maps NaN inputs to 6.0
  instead of propagating them.
* ``conv-nan-emit`` — convolution outputs whose magnitude exceeds 1e4
  come back as NaN.
* ``pad-crash`` — any Pad applied to a rank-5-or-higher tensor crashes
  the infer stage.
* ``flatten-slowdown(factor)`` — Flatten layers report ``factor`` times
  their normal layer time.
* ``flatten-alloc-fail`` — Flatten crashes with an allocation failure
  once its input exceeds 1e5 elements.
* ``mul-inconsistency(delta)`` — elementwise Mul results are scaled by
  (1 + delta).

With no faults active the behaviour (and the trace) is exactly the
reference interpreter's, apart from the backend id.
"""
from __future__ import annotations

import numpy as np

from ..ir import GraphModel, LayerNode, TensorValue
from .core import FaultCrash, KernelTable, run_interpreter
from .reference import REFERENCE_KERNELS
from .trace import CaptureOptions, ExecutionTrace, FaultSpec

__all__ = [
    "CONV_NAN_THRESHOLD",
    "FLATTEN_ALLOC_LIMIT",
    "PAD_CRASH_RANK",
    "faulty_interpret",
]

CONV_NAN_THRESHOLD = 1e4
FLATTEN_ALLOC_LIMIT = 100_000
PAD_CRASH_RANK = 5


def _build_kernels(faults: FaultSpec) -> KernelTable:
    table = dict(REFERENCE_KERNELS)

    if faults.relu6_nan_mishandle:
        base_relu6 = REFERENCE_KERNELS["ReLU6"]

        def relu6(inputs, node, weights, attrs):
            out = base_relu6(inputs, node, weights, attrs)
            return np.where(np.isnan(inputs[0]), np.float32(6.0), out)

        table["ReLU6"] = relu6

    if faults.conv_nan_emit:
        base_conv = REFERENCE_KERNELS["Conv2D"]

        def conv(inputs, node, weights, attrs):
            out = base_conv(inputs, node, weights, attrs)
            hot = np.abs(out) > np.float32(CONV_NAN_THRESHOLD)
            if hot.any():
                out = np.where(hot, np.float32(np.nan), out)
            return out

        table["Conv2D"] = conv

    if faults.pad_crash:
        base_pad = REFERENCE_KERNELS["Pad"]

        def pad(inputs, node, weights, attrs):
            if inputs[0].ndim >= PAD_CRASH_RANK:
                raise FaultCrash("pad-crash")
            return base_pad(inputs, node, weights, attrs)

        table["Pad"] = pad

    if faults.flatten_alloc_fail:
        base_flatten = REFERENCE_KERNELS["Flatten"]

        def flatten(inputs, node, weights, attrs):
            if inputs[0].size > FLATTEN_ALLOC_LIMIT:
                raise FaultCrash("flatten-alloc-fail", alloc_failed=True)
            return base_flatten(inputs, node, weights, attrs)

        table["Flatten"] = flatten

    if faults.mul_inconsistency is not None:
        base_mul = REFERENCE_KERNELS["Mul"]
        gain = np.float32(1.0 + faults.mul_inconsistency)

        def mul(inputs, node, weights, attrs):
            return base_mul(inputs, node, weights, attrs) * gain

        table["Mul"] = mul

    return table


def faulty_interpret(model: GraphModel, input_value: TensorValue, faults: FaultSpec,
                     capture: CaptureOptions | None = None) -> ExecutionTrace:
    """Run ``model`` with the reference kernels plus the given faults."""
    time_scale = None
    if faults.flatten_slowdown is not None:
        factor = faults.flatten_slowdown

        def time_scale(node: LayerNode) -> float:
            return factor if node.kind == "Flatten" else 1.0

    return run_interpreter(
        model, input_value, _build_kernels(faults), "faulty",
        capture, time_scale=time_scale,
    )
