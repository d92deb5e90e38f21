"""Shared execution driver for the in-process interpreters.

All interpreters walk the same three-stage lifecycle — build (structural
and shape validation), load (weight binding), infer (topological layer
execution) — and differ only in their kernel table and in optional
per-layer hooks.  Any failure inside a stage is recorded as a crash in
the trace rather than propagating: models must never be able to take the
harness down with them.
"""
from __future__ import annotations

import statistics
import time
from collections.abc import Callable

import numpy as np

from ..ir import (
    GraphModel,
    LayerNode,
    TensorValue,
    infer_shapes,
    resolved_attrs,
    validate_graph,
)
from .costmodel import estimate_peak_mem, virtual_time_ms
from .trace import CRASH, OK, CaptureOptions, ExecutionTrace, StageStatus

__all__ = ["FaultCrash", "Kernel", "KernelTable", "run_interpreter"]

# A kernel computes one layer: (input arrays, node, weight arrays, resolved
# attrs) -> output array.  Inputs and weights arrive as float32 ndarrays.
Kernel = Callable[[list[np.ndarray], LayerNode, list[np.ndarray], dict], np.ndarray]
KernelTable = dict[str, Kernel]


class FaultCrash(Exception):
    """Raised by fault-seeded kernels to crash the infer stage on purpose."""

    def __init__(self, signature: str, alloc_failed: bool = False):
        super().__init__(signature)
        self.signature = signature
        self.alloc_failed = alloc_failed


def _crash(trace: ExecutionTrace, stage: str, signature: str, node_id: str | None = None):
    trace.stage_status[stage] = StageStatus(CRASH, signature=signature, node_id=node_id)


def _median_time_ms(fn: Callable[[], np.ndarray], repeats: int) -> tuple[np.ndarray, float]:
    """Run ``fn`` ``repeats`` times; return its result and the median wall ms."""
    samples = []
    result = None
    for _ in range(repeats):
        start = time.perf_counter_ns()
        result = fn()
        samples.append((time.perf_counter_ns() - start) / 1e6)
    return result, statistics.median(samples)


def run_interpreter(
    model: GraphModel,
    input_value: TensorValue,
    kernels: KernelTable,
    backend_id: str,
    capture: CaptureOptions | None = None,
    time_scale: Callable[[LayerNode], float] | None = None,
) -> ExecutionTrace:
    """Execute ``model`` on ``input_value`` with the given kernel table.

    ``time_scale`` lets a caller stretch individual layer times (used for
    injected slowdowns); it multiplies both virtual and measured times.
    """
    capture = capture or CaptureOptions()
    trace = ExecutionTrace(backend_id=backend_id)

    # -- build: structural validity, shape inference, cost precomputation
    try:
        report = validate_graph(model)
        if not report.ok:
            first_node = next((nid for nid, _ in report.violations if nid), None)
            _crash(trace, "build", "invalid-graph", first_node)
            return trace
        if tuple(input_value.shape) != tuple(model.input.shape):
            _crash(trace, "build", "input-shape-mismatch")
            return trace
        shapes = infer_shapes(model)
        order = model.topo_order()
        trace.peak_mem_bytes = estimate_peak_mem(model, shapes)
    except Exception as exc:  # noqa: BLE001 - crash containment boundary
        _crash(trace, "build", type(exc).__name__)
        return trace
    trace.stage_status["build"] = StageStatus(OK)

    # -- load: bind weights and kernels per node
    try:
        bound: dict[str, tuple[LayerNode, Kernel, list[np.ndarray], dict]] = {}
        for nid in order:
            node = model.nodes[nid]
            kernel = kernels.get(node.kind)
            if kernel is None:
                raise KeyError(f"no kernel for kind {node.kind}")
            weights = [w.array for w in node.weights]
            bound[nid] = (node, kernel, weights, resolved_attrs(node))
    except Exception as exc:  # noqa: BLE001 - crash containment boundary
        _crash(trace, "load", type(exc).__name__)
        return trace
    trace.stage_status["load"] = StageStatus(OK)

    # -- infer: topological execution with per-layer capture
    values: dict[str, np.ndarray] = {model.input.name: input_value.array}
    wanted = set(model.outputs)
    for nid in order:
        node, kernel, weights, attrs = bound[nid]
        try:
            inputs = [values[src] for src in node.inputs]
            with np.errstate(all="ignore"):
                if capture.timing and capture.timing_mode == "wall":
                    out, elapsed = _median_time_ms(
                        lambda: kernel(inputs, node, weights, attrs), capture.wall_repeats
                    )
                else:
                    out = kernel(inputs, node, weights, attrs)
                    elapsed = None
        except FaultCrash as crash:
            trace.alloc_failed = trace.alloc_failed or crash.alloc_failed
            _crash(trace, "infer", crash.signature, nid)
            return trace
        except Exception as exc:  # noqa: BLE001 - crash containment boundary
            _crash(trace, "infer", type(exc).__name__, nid)
            return trace
        out = np.asarray(out, dtype=np.float32)
        values[nid] = out
        if capture.timing:
            if elapsed is None:
                elapsed = virtual_time_ms(node, [
                    tuple(values[src].shape) for src in node.inputs
                ], tuple(out.shape))
            if time_scale is not None:
                elapsed *= time_scale(node)
            trace.layer_times[nid] = elapsed
            trace.total_ms += elapsed
        if capture.per_layer or nid in wanted:
            trace.layer_outputs[nid] = TensorValue.from_array(out)
    trace.stage_status["infer"] = StageStatus(OK)
    return trace
