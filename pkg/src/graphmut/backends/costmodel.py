"""Deterministic cost models: virtual layer times and peak-memory estimates.

The virtual clock charges each layer its arithmetic work (multiply-adds
or elementwise visits) at a fixed rate, so timing comparisons are exactly
reproducible across machines.  The memory estimate walks the graph in
topological order and tracks the high-water mark of live tensor bytes:
a tensor is live from the step that produces it until its last consumer
has run, graph outputs and weights stay live throughout.
"""
from __future__ import annotations

import math

from ..ir import GraphModel, LayerNode, as_pair, resolved_attrs

__all__ = ["estimate_peak_mem", "virtual_time_ms", "work_units"]

BYTES_PER_ELEMENT = 4
WORK_UNITS_PER_MS = 1e6


def work_units(node: LayerNode, in_shapes: list[tuple[int, ...]],
               out_shape: tuple[int, ...]) -> float:
    """Abstract work charged to one layer (multiply-adds / element visits)."""
    attrs = resolved_attrs(node)
    out_elems = float(math.prod(out_shape))
    kind = node.kind
    if kind == "Conv2D":
        kh, kw = as_pair(attrs["kernel"])
        in_ch = in_shapes[0][1]
        return out_elems * kh * kw * in_ch
    if kind == "Dense":
        return float(in_shapes[0][1]) * attrs["units"]
    if kind in ("MaxPool", "AvgPool"):
        ph, pw = as_pair(attrs["pool"])
        return out_elems * ph * pw
    if kind == "Softmax":
        return 3.0 * out_elems
    # BatchNorm, activations, Add/Mul, Concat and the data movers all
    # touch each output element a constant number of times.
    return out_elems


def virtual_time_ms(node: LayerNode, in_shapes: list[tuple[int, ...]],
                    out_shape: tuple[int, ...]) -> float:
    return work_units(node, in_shapes, out_shape) / WORK_UNITS_PER_MS


def estimate_peak_mem(model: GraphModel, shapes: dict[str, tuple[int, ...]]) -> int:
    """High-water mark of live tensor bytes over a topological execution.

    Weights and the graph input are allocated up front; each node's output
    is allocated when the node runs and released after its last consumer
    (graph outputs are never released).  Float32 storage assumed.
    """
    weight_bytes = BYTES_PER_ELEMENT * sum(
        w.size for node in model.nodes.values() for w in node.weights
    )
    order = model.topo_order()
    position = {nid: i for i, nid in enumerate(order)}
    last_use: dict[str, int] = {model.input.name: -1}
    for nid in order:
        for src in model.nodes[nid].inputs:
            last_use[src] = position[nid]
    for out in model.outputs:
        last_use[out] = len(order)

    def tensor_bytes(name: str) -> int:
        shape = model.input.shape if name == model.input.name else shapes[name]
        return BYTES_PER_ELEMENT * math.prod(shape)

    live = tensor_bytes(model.input.name)
    peak = live
    alive = {model.input.name}
    for step, nid in enumerate(order):
        live += tensor_bytes(nid)
        alive.add(nid)
        peak = max(peak, live)
        released = [name for name in alive if last_use.get(name, -1) == step]
        for name in released:
            alive.remove(name)
            live -= tensor_bytes(name)
    return weight_bytes + peak
