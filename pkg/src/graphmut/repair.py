"""Automatic shape repair for edited computation graphs.

After a graph edit, downstream nodes may disagree with the shapes now
flowing into them.  ``repair_shapes`` walks the graph once in topological
order and reconciles every edge with at most one inserted adapter:

* equal element counts  -> one ``Reshape`` (covers rank changes),
* same rank, growth only -> one ``Pad`` (zeros appended at the end).

Nodes that own weights are never adapted from the outside; their weight
tensors are resized in place (zero-padded or truncated along the
input-bound axis) the way model-surgery tools rebuild downstream layers.
``Reshape``/``Pad`` nodes whose own attributes no longer match their input
get the attribute rewritten instead.  Anything else is unrepairable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ir import (
    GraphError,
    GraphModel,
    LayerNode,
    ShapeMismatchError,
    TensorValue,
    as_pair,
    expected_weight_shapes,
    infer_node_shape,
    kind_arity,
    resolved_attrs,
)

__all__ = ["MutationOutcome", "RepairAction", "RepairFailureError", "fresh_id", "repair_shapes"]


class RepairFailureError(GraphError):
    """No single-adapter edit reconciles a mismatched edge."""


@dataclass(frozen=True)
class RepairAction:
    """One repair step: an inserted adapter or an in-place fit."""

    node_id: str
    action: str  # insert-pad | insert-reshape | weight-fit | attr-fit
    reason: str


@dataclass
class MutationOutcome:
    """A repaired model plus the log of what repair had to do."""

    model: GraphModel
    repair_log: list[RepairAction] = field(default_factory=list)

    @property
    def inserted_adapters(self) -> list[RepairAction]:
        return [a for a in self.repair_log if a.action.startswith("insert-")]


def fresh_id(model: GraphModel, base: str) -> str:
    """A node id not yet used by the model (nor its input name)."""
    taken = set(model.nodes) | {model.input.name}
    if base not in taken:
        return base
    k = 2
    while f"{base}-{k}" in taken:
        k += 1
    return f"{base}-{k}"


def repair_shapes(model: GraphModel) -> MutationOutcome:
    """Reconcile every edge of ``model``; idempotent on valid models."""
    out = model.copy()
    log: list[RepairAction] = []
    repair_in_place(out, log)
    return MutationOutcome(out, log)


def repair_in_place(model: GraphModel, log: list[RepairAction]) -> dict[str, tuple[int, ...]]:
    """Walk ``model`` topologically, fixing edges as they are reached.

    Returns the final shape table.  Raises RepairFailureError when a node
    cannot be satisfied.
    """
    shapes: dict[str, tuple[int, ...]] = {model.input.name: model.input.shape}
    for nid in model.topo_order():
        node = model.nodes[nid]
        lo, hi = kind_arity(node.kind)
        if len(node.inputs) < lo or (hi is not None and len(node.inputs) > hi):
            raise RepairFailureError(
                f"node {nid!r} has {len(node.inputs)} inputs, outside its arity"
            )
        for ref in node.inputs:
            if ref not in shapes:
                raise GraphError(f"node {nid!r} references unknown tensor {ref!r}")
        _adapt_node_inputs(model, node, shapes, log)
        _fit_weights(node, shapes[node.inputs[0]], log)
        try:
            shapes[nid] = infer_node_shape(node, [shapes[r] for r in node.inputs])
        except ShapeMismatchError as exc:
            raise RepairFailureError(f"cannot reconcile {nid!r}: {exc}") from exc
    return shapes


# --------------------------------------------------------------------------
# Edge adaptation
# --------------------------------------------------------------------------


def _adapt_node_inputs(
    model: GraphModel,
    node: LayerNode,
    shapes: dict[str, tuple[int, ...]],
    log: list[RepairAction],
) -> None:
    kind = node.kind
    attrs = resolved_attrs(node)
    x = shapes[node.inputs[0]]

    if kind in ("Conv2D", "MaxPool", "AvgPool"):
        if len(x) != 4:
            x = _adapt_edge(model, node, 0, _to_rank4(x), shapes, log, "rank-4 operand required")
        if kind == "Conv2D":
            wh, ww = as_pair(attrs["kernel"])
        else:
            wh, ww = as_pair(attrs["pool"])
        if attrs["padding"] == "valid" and (x[2] < wh or x[3] < ww):
            target = (x[0], x[1], max(x[2], wh), max(x[3], ww))
            _adapt_edge(model, node, 0, target, shapes, log, "window larger than operand")

    elif kind == "Dense":
        if len(x) != 2:
            target = (x[0], math.prod(x[1:]))
            _adapt_edge(model, node, 0, target, shapes, log, "rank-2 operand required")

    elif kind in ("BatchNorm", "Flatten"):
        if len(x) < 2:
            _adapt_edge(model, node, 0, x + (1,), shapes, log, "rank >= 2 required")

    elif kind == "Reshape":
        target = tuple(int(d) for d in node.attrs.get("shape", ()))
        if math.prod(x) != math.prod(target):
            node.attrs["shape"] = [int(d) for d in x]
            log.append(RepairAction(node.id, "attr-fit", f"reshape target rewritten to {x}"))

    elif kind == "Pad":
        pads = node.attrs.get("pads", [])
        pads = [pads] if isinstance(pads, int) else list(pads)
        if len(pads) != 2 * len(x):
            fixed = (pads + [0] * (2 * len(x)))[: 2 * len(x)]
            node.attrs["pads"] = fixed
            log.append(RepairAction(node.id, "attr-fit", f"pads resized for rank {len(x)}"))

    elif kind in ("Add", "Mul"):
        a, b = shapes[node.inputs[0]], shapes[node.inputs[1]]
        if a != b:
            try:
                _adapt_edge(model, node, 1, a, shapes, log, "operand shapes must match")
            except RepairFailureError:
                _adapt_edge(model, node, 0, b, shapes, log, "operand shapes must match")

    elif kind == "Concat":
        axis = attrs["axis"] % len(x)
        for i in range(1, len(node.inputs)):
            s = shapes[node.inputs[i]]
            if len(s) == len(x) and all(p == q for j, (p, q) in enumerate(zip(x, s)) if j != axis):
                continue
            nonaxis = math.prod(d for j, d in enumerate(x) if j != axis)
            if math.prod(s) % nonaxis == 0:
                target = tuple(
                    math.prod(s) // nonaxis if j == axis else d for j, d in enumerate(x)
                )
            else:
                target = x
            _adapt_edge(model, node, i, target, shapes, log, "concat operands must align")


def _to_rank4(shape: tuple[int, ...]) -> tuple[int, ...]:
    if len(shape) < 4:
        return shape + (1,) * (4 - len(shape))
    # fold extra middle axes into the channel axis
    return (shape[0], math.prod(shape[1:-2]), shape[-2], shape[-1])


def _adapt_edge(
    model: GraphModel,
    node: LayerNode,
    position: int,
    target: tuple[int, ...],
    shapes: dict[str, tuple[int, ...]],
    log: list[RepairAction],
    reason: str,
) -> tuple[int, ...]:
    """Insert one adapter so input ``position`` of ``node`` has ``target`` shape."""
    src_ref = node.inputs[position]
    src = shapes[src_ref]
    if src == target:
        return target
    if math.prod(src) == math.prod(target):
        adapter = LayerNode(
            id=fresh_id(model, f"{node.id}-fit"),
            kind="Reshape",
            inputs=[src_ref],
            attrs={"shape": [int(d) for d in target]},
        )
        action = "insert-reshape"
    elif len(src) == len(target) and all(t >= s for s, t in zip(src, target)):
        pads: list[int] = []
        for s, t in zip(src, target):
            pads += [0, t - s]
        adapter = LayerNode(
            id=fresh_id(model, f"{node.id}-fit"),
            kind="Pad",
            inputs=[src_ref],
            attrs={"pads": pads, "value": 0.0},
        )
        action = "insert-pad"
    else:
        raise RepairFailureError(
            f"no single adapter turns {src} into {target} for node {node.id!r}"
        )
    model.nodes[adapter.id] = adapter
    if node.id in model.regions:
        model.regions[adapter.id] = model.regions[node.id]
    node.inputs[position] = adapter.id
    shapes[adapter.id] = target
    log.append(RepairAction(adapter.id, action, f"{reason}: {src} -> {target}"))
    return target


# --------------------------------------------------------------------------
# Weight fitting
# --------------------------------------------------------------------------

# fills for resized BatchNorm tensors keep the new entries neutral
_BN_FILLS = (1.0, 0.0, 0.0, 1.0)


def _fit_weights(node: LayerNode, in_shape: tuple[int, ...], log: list[RepairAction]) -> None:
    if not node.weights:
        return
    want = expected_weight_shapes(node.kind, resolved_attrs(node), in_shape)
    if len(want) != len(node.weights):
        return  # wrong weight count is a validation error, not a fit problem
    for k, (w, target) in enumerate(zip(node.weights, want)):
        if w.shape == target or len(w.shape) != len(target):
            continue
        fill = _BN_FILLS[k] if node.kind == "BatchNorm" else 0.0
        node.weights[k] = _resize_tensor(w, target, fill)
        log.append(
            RepairAction(node.id, "weight-fit", f"weight {k} resized {w.shape} -> {target}")
        )


def _resize_tensor(value: TensorValue, target: tuple[int, ...], fill: float) -> TensorValue:
    arr = value.array
    out = np.full(target, fill, dtype=np.float32)
    region = tuple(slice(0, min(s, t)) for s, t in zip(arr.shape, target))
    out[region] = arr[region]
    return TensorValue.from_array(out)
