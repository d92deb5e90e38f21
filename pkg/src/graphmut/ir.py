"""Graph intermediate representation for neural computation graphs.

A model is a DAG of layer nodes over float32 tensors. Sixteen layer kinds are
supported; each kind carries an attribute schema, an input-arity rule, a weight
schema, and a shape rule. Models are immutable by convention: every transform
returns a new model and shares untouched tensors.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GraphError",
    "ShapeMismatchError",
    "UnsupportedOperatorError",
    "RegionTag",
    "RegionPolicy",
    "TensorValue",
    "InputSpec",
    "LayerNode",
    "GraphModel",
    "ValidationReport",
    "KNOWN_KINDS",
    "ACTIVATION_KINDS",
    "WEIGHTED_KINDS",
    "validate_graph",
    "infer_shapes",
    "tag_regions",
    "conv_out_dim",
    "same_pad_amounts",
    "as_pair",
]


class GraphError(Exception):
    """Base error for malformed graphs."""


class ShapeMismatchError(GraphError):
    """Shape inference failed; carries the offending node id."""

    def __init__(self, node_id: str, message: str):
        super().__init__(f"{node_id}: {message}")
        self.node_id = node_id


class UnsupportedOperatorError(GraphError):
    """A layer kind outside the supported set was requested."""


class RegionTag(enum.Enum):
    BACKBONE = "backbone"
    TASK_HEAD = "task-head"


@dataclass(frozen=True)
class TensorValue:
    """A float32 tensor: a shape plus a flat row-major buffer.

    The buffer is a read-only 1-D float32 ndarray; ``array`` gives a reshaped
    view. Equality is exact (bitwise on the buffer).
    """

    shape: tuple[int, ...]
    data: np.ndarray

    @staticmethod
    def from_array(arr: np.ndarray | list | float) -> "TensorValue":
        a = np.asarray(arr, dtype=np.float32)
        flat = np.ascontiguousarray(a).ravel()
        flat.setflags(write=False)
        return TensorValue(shape=tuple(int(d) for d in a.shape), data=flat)

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorValue):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __hash__(self) -> int:
        return hash((self.shape, self.data.tobytes()))


@dataclass(frozen=True)
class InputSpec:
    """The graph's single input placeholder: a name and a static shape."""

    name: str
    shape: tuple[int, ...]


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list[str]
    attrs: dict = field(default_factory=dict)
    weights: list[TensorValue] = field(default_factory=list)


@dataclass
class GraphModel:
    """An immutable-by-convention computation graph.

    ``nodes`` is insertion-ordered; ``outputs`` lists the node ids whose values
    are the model outputs; ``regions`` assigns every node exactly one RegionTag.
    """

    input: InputSpec
    nodes: dict[str, LayerNode]
    outputs: list[str]
    regions: dict[str, RegionTag] = field(default_factory=dict)

    def topo_order(self) -> list[str]:
        """Deterministic topological order (Kahn, ready set sorted by id)."""
        indeg: dict[str, int] = {}
        dependents: dict[str, list[str]] = {}
        for node in self.nodes.values():
            indeg[node.id] = sum(1 for src in node.inputs if src in self.nodes)
            for src in node.inputs:
                if src in self.nodes:
                    dependents.setdefault(src, []).append(node.id)
        ready = sorted(nid for nid, d in indeg.items() if d == 0)
        order: list[str] = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            inserted = False
            for dep in dependents.get(nid, []):
                indeg[dep] -= 1
                if indeg[dep] == 0:
                    ready.append(dep)
                    inserted = True
            if inserted:
                ready.sort()
        if len(order) != len(self.nodes):
            stuck = sorted(set(self.nodes) - set(order))
            raise GraphError(f"graph has a cycle involving: {', '.join(stuck)}")
        return order

    def consumers(self) -> dict[str, list[str]]:
        """node id -> ids of nodes consuming it (insertion order)."""
        out: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for src in node.inputs:
                if src in self.nodes:
                    out[src].append(node.id)
        return out

    def copy(self) -> "GraphModel":
        """Structural copy; tensors are shared (they are read-only)."""
        return GraphModel(
            input=self.input,
            nodes={
                nid: LayerNode(
                    id=n.id,
                    kind=n.kind,
                    inputs=list(n.inputs),
                    attrs=dict(n.attrs),
                    weights=list(n.weights),
                )
                for nid, n in self.nodes.items()
            },
            outputs=list(self.outputs),
            regions=dict(self.regions),
        )


# --------------------------------------------------------------------------
# Kind schemas
# --------------------------------------------------------------------------

_REQUIRED = object()


@dataclass(frozen=True)
class AttrSpec:
    kind: str  # "int" | "float" | "str" | "int_list"
    default: object = _REQUIRED
    choices: tuple | None = None
    minimum: float | None = None

    @property
    def required(self) -> bool:
        return self.default is _REQUIRED


ACTIVATION_KINDS = ("ReLU", "ReLU6", "Sigmoid", "Tanh", "Softmax")
WEIGHTED_KINDS = ("Conv2D", "Dense", "BatchNorm")
_TASK_CHAIN_KINDS = ("Dense", "Softmax", "Reshape")

_SCHEMAS: dict[str, dict[str, AttrSpec]] = {
    "Conv2D": {
        "filters": AttrSpec("int", minimum=1),
        "kernel": AttrSpec("int_list", minimum=1),
        "stride": AttrSpec("int", default=1, minimum=1),
        "padding": AttrSpec("str", default="same", choices=("same", "valid")),
    },
    "Dense": {"units": AttrSpec("int", minimum=1)},
    "ReLU": {},
    "ReLU6": {},
    "Sigmoid": {},
    "Tanh": {},
    "Softmax": {"axis": AttrSpec("int", default=-1)},
    "BatchNorm": {"epsilon": AttrSpec("float", default=1e-5, minimum=0.0)},
    "MaxPool": {
        "pool": AttrSpec("int_list", minimum=1),
        "stride": AttrSpec("int", default=0, minimum=0),  # 0 means "same as pool"
        "padding": AttrSpec("str", default="valid", choices=("same", "valid")),
    },
    "AvgPool": {
        "pool": AttrSpec("int_list", minimum=1),
        "stride": AttrSpec("int", default=0, minimum=0),
        "padding": AttrSpec("str", default="valid", choices=("same", "valid")),
    },
    "Flatten": {},
    "Reshape": {"shape": AttrSpec("int_list", minimum=1)},
    "Pad": {
        "pads": AttrSpec("int_list", minimum=0),
        "value": AttrSpec("float", default=0.0),
    },
    "Add": {},
    "Mul": {},
    "Concat": {"axis": AttrSpec("int", default=1)},
}

KNOWN_KINDS = tuple(_SCHEMAS)

# (min_inputs, max_inputs); None = unbounded
_ARITY: dict[str, tuple[int, int | None]] = {kind: (1, 1) for kind in _SCHEMAS}
_ARITY["Add"] = (2, 2)
_ARITY["Mul"] = (2, 2)
_ARITY["Concat"] = (2, None)

_WEIGHT_NAMES: dict[str, tuple[str, ...]] = {kind: () for kind in _SCHEMAS}
_WEIGHT_NAMES["Conv2D"] = ("kernel", "bias")
_WEIGHT_NAMES["Dense"] = ("kernel", "bias")
_WEIGHT_NAMES["BatchNorm"] = ("scale", "bias", "mean", "variance")


def kind_arity(kind: str) -> tuple[int, int | None]:
    return _ARITY[kind]


def weight_names(kind: str) -> tuple[str, ...]:
    return _WEIGHT_NAMES[kind]


def resolved_attrs(node: LayerNode) -> dict:
    """Node attributes merged over schema defaults. Raises on unknown kind."""
    if node.kind not in _SCHEMAS:
        raise UnsupportedOperatorError(f"unknown layer kind: {node.kind}")
    schema = _SCHEMAS[node.kind]
    out = {}
    for name, spec in schema.items():
        if name in node.attrs:
            out[name] = node.attrs[name]
        elif not spec.required:
            out[name] = spec.default
    return out


def as_pair(value) -> tuple[int, int]:
    """Accept an int or a [h, w] list for kernel/pool sizes."""
    if isinstance(value, int):
        return (value, value)
    seq = list(value)
    if len(seq) == 1:
        return (int(seq[0]), int(seq[0]))
    if len(seq) != 2:
        raise ValueError(f"expected scalar or pair, got {value!r}")
    return (int(seq[0]), int(seq[1]))


def conv_out_dim(size: int, window: int, stride: int, padding: str) -> int:
    """Output extent of a strided window over one axis."""
    if padding == "same":
        return -(-size // stride)  # ceil
    out = (size - window) // stride + 1
    if out < 1:
        raise ValueError(f"window {window} does not fit extent {size} (valid padding)")
    return out


def same_pad_amounts(size: int, window: int, stride: int) -> tuple[int, int]:
    """(begin, end) zero-padding for 'same' output = ceil(size/stride).

    The extra unit of an odd total goes at the end.
    """
    out = -(-size // stride)
    total = max(0, (out - 1) * stride + window - size)
    begin = total // 2
    return begin, total - begin


def _attr_violations(node: LayerNode) -> list[str]:
    schema = _SCHEMAS[node.kind]
    problems = []
    for name in node.attrs:
        if name not in schema:
            problems.append(f"unknown attribute {name!r} for kind {node.kind}")
    for name, spec in schema.items():
        if name not in node.attrs:
            if spec.required:
                problems.append(f"missing required attribute {name!r}")
            continue
        value = node.attrs[name]
        if spec.kind == "int":
            if not isinstance(value, int) or isinstance(value, bool):
                problems.append(f"attribute {name!r} must be an int, got {value!r}")
                continue
        elif spec.kind == "float":
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                problems.append(f"attribute {name!r} must be a float, got {value!r}")
                continue
        elif spec.kind == "str":
            if not isinstance(value, str):
                problems.append(f"attribute {name!r} must be a string, got {value!r}")
                continue
        elif spec.kind == "int_list":
            ok_scalar = isinstance(value, int) and not isinstance(value, bool)
            ok_list = isinstance(value, (list, tuple)) and all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            )
            if not (ok_scalar or ok_list):
                problems.append(f"attribute {name!r} must be an int or int list, got {value!r}")
                continue
        if spec.choices is not None and value not in spec.choices:
            problems.append(f"attribute {name!r} must be one of {spec.choices}, got {value!r}")
        if spec.minimum is not None:
            values = value if isinstance(value, (list, tuple)) else [value]
            if any(v < spec.minimum for v in values):
                problems.append(f"attribute {name!r} below minimum {spec.minimum}: {value!r}")
    return problems


def expected_weight_shapes(kind: str, attrs: dict, in_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Weight tensor shapes required by ``kind`` for the given input shape."""
    if kind == "Conv2D":
        kh, kw = as_pair(attrs["kernel"])
        filters = attrs["filters"]
        return [(filters, in_shape[1], kh, kw), (filters,)]
    if kind == "Dense":
        return [(in_shape[1], attrs["units"]), (attrs["units"],)]
    if kind == "BatchNorm":
        c = in_shape[1]
        return [(c,), (c,), (c,), (c,)]
    return []


def infer_node_shape(node: LayerNode, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    """Output shape of one node given its input shapes.

    Checks rank/arity constraints and weight shapes; raises ShapeMismatchError
    with the node id on any inconsistency.
    """

    def fail(msg: str):
        raise ShapeMismatchError(node.id, msg)

    kind = node.kind
    if kind not in _SCHEMAS:
        fail(f"unknown kind {kind}")
    lo, hi = _ARITY[kind]
    if len(in_shapes) < lo or (hi is not None and len(in_shapes) > hi):
        fail(f"expects between {lo} and {hi if hi is not None else 'inf'} inputs, got {len(in_shapes)}")
    attrs = resolved_attrs(node)
    x = in_shapes[0]

    if kind in ("Conv2D", "MaxPool", "AvgPool"):
        if len(x) != 4:
            fail(f"requires a rank-4 input, got rank {len(x)}")
    if kind == "Dense" and len(x) != 2:
        fail(f"requires a rank-2 input, got rank {len(x)}")
    if kind in ("Flatten", "BatchNorm") and len(x) < 2:
        fail(f"requires rank >= 2, got rank {len(x)}")

    if kind in WEIGHTED_KINDS:
        want = expected_weight_shapes(kind, attrs, x)
        got = [w.shape for w in node.weights]
        if got != want:
            fail(f"weight shapes {got} do not match required {want}")

    if kind == "Conv2D":
        kh, kw = as_pair(attrs["kernel"])
        stride, padding = attrs["stride"], attrs["padding"]
        try:
            ho = conv_out_dim(x[2], kh, stride, padding)
            wo = conv_out_dim(x[3], kw, stride, padding)
        except ValueError as exc:
            fail(str(exc))
        return (x[0], attrs["filters"], ho, wo)

    if kind in ("MaxPool", "AvgPool"):
        ph, pw = as_pair(attrs["pool"])
        stride = attrs["stride"] or max(ph, pw)
        padding = attrs["padding"]
        try:
            ho = conv_out_dim(x[2], ph, stride, padding)
            wo = conv_out_dim(x[3], pw, stride, padding)
        except ValueError as exc:
            fail(str(exc))
        return (x[0], x[1], ho, wo)

    if kind == "Dense":
        return (x[0], attrs["units"])

    if kind in ("ReLU", "ReLU6", "Sigmoid", "Tanh", "BatchNorm"):
        return x

    if kind == "Softmax":
        axis = attrs["axis"]
        if not (-len(x) <= axis < len(x)):
            fail(f"softmax axis {axis} out of range for rank {len(x)}")
        return x

    if kind == "Flatten":
        return (x[0], int(np.prod(x[1:], dtype=np.int64)))

    if kind == "Reshape":
        target = tuple(int(d) for d in node.attrs.get("shape", ()))
        if not target:
            fail("reshape target shape missing")
        if math.prod(x) != math.prod(target):
            fail(f"cannot reshape {x} ({math.prod(x)} elements) to {target} ({math.prod(target)})")
        return target

    if kind == "Pad":
        pads = list(attrs["pads"]) if not isinstance(attrs["pads"], int) else [attrs["pads"]]
        if len(pads) != 2 * len(x):
            fail(f"pads length {len(pads)} does not match 2*rank for input rank {len(x)}")
        return tuple(int(d + pads[2 * i] + pads[2 * i + 1]) for i, d in enumerate(x))

    if kind in ("Add", "Mul"):
        if in_shapes[0] != in_shapes[1]:
            fail(f"operand shapes differ: {in_shapes[0]} vs {in_shapes[1]}")
        return x

    if kind == "Concat":
        axis = attrs["axis"]
        rank = len(x)
        if not (-rank <= axis < rank):
            fail(f"concat axis {axis} out of range for rank {rank}")
        axis %= rank
        for s in in_shapes[1:]:
            if len(s) != rank:
                fail(f"concat rank mismatch: {x} vs {s}")
            for i, (a, b) in enumerate(zip(x, s)):
                if i != axis and a != b:
                    fail(f"concat non-axis dims differ at axis {i}: {x} vs {s}")
        return tuple(
            sum(s[i] for s in in_shapes) if i == axis else d for i, d in enumerate(x)
        )

    fail(f"no shape rule for kind {kind}")


# --------------------------------------------------------------------------
# Validation and inference over whole graphs
# --------------------------------------------------------------------------


@dataclass
class ValidationReport:
    violations: list[tuple[str | None, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, node_id: str | None, message: str):
        self.violations.append((node_id, message))

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "; ".join(f"[{nid or 'graph'}] {msg}" for nid, msg in self.violations)


def validate_graph(model: GraphModel) -> ValidationReport:
    """Full validity check: structure, schemas, shapes, weights, regions.

    Collects violations instead of raising; an empty report means the model
    satisfies every invariant.
    """
    report = ValidationReport()
    if not model.input.name:
        report.add(None, "input spec has no name")
    if any(d < 1 for d in model.input.shape):
        report.add(None, f"input shape must be positive, got {model.input.shape}")
    if model.input.name in model.nodes:
        report.add(None, f"input name {model.input.name!r} collides with a node id")
    if not model.nodes:
        report.add(None, "graph has no nodes")
    if not model.outputs:
        report.add(None, "graph has no outputs")
    for out in model.outputs:
        if out not in model.nodes:
            report.add(None, f"output {out!r} does not resolve to a node")

    for nid, node in model.nodes.items():
        if nid != node.id:
            report.add(nid, f"node key {nid!r} differs from node id {node.id!r}")
        if node.kind not in _SCHEMAS:
            report.add(nid, f"unknown layer kind {node.kind!r}")
            continue
        lo, hi = _ARITY[node.kind]
        if len(node.inputs) < lo or (hi is not None and len(node.inputs) > hi):
            report.add(nid, f"{node.kind} expects between {lo} and {hi or 'inf'} inputs, got {len(node.inputs)}")
        for src in node.inputs:
            if src != model.input.name and src not in model.nodes:
                report.add(nid, f"input edge {src!r} dangles (no such node or graph input)")
        for msg in _attr_violations(node):
            report.add(nid, msg)
        want_n = len(_WEIGHT_NAMES[node.kind])
        if node.kind in WEIGHTED_KINDS and len(node.weights) != want_n:
            report.add(nid, f"{node.kind} carries {len(node.weights)} weight tensors, needs {want_n}")
        if node.kind not in WEIGHTED_KINDS and node.weights:
            report.add(nid, f"{node.kind} must not carry weights")

    if not report.ok:
        return report

    try:
        model.topo_order()
    except GraphError as exc:
        report.add(None, str(exc))
        return report

    try:
        infer_shapes(model)
    except ShapeMismatchError as exc:
        report.add(exc.node_id, str(exc))
    except GraphError as exc:
        report.add(None, str(exc))

    tagged = set(model.regions)
    for nid in model.nodes:
        if nid not in tagged:
            report.add(nid, "node has no region tag")
        elif not isinstance(model.regions[nid], RegionTag):
            report.add(nid, f"region tag {model.regions[nid]!r} is not a RegionTag")
    for nid in tagged - set(model.nodes):
        report.add(nid, "region tag for a node that does not exist")
    return report


def infer_shapes(model: GraphModel) -> dict[str, tuple[int, ...]]:
    """Shapes of every node output, keyed by node id, in topological order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for nid in model.topo_order():
        node = model.nodes[nid]
        in_shapes = []
        for src in node.inputs:
            if src == model.input.name:
                in_shapes.append(tuple(model.input.shape))
            elif src in shapes:
                in_shapes.append(shapes[src])
            else:
                raise ShapeMismatchError(nid, f"input edge {src!r} dangles")
        shapes[nid] = infer_node_shape(node, in_shapes)
    return shapes


# --------------------------------------------------------------------------
# Region tagging
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionPolicy:
    """How to split a model into backbone vs task head.

    ``force`` tags every node with one region; otherwise the default suffix
    heuristic applies. Per-node ``overrides`` win in either case.
    """

    force: RegionTag | None = None
    overrides: dict[str, RegionTag] = field(default_factory=dict)


def _task_head_ids(model: GraphModel) -> set[str]:
    """Maximal suffix of task-chain kinds (Dense/Softmax/Reshape) above outputs."""
    head: set[str] = set()
    for out in model.outputs:
        cur = out
        while cur in model.nodes and cur not in head:
            node = model.nodes[cur]
            if node.kind not in _TASK_CHAIN_KINDS:
                break
            head.add(cur)
            if len(node.inputs) != 1:
                break
            cur = node.inputs[0]
    if len(head) == len(model.nodes):
        return set()  # a model that is all head has no backbone/head split
    return head


def tag_regions(model: GraphModel, policy: RegionPolicy | None = None) -> GraphModel:
    """Return a copy of ``model`` with regions assigned under ``policy``."""
    policy = policy or RegionPolicy()
    if policy.force is not None:
        regions = {nid: policy.force for nid in model.nodes}
    else:
        head = _task_head_ids(model)
        regions = {
            nid: RegionTag.TASK_HEAD if nid in head else RegionTag.BACKBONE
            for nid in model.nodes
        }
    for nid, tag in policy.overrides.items():
        if nid in regions:
            regions[nid] = tag
    out = model.copy()
    out.regions = regions
    return out
