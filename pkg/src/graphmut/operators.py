"""The fourteen graph mutation operators.

Four families:

* structure — LA (add a layer), LR (remove), LC (copy), LS (switch two
  layers), ARFm (drop an activation), ARFp (replace an activation);
* input — SM (grow one dimension of a layer's input), DM (insert a new
  dimension into it);
* parameter — PM (flip one attribute to a different schema-valid value);
* weight — WS (shuffle), NS (block swap), GF (Gaussian noise),
  NAI (sign inversion), NEB (zeroing).

Added/copied layers are inserted output-shape-preserving so the edit is
structurally inert at insertion time; shape fallout from the other edits
is reconciled by :mod:`graphmut.repair`.  All randomness comes from the
caller's generator, so equal seeds give equal outcomes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ir import (
    ACTIVATION_KINDS,
    GraphError,
    GraphModel,
    LayerNode,
    TensorValue,
    as_pair,
    infer_shapes,
    kind_arity,
    resolved_attrs,
)
from .repair import MutationOutcome, RepairFailureError, fresh_id, repair_in_place

__all__ = [
    "FAMILIES",
    "OPERATOR_CODES",
    "MutationOperator",
    "MutationSite",
    "SitePreconditionError",
    "applicable_sites",
    "apply",
    "catalog",
    "make_operator",
    "mutable_attrs",
    "pm_candidates",
]

FAMILIES: dict[str, tuple[str, ...]] = {
    "structure": ("LA", "LR", "LC", "LS", "ARFm", "ARFp"),
    "input": ("SM", "DM"),
    "parameter": ("PM",),
    "weight": ("WS", "NS", "GF", "NAI", "NEB"),
}
OPERATOR_CODES: tuple[str, ...] = tuple(c for codes in FAMILIES.values() for c in codes)
_FAMILY_OF = {code: fam for fam, codes in FAMILIES.items() for code in codes}

_DEFAULT_PARAMS: dict[str, dict] = {
    "GF": {"sigma": 0.1},
    "NAI": {"fraction": 0.3},
    "NEB": {"fraction": 0.3},
    "WS": {"fraction": 0.5},
    "NS": {"fraction": 0.5},
    "SM": {"scale": 2},
    "DM": {"scale": 2},
}


class SitePreconditionError(GraphError):
    """The requested site is not applicable for the operator."""


@dataclass(frozen=True)
class MutationOperator:
    code: str
    family: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MutationSite:
    """Where to mutate: a node, plus an optional sub-target.

    ``detail`` carries the attribute name for PM, the weight index for
    weight operators, or the second node id for LS.
    """

    node_id: str
    detail: str | int | None = None


def make_operator(code: str, **params) -> MutationOperator:
    if code not in _FAMILY_OF:
        raise ValueError(f"unknown operator code {code!r}")
    merged = dict(_DEFAULT_PARAMS.get(code, {}))
    merged.update(params)
    if code in ("SM", "DM"):
        if int(merged["scale"]) < 2:
            raise ValueError(f"{code}.scale must be >= 2, got {merged['scale']}")
        merged["scale"] = int(merged["scale"])
    if "fraction" in merged and not 0.0 < float(merged["fraction"]) <= 1.0:
        raise ValueError(f"{code}.fraction must be in (0, 1]")
    if "sigma" in merged and float(merged["sigma"]) <= 0.0:
        raise ValueError(f"{code}.sigma must be positive")
    return MutationOperator(code=code, family=_FAMILY_OF[code], params=merged)


def catalog(overrides: dict[str, dict] | None = None) -> list[MutationOperator]:
    """All fourteen operators with defaults, optionally overridden per code."""
    overrides = overrides or {}
    return [make_operator(code, **overrides.get(code, {})) for code in OPERATOR_CODES]


# --------------------------------------------------------------------------
# PM attribute whitelist
# --------------------------------------------------------------------------

_PM_CHOICES: dict[str, dict[str, tuple]] = {
    "Conv2D": {"stride": (1, 2, 3), "padding": ("same", "valid")},
    "MaxPool": {"pool": (1, 2, 3), "stride": (1, 2, 3), "padding": ("same", "valid")},
    "AvgPool": {"pool": (1, 2, 3), "stride": (1, 2, 3), "padding": ("same", "valid")},
    "Dense": {"units": (8, 16, 32, 64)},
    "BatchNorm": {"epsilon": (1e-5, 1e-4, 1e-3, 1e-2)},
}


def mutable_attrs(kind: str) -> dict[str, tuple]:
    return _PM_CHOICES.get(kind, {})


# --------------------------------------------------------------------------
# Site enumeration
# --------------------------------------------------------------------------


def applicable_sites(model: GraphModel, op: MutationOperator) -> list[MutationSite]:
    """Exact, deterministically ordered site set for ``op`` on ``model``."""
    code = op.code
    outputs = set(model.outputs)
    non_output = [nid for nid in sorted(model.nodes) if nid not in outputs]

    if code in ("LA", "LC", "SM", "DM"):
        return [MutationSite(nid) for nid in non_output]

    if code == "ARFp":
        return [
            MutationSite(nid)
            for nid in sorted(model.nodes)
            if model.nodes[nid].kind in ACTIVATION_KINDS
        ]

    if code == "ARFm":
        return [
            MutationSite(nid)
            for nid in sorted(model.nodes)
            if model.nodes[nid].kind in ACTIVATION_KINDS and _removable(model, nid)
        ]

    if code == "LR":
        sites = []
        for nid in sorted(model.nodes):
            if not _removable(model, nid):
                continue
            trial = model.copy()
            _remove_node(trial, nid)
            try:
                repair_in_place(trial, [])
            except GraphError:
                continue
            sites.append(MutationSite(nid))
        return sites

    if code == "LS":
        sites = []
        for i, a in enumerate(non_output):
            for b in non_output[i + 1 :]:
                trial = model.copy()
                _swap_labels(trial, a, b)
                log = []
                try:
                    repair_in_place(trial, log)
                except GraphError:
                    continue
                if any(entry.action.startswith("insert-") for entry in log):
                    continue
                sites.append(MutationSite(a, b))
        return sites

    if code == "PM":
        return [MutationSite(nid) for nid in sorted(model.nodes) if pm_candidates(model, nid)]

    if code in FAMILIES["weight"]:
        return [MutationSite(nid) for nid in sorted(model.nodes) if model.nodes[nid].weights]

    raise ValueError(f"unknown operator code {code!r}")


def _removable(model: GraphModel, nid: str) -> bool:
    if len(model.nodes) < 2:
        return False
    producer = model.nodes[nid].inputs[0]
    # rewiring an output to the graph input would leave a node-less output
    return producer in model.nodes or nid not in model.outputs


# --------------------------------------------------------------------------
# Application
# --------------------------------------------------------------------------


def apply(
    model: GraphModel,
    op: MutationOperator,
    site: MutationSite,
    rng: np.random.Generator,
) -> MutationOutcome:
    """Apply one mutation step; returns a new repaired model, input untouched."""
    _check_site(model, op, site)
    work = model.copy()
    edit = _EDITS[op.code]
    edit(work, op, site, rng)
    log: list = []
    repair_in_place(work, log)
    return MutationOutcome(work, log)


def _check_site(model: GraphModel, op: MutationOperator, site: MutationSite) -> None:
    node = model.nodes.get(site.node_id)
    if node is None:
        raise SitePreconditionError(f"node {site.node_id!r} not in model")
    code = op.code
    if code in ("ARFm", "ARFp") and node.kind not in ACTIVATION_KINDS:
        raise SitePreconditionError(f"{code} needs an activation node, got {node.kind}")
    if code in FAMILIES["weight"] and not node.weights:
        raise SitePreconditionError(f"{code} needs a node with weights")
    if code == "PM" and not mutable_attrs(node.kind):
        raise SitePreconditionError(f"PM: {node.kind} has no mutable attributes")
    if code == "LS":
        other = model.nodes.get(site.detail)
        if other is None or site.detail == site.node_id:
            raise SitePreconditionError("LS needs a distinct second node in detail")
    if code in ("LA", "LC", "LS", "SM", "DM") and site.node_id in model.outputs:
        raise SitePreconditionError(f"{code} does not target output nodes")


def _rewire(model: GraphModel, old: str, new: str, *, skip: str | None = None) -> None:
    """Point every consumer of ``old`` (and the output list) at ``new``."""
    for node in model.nodes.values():
        if node.id in (new, skip):
            continue
        node.inputs = [new if ref == old else ref for ref in node.inputs]
    model.outputs = [new if ref == old else ref for ref in model.outputs]


def _remove_node(model: GraphModel, nid: str) -> None:
    producer = model.nodes[nid].inputs[0]
    del model.nodes[nid]
    model.regions.pop(nid, None)
    _rewire(model, nid, producer)


def _swap_labels(model: GraphModel, a: str, b: str) -> None:
    """Exchange the graph positions of ``a`` and ``b``.

    Equivalent to renaming a<->b in the edge relation while payloads stay
    with their ids; a permutation of vertices keeps the graph acyclic.
    """
    swap = lambda ref: b if ref == a else a if ref == b else ref  # noqa: E731
    old_a, old_b = list(model.nodes[a].inputs), list(model.nodes[b].inputs)
    for node in model.nodes.values():
        node.inputs = [swap(ref) for ref in node.inputs]
    model.nodes[a].inputs = [swap(ref) for ref in old_b]
    model.nodes[b].inputs = [swap(ref) for ref in old_a]
    model.outputs = [swap(ref) for ref in model.outputs]


# --- structure family ------------------------------------------------------


def _identity_bn(channels: int, eps: float = 0.0) -> list[TensorValue]:
    ones = np.ones(channels, dtype=np.float32)
    zeros = np.zeros(channels, dtype=np.float32)
    return [TensorValue.from_array(t) for t in (ones, zeros, zeros, ones.copy())]


def _edit_la(model: GraphModel, op, site, rng) -> None:
    out_shape = infer_shapes(model)[site.node_id]
    rank = len(out_shape)
    menu = ["pad", "reshape"]
    if rank >= 2:
        menu.append("batchnorm")
    if rank == 4:
        menu.append("conv")
    pick = menu[int(rng.integers(len(menu)))]
    nid = fresh_id(model, f"{site.node_id}-{pick}")
    if pick == "pad":
        node = LayerNode(nid, "Pad", [site.node_id], {"pads": [0] * (2 * rank), "value": 0.0})
    elif pick == "reshape":
        node = LayerNode(nid, "Reshape", [site.node_id], {"shape": [int(d) for d in out_shape]})
    elif pick == "batchnorm":
        node = LayerNode(
            nid, "BatchNorm", [site.node_id], {"epsilon": 0.0}, _identity_bn(out_shape[1])
        )
    else:
        c = out_shape[1]
        w = np.zeros((c, c, 1, 1), dtype=np.float32)
        w[np.arange(c), np.arange(c), 0, 0] = 1.0
        node = LayerNode(
            nid,
            "Conv2D",
            [site.node_id],
            {"filters": c, "kernel": 1, "stride": 1, "padding": "same"},
            [TensorValue.from_array(w), TensorValue.from_array(np.zeros(c, dtype=np.float32))],
        )
    _rewire(model, site.node_id, nid, skip=nid)
    model.nodes[nid] = node
    model.regions[nid] = model.regions[site.node_id]


def _edit_lr(model: GraphModel, op, site, rng) -> None:
    _remove_node(model, site.node_id)


def _edit_lc(model: GraphModel, op, site, rng) -> None:
    src = model.nodes[site.node_id]
    out_shape = infer_shapes(model)[site.node_id]
    rank = len(out_shape)
    nid = fresh_id(model, f"{site.node_id}-copy")
    lo, _hi = kind_arity(src.kind)
    inputs = [site.node_id] * max(lo, 1)
    attrs = dict(src.attrs)
    weights: list[TensorValue] = []
    kind = src.kind
    if kind == "Conv2D":
        c = out_shape[1]
        kh, kw = as_pair(src.attrs["kernel"])
        attrs = {"filters": c, "kernel": src.attrs["kernel"], "stride": 1, "padding": "same"}
        w = np.zeros((c, c, kh, kw), dtype=np.float32)
        w[np.arange(c), np.arange(c), kh // 2, kw // 2] = 1.0
        weights = [TensorValue.from_array(w), TensorValue.from_array(np.zeros(c, dtype=np.float32))]
    elif kind == "Dense":
        u = out_shape[1]
        attrs = {"units": u}
        weights = [
            TensorValue.from_array(np.eye(u, dtype=np.float32)),
            TensorValue.from_array(np.zeros(u, dtype=np.float32)),
        ]
    elif kind == "BatchNorm":
        weights = _identity_bn(out_shape[1])
    elif kind in ("MaxPool", "AvgPool"):
        attrs = {"pool": 1, "stride": 1, "padding": "valid"}
    elif kind == "Pad":
        attrs = {"pads": [0] * (2 * rank), "value": attrs.get("value", 0.0)}
    elif kind == "Reshape":
        attrs = {"shape": [int(d) for d in out_shape]}
    copy = LayerNode(nid, kind, inputs, attrs, weights)
    _rewire(model, site.node_id, nid, skip=nid)
    model.nodes[nid] = copy
    model.regions[nid] = model.regions[site.node_id]


def _edit_ls(model: GraphModel, op, site, rng) -> None:
    _swap_labels(model, site.node_id, site.detail)


def _edit_arfm(model: GraphModel, op, site, rng) -> None:
    _remove_node(model, site.node_id)


def _edit_arfp(model: GraphModel, op, site, rng) -> None:
    node = model.nodes[site.node_id]
    choices = [k for k in ACTIVATION_KINDS if k != node.kind]
    kind = choices[int(rng.integers(len(choices)))]
    node.kind = kind
    node.attrs = {"axis": -1} if kind == "Softmax" else {}


# --- input family ----------------------------------------------------------


def _pick_edge(model: GraphModel, site: MutationSite, rng) -> tuple[int, tuple[int, ...]]:
    node = model.nodes[site.node_id]
    position = 0 if len(node.inputs) == 1 else int(rng.integers(len(node.inputs)))
    ref = node.inputs[position]
    shapes = infer_shapes(model)
    src = model.input.shape if ref == model.input.name else shapes[ref]
    return position, src


def _insert_on_edge(model: GraphModel, site: MutationSite, position: int, chain: list[LayerNode]) -> None:
    node = model.nodes[site.node_id]
    upstream = node.inputs[position]
    for link in chain:
        link.inputs = [upstream]
        model.nodes[link.id] = link
        model.regions[link.id] = model.regions[site.node_id]
        upstream = link.id
    node.inputs[position] = upstream


def _edit_sm(model: GraphModel, op, site, rng) -> None:
    position, src = _pick_edge(model, site, rng)
    rank = len(src)
    axes = list(range(2, rank)) if rank >= 3 else [max(rank - 1, 0)]
    axis = axes[int(rng.integers(len(axes)))]
    scale = op.params["scale"]
    pads = [0] * (2 * rank)
    pads[2 * axis + 1] = src[axis] * (scale - 1)
    grow = LayerNode(
        fresh_id(model, f"{site.node_id}-grow"), "Pad", [], {"pads": pads, "value": 0.0}
    )
    _insert_on_edge(model, site, position, [grow])


def _edit_dm(model: GraphModel, op, site, rng) -> None:
    position, src = _pick_edge(model, site, rng)
    rank = len(src)
    # keep the new axis off the trailing (spatial) axes so a later rank fold
    # for a windowed consumer merges it into channels instead of shrinking H/W
    limit = rank - 2 if rank >= 3 else rank
    at = 1 + int(rng.integers(limit))  # new axis position, after the batch axis
    scale = op.params["scale"]
    lifted = list(src[:at]) + [1] + list(src[at:])
    lift = LayerNode(
        fresh_id(model, f"{site.node_id}-lift"), "Reshape", [], {"shape": lifted}
    )
    pads = [0] * (2 * len(lifted))
    pads[2 * at + 1] = scale - 1
    grow = LayerNode(
        fresh_id(model, f"{site.node_id}-dimgrow"), "Pad", [], {"pads": pads, "value": 0.0}
    )
    _insert_on_edge(model, site, position, [lift, grow])


# --- parameter family ------------------------------------------------------


def pm_candidates(model: GraphModel, nid: str) -> list[tuple[str, object]]:
    """(attribute, value) pairs PM may pick at ``nid``.

    Only values whose shape fallout is absorbed by weight resizing qualify;
    a value that would force adapter insertion (e.g. a stride change feeding
    a residual join) is excluded so parameter edits never alter topology.
    """
    node = model.nodes[nid]
    table = mutable_attrs(node.kind)
    out: list[tuple[str, object]] = []
    for name in sorted(table):
        current = resolved_attrs(node)[name]
        for value in table[name]:
            if value == current:
                continue
            trial = model.copy()
            trial.nodes[nid].attrs[name] = value
            log: list = []
            try:
                repair_in_place(trial, log)
            except GraphError:
                continue
            if any(entry.action.startswith("insert-") for entry in log):
                continue
            out.append((name, value))
    return out


def _edit_pm(model: GraphModel, op, site, rng) -> None:
    node = model.nodes[site.node_id]
    candidates = pm_candidates(model, site.node_id)
    if isinstance(site.detail, str):
        candidates = [(n, v) for n, v in candidates if n == site.detail]
    if not candidates:
        raise SitePreconditionError(f"no parameter change possible at {site.node_id!r}")
    name, value = candidates[int(rng.integers(len(candidates)))]
    node.attrs[name] = value


# --- weight family ---------------------------------------------------------


def _edit_weight(model: GraphModel, op, site, rng) -> None:
    node = model.nodes[site.node_id]
    index = site.detail if isinstance(site.detail, int) else int(rng.integers(len(node.weights)))
    if not 0 <= index < len(node.weights):
        raise SitePreconditionError(f"weight index {index} out of range")
    value = node.weights[index]
    flat = value.array.reshape(-1).copy()
    n = flat.size
    code = op.code

    if code == "WS":
        k = min(n, max(2, int(n * op.params["fraction"])))
        positions = rng.choice(n, size=k, replace=False)
        flat[positions] = flat[positions][rng.permutation(k)]
    elif code == "NS":
        block = max(1, int(n * op.params["fraction"] / 2))
        block = min(block, n // 2)
        if block >= 1:
            i = int(rng.integers(0, n - 2 * block + 1))
            j = int(rng.integers(i + block, n - block + 1))
            tmp = flat[i : i + block].copy()
            flat[i : i + block] = flat[j : j + block]
            flat[j : j + block] = tmp
    elif code == "GF":
        flat += rng.normal(0.0, op.params["sigma"], size=n).astype(np.float32)
    elif code == "NAI":
        count = max(1, int(n * op.params["fraction"]))
        positions = rng.choice(n, size=count, replace=False)
        flat[positions] = -flat[positions]
    elif code == "NEB":
        count = max(1, int(n * op.params["fraction"]))
        positions = rng.choice(n, size=count, replace=False)
        flat[positions] = 0.0
    else:  # pragma: no cover
        raise ValueError(code)

    node.weights[index] = TensorValue.from_array(flat.reshape(value.shape))


_EDITS = {
    "LA": _edit_la,
    "LR": _edit_lr,
    "LC": _edit_lc,
    "LS": _edit_ls,
    "ARFm": _edit_arfm,
    "ARFp": _edit_arfp,
    "SM": _edit_sm,
    "DM": _edit_dm,
    "PM": _edit_pm,
    "WS": _edit_weight,
    "NS": _edit_weight,
    "GF": _edit_weight,
    "NAI": _edit_weight,
    "NEB": _edit_weight,
}
