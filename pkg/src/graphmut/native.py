"""Native model serialization: canonical JSON with base64 float32 weights.

The byte output is canonical (sorted keys, no whitespace), so equal models
serialize identically and a model fingerprint is just the SHA-256 of its
serialized form.
"""
from __future__ import annotations

import base64
import hashlib
import json

import numpy as np

from .ir import GraphModel, InputSpec, LayerNode, RegionTag, TensorValue

FORMAT_NAME = "graphmut-model"
FORMAT_VERSION = 1


class ModelFormatError(Exception):
    """Raised when bytes do not parse as a native model file."""


def _tensor_to_obj(t: TensorValue) -> dict:
    return {
        "shape": list(t.shape),
        "b64": base64.b64encode(np.ascontiguousarray(t.data, dtype="<f4").tobytes()).decode("ascii"),
    }


def _tensor_from_obj(obj: dict) -> TensorValue:
    raw = base64.b64decode(obj["b64"])
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    shape = tuple(int(d) for d in obj["shape"])
    if int(np.prod(shape, dtype=np.int64)) != arr.size:
        raise ModelFormatError(f"weight buffer holds {arr.size} floats, shape {shape} needs {np.prod(shape)}")
    return TensorValue.from_array(arr.reshape(shape))


def to_bytes(model: GraphModel) -> bytes:
    """Canonical serialized form of a model."""
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "input": {"name": model.input.name, "shape": list(model.input.shape)},
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "inputs": list(n.inputs),
                "attrs": n.attrs,
                "weights": [_tensor_to_obj(w) for w in n.weights],
            }
            for n in (model.nodes[nid] for nid in model.topo_order())
        ],
        "outputs": list(model.outputs),
        "regions": {nid: tag.value for nid, tag in sorted(model.regions.items())},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def from_bytes(raw: bytes) -> GraphModel:
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"not a model file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelFormatError("missing format marker")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {doc.get('version')!r}")
    try:
        nodes: dict[str, LayerNode] = {}
        for obj in doc["nodes"]:
            node = LayerNode(
                id=obj["id"],
                kind=obj["kind"],
                inputs=list(obj["inputs"]),
                attrs=dict(obj.get("attrs", {})),
                weights=[_tensor_from_obj(w) for w in obj.get("weights", [])],
            )
            nodes[node.id] = node
        model = GraphModel(
            input=InputSpec(name=doc["input"]["name"], shape=tuple(int(d) for d in doc["input"]["shape"])),
            nodes=nodes,
            outputs=list(doc["outputs"]),
            regions={nid: RegionTag(tag) for nid, tag in doc.get("regions", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc
    return model


def save(model: GraphModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load(path) -> GraphModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def fingerprint(model: GraphModel) -> str:
    """SHA-256 hex digest of the canonical serialization."""
    return hashlib.sha256(to_bytes(model)).hexdigest()
