"""Built-in desk-scale seed model generators.

Three small architectures sized so that a single spatial doubling or a
weight-scale perturbation pushes them across the fault-injection
thresholds used by the testing backends:

* ``tiny-cnn`` — a plain conv stack whose flattened activation sits just
  under 1e5 elements.
* ``tiny-resblock`` — a DAG with an Add join and a Mul gate (squaring
  amplifies upstream perturbations), ending without a squashing layer.
* ``tiny-mlp`` — a dense/activation chain ending in Softmax.

All weights are drawn from the supplied rng; equal seeds give
byte-identical serializations.
"""
from __future__ import annotations

import numpy as np

from .ir import GraphModel, InputSpec, LayerNode, TensorValue, tag_regions

__all__ = ["SEED_KINDS", "generate_seed"]

SEED_KINDS = ("tiny-cnn", "tiny-mlp", "tiny-resblock")


def _he_conv(rng: np.random.Generator, filters: int, in_ch: int, k: int) -> list[TensorValue]:
    fan_in = in_ch * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(filters, in_ch, k, k))
    b = rng.normal(0.0, 0.01, size=(filters,))
    return [TensorValue.from_array(w), TensorValue.from_array(b)]


def _he_dense(rng: np.random.Generator, in_features: int, units: int) -> list[TensorValue]:
    w = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(in_features, units))
    b = rng.normal(0.0, 0.01, size=(units,))
    return [TensorValue.from_array(w), TensorValue.from_array(b)]


def _bn_weights(rng: np.random.Generator, channels: int) -> list[TensorValue]:
    scale = rng.uniform(0.5, 1.5, size=(channels,))
    bias = rng.normal(0.0, 0.2, size=(channels,))
    mean = rng.normal(0.0, 0.5, size=(channels,))
    # variances kept within ~1.5 decades: zeroing one (weight-level
    # mutation) still amplifies its channel ~300x via the 1e-5 epsilon,
    # but unmutated activations stay small enough for float32 interpreters
    # to agree tightly layer by layer
    var = np.exp(rng.uniform(np.log(0.05), np.log(3.0), size=(channels,)))
    return [TensorValue.from_array(t) for t in (scale, bias, mean, var)]


def _conv(nid: str, src: str, rng: np.random.Generator, filters: int, in_ch: int,
          k: int = 3, stride: int = 1, padding: str = "same") -> LayerNode:
    return LayerNode(
        id=nid, kind="Conv2D", inputs=[src],
        attrs={"filters": filters, "kernel": k, "stride": stride, "padding": padding},
        weights=_he_conv(rng, filters, in_ch, k),
    )


def _dense(nid: str, src: str, rng: np.random.Generator, in_features: int, units: int) -> LayerNode:
    return LayerNode(id=nid, kind="Dense", inputs=[src], attrs={"units": units},
                     weights=_he_dense(rng, in_features, units))


def _bn(nid: str, src: str, rng: np.random.Generator, channels: int) -> LayerNode:
    return LayerNode(id=nid, kind="BatchNorm", inputs=[src], attrs={"epsilon": 1e-5},
                     weights=_bn_weights(rng, channels))


def _act(nid: str, kind: str, src: str) -> LayerNode:
    attrs = {"axis": -1} if kind == "Softmax" else {}
    return LayerNode(id=nid, kind=kind, inputs=[src], attrs=attrs)


def _tiny_cnn(rng: np.random.Generator) -> GraphModel:
    # 3x60x60 in, three same-padded convs keep 60x60; flatten carries
    # 16*60*60 = 57600 elements — one spatial doubling crosses 1e5.
    nodes = [
        _conv("conv1", "input", rng, 8, 3),
        _act("relu6_1", "ReLU6", "conv1"),
        _bn("bn1", "relu6_1", rng, 8),
        _conv("conv2", "bn1", rng, 16, 8),
        _act("relu2", "ReLU", "conv2"),
        _bn("bn2", "relu2", rng, 16),
        _conv("conv3", "bn2", rng, 16, 16),
        _act("relu3", "ReLU", "conv3"),
        LayerNode(id="flatten", kind="Flatten", inputs=["relu3"]),
        _dense("dense1", "flatten", rng, 57600, 32),
        _act("relu4", "ReLU", "dense1"),
        _dense("dense2", "relu4", rng, 32, 10),
        _act("softmax", "Softmax", "dense2"),
    ]
    return GraphModel(input=InputSpec("input", (1, 3, 60, 60)),
                      nodes={n.id: n for n in nodes}, outputs=["softmax"])


def _tiny_resblock(rng: np.random.Generator) -> GraphModel:
    # Add join (residual) plus a sigmoid Mul gate; no terminal squashing,
    # so unbounded-magnitude mutants are reachable.
    nodes = [
        _conv("conv0", "input", rng, 8, 4),
        _act("relu0", "ReLU", "conv0"),
        _conv("conv_a", "relu0", rng, 8, 8),
        _bn("bn_a", "conv_a", rng, 8),
        LayerNode(id="add1", kind="Add", inputs=["bn_a", "relu0"]),
        _conv("conv_g", "relu0", rng, 8, 8, k=1),
        _act("sig_g", "Sigmoid", "conv_g"),
        LayerNode(id="mul1", kind="Mul", inputs=["add1", "sig_g"]),
        LayerNode(id="avgpool", kind="AvgPool", inputs=["mul1"], attrs={"pool": 2}),
        _conv("conv_t", "avgpool", rng, 12, 8),
        _act("tanh_t", "Tanh", "conv_t"),
        LayerNode(id="flatten", kind="Flatten", inputs=["tanh_t"]),
        _dense("fc1", "flatten", rng, 768, 16),
        _dense("fc2", "fc1", rng, 16, 6),
    ]
    return GraphModel(input=InputSpec("input", (1, 4, 16, 16)),
                      nodes={n.id: n for n in nodes}, outputs=["fc2"])


def _tiny_mlp(rng: np.random.Generator) -> GraphModel:
    nodes = [
        _dense("d1", "input", rng, 24, 32),
        _act("relu1", "ReLU", "d1"),
        _dense("d2", "relu1", rng, 32, 16),
        _act("tanh1", "Tanh", "d2"),
        _dense("d3", "tanh1", rng, 16, 16),
        _act("relu2", "ReLU", "d3"),
        _dense("d4", "relu2", rng, 16, 10),
        _act("softmax", "Softmax", "d4"),
    ]
    return GraphModel(input=InputSpec("input", (1, 24)),
                      nodes={n.id: n for n in nodes}, outputs=["softmax"])


_BUILDERS = {
    "tiny-cnn": _tiny_cnn,
    "tiny-mlp": _tiny_mlp,
    "tiny-resblock": _tiny_resblock,
}


def generate_seed(kind: str, rng: np.random.Generator) -> GraphModel:
    """Build one of the named seed models, weights drawn from ``rng``."""
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown seed kind {kind!r}; choose from {SEED_KINDS}") from None
    return tag_regions(builder(rng))
