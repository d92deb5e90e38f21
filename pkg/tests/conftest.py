"""Shared fixtures: small hand-built models with known shapes."""
from __future__ import annotations

import numpy as np
import pytest

from graphmut.ir import (
    GraphModel,
    InputSpec,
    LayerNode,
    RegionPolicy,
    TensorValue,
    tag_regions,
)


def t(arr) -> TensorValue:
    return TensorValue.from_array(np.asarray(arr, dtype=np.float32))


def conv_node(nid, src, filters, in_ch, kernel=3, stride=1, padding="same", rng=None):
    rng = rng or np.random.default_rng(0)
    w = rng.normal(0.0, np.sqrt(2.0 / (in_ch * kernel * kernel)), (filters, in_ch, kernel, kernel))
    b = rng.normal(0.0, 0.05, (filters,))
    return LayerNode(
        id=nid,
        kind="Conv2D",
        inputs=[src],
        attrs={"filters": filters, "kernel": kernel, "stride": stride, "padding": padding},
        weights=[t(w), t(b)],
    )


def dense_node(nid, src, in_features, units, rng=None):
    rng = rng or np.random.default_rng(1)
    w = rng.normal(0.0, np.sqrt(2.0 / in_features), (in_features, units))
    b = rng.normal(0.0, 0.05, (units,))
    return LayerNode(id=nid, kind="Dense", inputs=[src], attrs={"units": units}, weights=[t(w), t(b)])


def bn_node(nid, src, channels, rng=None):
    rng = rng or np.random.default_rng(2)
    scale = rng.uniform(0.5, 1.5, (channels,))
    bias = rng.normal(0.0, 0.2, (channels,))
    mean = rng.normal(0.0, 0.5, (channels,))
    var = np.exp(rng.uniform(np.log(0.05), np.log(3.0), (channels,)))
    return LayerNode(
        id=nid,
        kind="BatchNorm",
        inputs=[src],
        attrs={"epsilon": 1e-5},
        weights=[t(scale), t(bias), t(mean), t(var)],
    )


def build_model(input_shape, nodes, outputs, input_name="input", policy=None):
    model = GraphModel(
        input=InputSpec(name=input_name, shape=tuple(input_shape)),
        nodes={n.id: n for n in nodes},
        outputs=list(outputs),
    )
    return tag_regions(model, policy or RegionPolicy())


@pytest.fixture
def small_cnn():
    """input[1,3,8,8] -> conv(4,3x3,same) -> relu -> flatten -> dense(10) -> softmax."""
    rng = np.random.default_rng(7)
    nodes = [
        conv_node("conv1", "input", 4, 3, rng=rng),
        LayerNode(id="relu1", kind="ReLU", inputs=["conv1"]),
        LayerNode(id="flat", kind="Flatten", inputs=["relu1"]),
        dense_node("fc1", "flat", 256, 10, rng=rng),
        LayerNode(id="sm", kind="Softmax", inputs=["fc1"], attrs={"axis": -1}),
    ]
    return build_model((1, 3, 8, 8), nodes, ["sm"])
