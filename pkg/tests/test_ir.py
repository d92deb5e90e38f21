"""Graph IR: shape rules, validation, region tagging.

Shape expectations are hand-derived from the layer definitions (e.g. a 3x3
same-padding conv over [1,3,8,8] with 4 filters keeps 8x8 and sets C=4).
"""
from __future__ import annotations

import numpy as np
import pytest

from graphmut.ir import (
    GraphModel,
    InputSpec,
    LayerNode,
    RegionPolicy,
    RegionTag,
    ShapeMismatchError,
    TensorValue,
    conv_out_dim,
    infer_shapes,
    same_pad_amounts,
    tag_regions,
    validate_graph,
)

from conftest import build_model, conv_node, dense_node, bn_node, t


class TestTensorValue:
    def test_casts_to_float32_flat(self):
        v = TensorValue.from_array([[1, 2], [3, 4]])
        assert v.shape == (2, 2)
        assert v.data.dtype == np.float32
        assert v.data.ndim == 1
        assert v.array.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_buffer_read_only(self):
        v = TensorValue.from_array([1.0, 2.0])
        with pytest.raises(ValueError):
            v.data[0] = 5.0

    def test_equality_is_bitwise(self):
        a = TensorValue.from_array([np.nan, 1.0])
        b = TensorValue.from_array([np.nan, 1.0])
        assert a == b  # same NaN payload bits


class TestShapeRules:
    def test_conv_same_preserves_spatial(self, small_cnn):
        shapes = infer_shapes(small_cnn)
        assert shapes["conv1"] == (1, 4, 8, 8)
        assert shapes["flat"] == (1, 256)
        assert shapes["fc1"] == (1, 10)
        assert shapes["sm"] == (1, 10)

    @pytest.mark.parametrize(
        "size,window,stride,padding,expect",
        [
            (8, 3, 1, "same", 8),
            (8, 3, 1, "valid", 6),
            (8, 3, 2, "same", 4),
            (8, 3, 2, "valid", 3),
            (7, 2, 2, "same", 4),
            (7, 2, 2, "valid", 3),
        ],
    )
    def test_window_arithmetic(self, size, window, stride, padding, expect):
        assert conv_out_dim(size, window, stride, padding) == expect

    def test_same_pad_amounts_put_extra_at_end(self):
        # size 8, window 3, stride 1: total pad 2 -> (1, 1)
        assert same_pad_amounts(8, 3, 1) == (1, 1)
        # size 8, window 2, stride 2: out 4, total = 3*2+2-8 = 0
        assert same_pad_amounts(8, 2, 2) == (0, 0)
        # size 7, window 3, stride 2: out 4, total = 6+3-7 = 2 -> (1,1)
        assert same_pad_amounts(7, 3, 2) == (1, 1)
        # size 6, window 4, stride 2: out 3, total = 4+4-6 = 2 -> (1,1)
        assert same_pad_amounts(6, 4, 2) == (1, 1)
        # odd total goes to the end: size 5, window 2, stride 1 -> out 5, total 1
        assert same_pad_amounts(5, 2, 1) == (0, 1)

    def test_pool_shapes(self):
        nodes = [
            LayerNode(id="mp", kind="MaxPool", inputs=["input"], attrs={"pool": 2}),
            LayerNode(id="ap", kind="AvgPool", inputs=["mp"], attrs={"pool": [3, 3], "stride": 1, "padding": "same"}),
        ]
        m = build_model((1, 2, 8, 8), nodes, ["ap"])
        shapes = infer_shapes(m)
        assert shapes["mp"] == (1, 2, 4, 4)  # stride defaults to pool size
        assert shapes["ap"] == (1, 2, 4, 4)

    def test_pad_reshape_concat(self):
        nodes = [
            LayerNode(id="pad", kind="Pad", inputs=["input"], attrs={"pads": [0, 0, 0, 0, 1, 1, 2, 0], "value": 0.0}),
            LayerNode(id="rs", kind="Reshape", inputs=["pad"], attrs={"shape": [1, 84]}),
            LayerNode(id="cat", kind="Concat", inputs=["rs", "rs"], attrs={"axis": 1}),
        ]
        m = build_model((1, 2, 4, 5), nodes, ["cat"])
        shapes = infer_shapes(m)
        assert shapes["pad"] == (1, 2, 6, 7)  # H: 4+1+1, W: 5+2+0
        assert shapes["rs"] == (1, 84)  # 2*6*7
        assert shapes["cat"] == (1, 168)

    def test_add_requires_equal_shapes(self):
        nodes = [
            LayerNode(id="r1", kind="ReLU", inputs=["input"]),
            LayerNode(id="fl", kind="Flatten", inputs=["input"]),
            LayerNode(id="bad", kind="Add", inputs=["r1", "fl"]),
        ]
        m = build_model((1, 2, 3, 3), nodes, ["bad"])
        with pytest.raises(ShapeMismatchError) as err:
            infer_shapes(m)
        assert err.value.node_id == "bad"

    def test_dense_weight_shape_enforced(self):
        bad = dense_node("fc", "input", in_features=9, units=4)  # input is 8-wide
        m = build_model((1, 8), [bad], ["fc"])
        with pytest.raises(ShapeMismatchError):
            infer_shapes(m)


class TestValidation:
    def test_valid_model_reports_clean(self, small_cnn):
        assert validate_graph(small_cnn).ok

    def test_dangling_edge_named(self, small_cnn):
        broken = small_cnn.copy()
        del broken.nodes["relu1"]
        report = validate_graph(broken)
        assert not report.ok
        assert any("relu1" in msg and nid == "flat" for nid, msg in report.violations)

    def test_cycle_detected(self):
        nodes = [
            LayerNode(id="a", kind="ReLU", inputs=["b"]),
            LayerNode(id="b", kind="ReLU", inputs=["a"]),
        ]
        m = GraphModel(
            input=InputSpec("input", (1, 4)),
            nodes={n.id: n for n in nodes},
            outputs=["b"],
            regions={"a": RegionTag.BACKBONE, "b": RegionTag.BACKBONE},
        )
        report = validate_graph(m)
        assert any("cycle" in msg for _, msg in report.violations)

    def test_unknown_attribute_flagged(self):
        node = LayerNode(id="r", kind="ReLU", inputs=["input"], attrs={"slope": 0.1})
        m = build_model((1, 4), [node], ["r"])
        report = validate_graph(m)
        assert any("slope" in msg for _, msg in report.violations)

    def test_missing_region_flagged(self, small_cnn):
        m = small_cnn.copy()
        m.regions.pop("conv1")
        report = validate_graph(m)
        assert any(nid == "conv1" and "region" in msg for nid, msg in report.violations)

    def test_weights_on_weightless_kind_flagged(self):
        node = LayerNode(id="r", kind="ReLU", inputs=["input"], weights=[t([1.0])])
        m = build_model((1, 4), [node], ["r"])
        assert not validate_graph(m).ok


class TestRegions:
    def test_suffix_heuristic(self, small_cnn):
        regions = small_cnn.regions
        assert regions["fc1"] is RegionTag.TASK_HEAD
        assert regions["sm"] is RegionTag.TASK_HEAD
        assert regions["conv1"] is RegionTag.BACKBONE
        assert regions["relu1"] is RegionTag.BACKBONE
        assert regions["flat"] is RegionTag.BACKBONE  # Flatten is not task-chain

    def test_single_node_model_is_backbone(self):
        m = build_model((1, 8), [dense_node("fc", "input", 8, 4)], ["fc"])
        assert m.regions["fc"] is RegionTag.BACKBONE

    def test_force_policy(self, small_cnn):
        m = tag_regions(small_cnn, RegionPolicy(force=RegionTag.BACKBONE))
        assert all(tag is RegionTag.BACKBONE for tag in m.regions.values())

    def test_overrides_win(self, small_cnn):
        m = tag_regions(small_cnn, RegionPolicy(overrides={"conv1": RegionTag.TASK_HEAD}))
        assert m.regions["conv1"] is RegionTag.TASK_HEAD
        assert m.regions["relu1"] is RegionTag.BACKBONE

    def test_topo_order_deterministic(self, small_cnn):
        assert small_cnn.topo_order() == ["conv1", "relu1", "flat", "fc1", "sm"]
