"""Shape repair: single-adapter reconciliation and weight resizing."""
from __future__ import annotations

import numpy as np
import pytest

from graphmut import native
from graphmut.ir import LayerNode, TensorValue, infer_shapes, validate_graph
from graphmut.repair import RepairFailureError, repair_shapes

from conftest import bn_node, build_model, conv_node, dense_node


def _count(model, kind):
    return sum(1 for n in model.nodes.values() if n.kind == kind)


class TestIdempotence:
    def test_valid_model_untouched(self, small_cnn):
        out = repair_shapes(small_cnn)
        assert out.repair_log == []
        assert native.to_bytes(out.model) == native.to_bytes(small_cnn)

    def test_twice_is_once(self, small_cnn):
        broken = small_cnn.copy()
        broken.nodes["fc1"].attrs["units"] = 7  # forces a weight resize
        once = repair_shapes(broken)
        twice = repair_shapes(once.model)
        assert twice.repair_log == []
        assert native.to_bytes(twice.model) == native.to_bytes(once.model)


class TestAdapters:
    def test_grow_mismatch_gets_one_pad(self):
        rng = np.random.default_rng(0)
        nodes = [
            conv_node("a", "input", 4, 4, kernel=3, padding="same", rng=rng),
            conv_node("b", "input", 4, 4, kernel=3, padding="valid", rng=rng),
            LayerNode(id="join", kind="Add", inputs=["a", "b"]),
        ]
        m = build_model((1, 4, 8, 8), nodes, ["join"])
        with pytest.raises(Exception):
            infer_shapes(m)  # [1,4,8,8] vs [1,4,6,6]
        out = repair_shapes(m)
        assert validate_graph(out.model).ok
        pads = [n for n in out.model.nodes.values() if n.kind == "Pad"]
        assert len(pads) == 1
        assert pads[0].attrs["pads"] == [0, 0, 0, 0, 0, 2, 0, 2]
        assert infer_shapes(out.model)["join"] == (1, 4, 8, 8)

    def test_rank_mismatch_gets_one_reshape(self):
        rng = np.random.default_rng(0)
        nodes = [dense_node("fc", "input", 256, 10, rng=rng)]
        m = build_model((1, 4, 8, 8), nodes, ["fc"])
        out = repair_shapes(m)
        assert validate_graph(out.model).ok
        reshapes = [n for n in out.model.nodes.values() if n.kind == "Reshape"]
        assert len(reshapes) == 1
        assert reshapes[0].attrs["shape"] == [1, 256]
        assert [a.action for a in out.repair_log] == ["insert-reshape"]

    def test_rank5_folds_into_channels_for_conv(self):
        rng = np.random.default_rng(0)
        nodes = [
            LayerNode(id="lift", kind="Reshape", inputs=["input"], attrs={"shape": [1, 2, 2, 6, 6]}),
            conv_node("c", "lift", 8, 4, kernel=3, rng=rng),
        ]
        m = build_model((1, 4, 6, 6), nodes, ["c"])
        out = repair_shapes(m)
        assert validate_graph(out.model).ok
        fits = [n for n in out.model.nodes.values() if n.kind == "Reshape" and n.id != "lift"]
        assert len(fits) == 1 and fits[0].attrs["shape"] == [1, 4, 6, 6]

    def test_pool_window_padded_up(self):
        nodes = [LayerNode(id="mp", kind="MaxPool", inputs=["input"], attrs={"pool": 3})]
        m = build_model((1, 2, 2, 2), nodes, ["mp"])
        out = repair_shapes(m)
        assert validate_graph(out.model).ok
        assert infer_shapes(out.model)["mp"] == (1, 2, 1, 1)
        assert _count(out.model, "Pad") == 1

    def test_irreconcilable_raises(self):
        # [1,3,9,9] vs [1,4,8,8]: unequal counts, neither grows into the other
        rng = np.random.default_rng(0)
        nodes = [
            conv_node("a", "input", 3, 4, kernel=1, padding="valid", rng=rng),
            conv_node("b", "input", 4, 4, kernel=2, padding="valid", rng=rng),
            LayerNode(id="join", kind="Mul", inputs=["a", "b"]),
        ]
        m = build_model((1, 4, 9, 9), nodes, ["join"])
        with pytest.raises(RepairFailureError):
            repair_shapes(m)

    def test_adapter_inherits_consumer_region(self):
        rng = np.random.default_rng(0)
        nodes = [dense_node("fc", "input", 256, 10, rng=rng)]
        m = build_model((1, 4, 8, 8), nodes, ["fc"])
        out = repair_shapes(m)
        adapter = out.repair_log[0].node_id
        assert out.model.regions[adapter] == out.model.regions["fc"]


class TestFitting:
    def test_dense_rows_zero_padded(self):
        rng = np.random.default_rng(1)
        nodes = [dense_node("fc", "input", 200, 10, rng=rng)]
        m = build_model((1, 256), nodes, ["fc"])
        out = repair_shapes(m)
        assert validate_graph(out.model).ok
        w = out.model.nodes["fc"].weights[0].array
        assert w.shape == (256, 10)
        assert np.all(w[200:] == 0.0)
        assert [a.action for a in out.repair_log] == ["weight-fit"]

    def test_batchnorm_padding_is_neutral(self):
        rng = np.random.default_rng(1)
        nodes = [bn_node("bn", "input", 4, rng=rng)]
        m = build_model((1, 6, 5, 5), nodes, ["bn"])
        out = repair_shapes(m)
        scale, bias, mean, var = (w.array for w in out.model.nodes["bn"].weights)
        assert scale.shape == (6,)
        assert np.all(scale[4:] == 1.0) and np.all(var[4:] == 1.0)
        assert np.all(bias[4:] == 0.0) and np.all(mean[4:] == 0.0)

    def test_conv_channels_truncated(self):
        rng = np.random.default_rng(1)
        nodes = [conv_node("c", "input", 4, 8, kernel=3, rng=rng)]
        m = build_model((1, 5, 8, 8), nodes, ["c"])
        out = repair_shapes(m)
        assert out.model.nodes["c"].weights[0].shape == (4, 5, 3, 3)
        assert validate_graph(out.model).ok

    def test_reshape_target_rewritten(self):
        nodes = [LayerNode(id="rs", kind="Reshape", inputs=["input"], attrs={"shape": [1, 999]})]
        m = build_model((1, 4, 8, 8), nodes, ["rs"])
        out = repair_shapes(m)
        assert out.model.nodes["rs"].attrs["shape"] == [1, 4, 8, 8]
        assert [a.action for a in out.repair_log] == ["attr-fit"]

    def test_weight_fit_keeps_overlap_bits(self):
        rng = np.random.default_rng(1)
        nodes = [dense_node("fc", "input", 200, 10, rng=rng)]
        before = nodes[0].weights[0].array.copy()
        m = build_model((1, 256), nodes, ["fc"])
        out = repair_shapes(m)
        after = out.model.nodes["fc"].weights[0].array
        assert np.array_equal(after[:200], before)
