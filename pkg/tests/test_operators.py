"""Mutation operators: site sets, per-operator semantics, and family laws."""
from __future__ import annotations

import math

import numpy as np
import pytest

from graphmut import native, operators as ops
from graphmut.ir import ACTIVATION_KINDS, LayerNode, infer_shapes, validate_graph
from graphmut.repair import RepairFailureError
from graphmut.seeds import SEED_KINDS, generate_seed

from conftest import build_model, dense_node

MODELS = {kind: generate_seed(kind, np.random.default_rng(7)) for kind in SEED_KINDS}
_SITE_CACHE: dict[tuple[str, str], list] = {}


def sites_for(kind: str, op: ops.MutationOperator):
    key = (kind, op.code)
    if key not in _SITE_CACHE:
        _SITE_CACHE[key] = ops.applicable_sites(MODELS[kind], op)
    return _SITE_CACHE[key]


class TestFactory:
    def test_catalog_has_all_fourteen(self):
        cat = ops.catalog()
        assert [o.code for o in cat] == list(ops.OPERATOR_CODES)
        assert len(cat) == 14

    def test_family_grouping(self):
        fams = {o.code: o.family for o in ops.catalog()}
        assert {c: "structure" for c in ("LA", "LR", "LC", "LS", "ARFm", "ARFp")}.items() <= fams.items()
        assert fams["SM"] == fams["DM"] == "input"
        assert fams["PM"] == "parameter"
        assert all(fams[c] == "weight" for c in ("WS", "NS", "GF", "NAI", "NEB"))

    def test_defaults(self):
        assert ops.make_operator("GF").params["sigma"] == 0.1
        assert ops.make_operator("NEB").params["fraction"] == 0.3
        assert ops.make_operator("SM").params["scale"] == 2

    @pytest.mark.parametrize(
        "code,bad",
        [("SM", {"scale": 1}), ("DM", {"scale": 0}), ("NEB", {"fraction": 0.0}),
         ("WS", {"fraction": 1.5}), ("GF", {"sigma": -1.0})],
    )
    def test_bad_params_rejected(self, code, bad):
        with pytest.raises(ValueError):
            ops.make_operator(code, **bad)

    def test_unknown_code_rejected(self):
        with pytest.raises(ValueError):
            ops.make_operator("XX")


class TestSiteSets:
    def test_activation_removal_empty_on_pure_mlp(self):
        rng = np.random.default_rng(0)
        m = build_model((1, 8), [dense_node("d1", "input", 8, 8, rng=rng),
                                 dense_node("d2", "d1", 8, 4, rng=rng)], ["d2"])
        assert ops.applicable_sites(m, ops.make_operator("ARFm")) == []
        assert ops.applicable_sites(m, ops.make_operator("ARFp")) == []

    def test_removal_bounded_by_node_count(self, small_cnn):
        sites = ops.applicable_sites(small_cnn, ops.make_operator("LR"))
        assert 0 < len(sites) <= len(small_cnn.nodes)

    def test_noise_sites_are_the_weight_holders(self):
        m = MODELS["tiny-cnn"]
        sites = sites_for("tiny-cnn", ops.make_operator("GF"))
        assert {s.node_id for s in sites} == {
            "conv1", "conv2", "conv3", "bn1", "bn2", "dense1", "dense2"
        }
        assert all(m.nodes[s.node_id].weights for s in sites)

    def test_ordering_deterministic(self, small_cnn):
        for code in ops.OPERATOR_CODES:
            op = ops.make_operator(code)
            assert ops.applicable_sites(small_cnn, op) == ops.applicable_sites(small_cnn, op)

    def test_insertion_sites_exclude_outputs(self, small_cnn):
        for code in ("LA", "LC", "SM", "DM"):
            sites = ops.applicable_sites(small_cnn, ops.make_operator(code))
            assert "sm" not in {s.node_id for s in sites}

    def test_switch_sites_are_ordered_pairs(self, small_cnn):
        sites = ops.applicable_sites(small_cnn, ops.make_operator("LS"))
        assert sites
        for s in sites:
            assert s.node_id < s.detail


class TestApplyExamples:
    def test_removal_on_chain(self, small_cnn):
        out = ops.apply(small_cnn, ops.make_operator("LR"), ops.MutationSite("relu1"),
                        np.random.default_rng(0))
        assert len(out.model.nodes) == 4
        assert validate_graph(out.model).ok
        assert out.model.nodes["flat"].inputs == ["conv1"]

    def test_noise_magnitude_half_normal(self):
        m = MODELS["tiny-cnn"]
        op = ops.make_operator("GF")  # sigma 0.1
        out = ops.apply(m, op, ops.MutationSite("dense1", 0), np.random.default_rng(5))
        before = m.nodes["dense1"].weights[0].array
        after = out.model.nodes["dense1"].weights[0].array
        assert before.shape == after.shape and before.size >= 10_000
        mean_abs = float(np.mean(np.abs(after.astype(np.float64) - before)))
        expected = 0.1 * math.sqrt(2.0 / math.pi)
        assert abs(mean_abs - expected) / expected < 0.10

    def test_shuffle_preserves_multiset(self, small_cnn):
        out = ops.apply(small_cnn, ops.make_operator("WS"), ops.MutationSite("fc1", 0),
                        np.random.default_rng(1))
        before = np.sort(small_cnn.nodes["fc1"].weights[0].array, axis=None)
        after = np.sort(out.model.nodes["fc1"].weights[0].array, axis=None)
        assert np.array_equal(before, after)
        assert not np.array_equal(small_cnn.nodes["fc1"].weights[0].array,
                                  out.model.nodes["fc1"].weights[0].array)

    def test_input_growth_repairs_downstream(self):
        m = MODELS["tiny-cnn"]
        out = ops.apply(m, ops.make_operator("SM"), ops.MutationSite("conv2"),
                        np.random.default_rng(2))
        assert out.repair_log
        assert validate_graph(out.model).ok
        grown = sum(math.prod(s) for s in infer_shapes(out.model).values())
        base = sum(math.prod(s) for s in infer_shapes(m).values())
        assert grown > base

    def test_dimension_insertion_creates_rank5_pad(self):
        m = MODELS["tiny-cnn"]
        out = ops.apply(m, ops.make_operator("DM"), ops.MutationSite("conv2"),
                        np.random.default_rng(3))
        shapes = infer_shapes(out.model)
        rank5_pads = [
            n for n in out.model.nodes.values()
            if n.kind == "Pad" and len(shapes[n.inputs[0]]) == 5
        ]
        assert rank5_pads
        assert validate_graph(out.model).ok

    def test_activation_replacement(self, small_cnn):
        out = ops.apply(small_cnn, ops.make_operator("ARFp"), ops.MutationSite("relu1"),
                        np.random.default_rng(4))
        kind = out.model.nodes["relu1"].kind
        assert kind in ACTIVATION_KINDS and kind != "ReLU"
        if kind == "Softmax":
            assert out.model.nodes["relu1"].attrs == {"axis": -1}

    def test_parameter_flip_resizes_dense(self, small_cnn):
        out = ops.apply(small_cnn, ops.make_operator("PM"), ops.MutationSite("fc1", "units"),
                        np.random.default_rng(5))
        units = out.model.nodes["fc1"].attrs["units"]
        assert units in (8, 16, 32, 64)
        assert out.model.nodes["fc1"].weights[0].shape == (256, units)
        assert validate_graph(out.model).ok

    def test_insertion_is_shape_neutral(self, small_cnn):
        out = ops.apply(small_cnn, ops.make_operator("LA"), ops.MutationSite("conv1"),
                        np.random.default_rng(6))
        assert len(out.model.nodes) == len(small_cnn.nodes) + 1
        assert infer_shapes(out.model)["sm"] == infer_shapes(small_cnn)["sm"]

    def test_switch_exchanges_positions(self, small_cnn):
        out = ops.apply(small_cnn, ops.make_operator("LS"),
                        ops.MutationSite("conv1", "relu1"), np.random.default_rng(7))
        assert validate_graph(out.model).ok
        order = out.model.topo_order()
        assert order.index("relu1") < order.index("conv1")
        assert len(out.model.nodes) == len(small_cnn.nodes)

    def test_purity_and_seed_determinism(self, small_cnn):
        frozen = native.to_bytes(small_cnn)
        for code in ops.OPERATOR_CODES:
            op = ops.make_operator(code)
            sites = ops.applicable_sites(small_cnn, op)
            assert sites, code
            a = ops.apply(small_cnn, op, sites[0], np.random.default_rng(42))
            b = ops.apply(small_cnn, op, sites[0], np.random.default_rng(42))
            assert native.to_bytes(a.model) == native.to_bytes(b.model), code
            assert a.repair_log == b.repair_log, code
        assert native.to_bytes(small_cnn) == frozen

    @pytest.mark.parametrize(
        "code,site",
        [("ARFm", ops.MutationSite("conv1")),
         ("GF", ops.MutationSite("relu1")),
         ("LS", ops.MutationSite("conv1")),
         ("LA", ops.MutationSite("sm")),
         ("WS", ops.MutationSite("ghost"))],
    )
    def test_bad_sites_rejected(self, small_cnn, code, site):
        with pytest.raises(ops.SitePreconditionError):
            ops.apply(small_cnn, ops.make_operator(code), site, np.random.default_rng(0))


class TestWeightEditCounts:
    def test_zeroing_count_and_strict_decrease(self, small_cnn):
        out = ops.apply(small_cnn, ops.make_operator("NEB"), ops.MutationSite("fc1", 1),
                        np.random.default_rng(8))
        before = small_cnn.nodes["fc1"].weights[1].array
        after = out.model.nodes["fc1"].weights[1].array
        assert np.count_nonzero(before) == before.size  # no zeros to start
        assert np.count_nonzero(after) == before.size - max(1, int(before.size * 0.3))

    def test_inversion_preserves_magnitudes(self, small_cnn):
        out = ops.apply(small_cnn, ops.make_operator("NAI"), ops.MutationSite("fc1", 1),
                        np.random.default_rng(9))
        before = small_cnn.nodes["fc1"].weights[1].array
        after = out.model.nodes["fc1"].weights[1].array
        assert np.array_equal(np.abs(before), np.abs(after))
        flipped = int(np.sum(before != after))
        assert flipped == max(1, int(before.size * 0.3))

    def test_block_swap_preserves_multiset(self, small_cnn):
        out = ops.apply(small_cnn, ops.make_operator("NS"), ops.MutationSite("fc1", 0),
                        np.random.default_rng(10))
        before = small_cnn.nodes["fc1"].weights[0].array
        after = out.model.nodes["fc1"].weights[0].array
        assert np.array_equal(np.sort(before, axis=None), np.sort(after, axis=None))
        assert not np.array_equal(before, after)


def _topology(model):
    return {nid: (n.kind, tuple(n.inputs)) for nid, n in model.nodes.items()}


@pytest.mark.parametrize("code", ops.OPERATOR_CODES)
def test_family_laws(code):
    """200 randomized trials per operator across all seed models."""
    op = ops.make_operator(code)
    failures = 0
    successes = 0
    base_elements = {
        kind: sum(math.prod(s) for s in infer_shapes(m).values()) for kind, m in MODELS.items()
    }
    for i in range(200):
        kind = SEED_KINDS[i % len(SEED_KINDS)]
        model = MODELS[kind]
        sites = sites_for(kind, op)
        assert sites, f"{code} has no sites on {kind}"
        rng = np.random.default_rng(900_000 + i)
        site = sites[int(rng.integers(len(sites)))]
        try:
            out = ops.apply(model, op, site, rng)
        except RepairFailureError:
            assert code in ("SM", "DM"), f"{code} must not hit repair failures on seeds"
            failures += 1
            continue
        successes += 1
        assert validate_graph(out.model).violations == []
        delta = len(out.model.nodes) - len(model.nodes)
        inserted = len(out.inserted_adapters)

        if code in ("LA", "LC"):
            assert delta == 1 + inserted
        elif code == "LR":
            assert delta == -1 + inserted
        elif code == "ARFm":
            assert delta == -1 and inserted == 0
        elif code in ("LS", "ARFp"):
            assert delta == 0 and inserted == 0
        elif code in ("SM", "DM"):
            total = sum(math.prod(s) for s in infer_shapes(out.model).values())
            assert total > base_elements[kind]
        else:  # PM and the weight family keep topology fixed
            assert _topology(out.model) == _topology(model)
            if code != "PM":
                for nid, node in model.nodes.items():
                    mutated = out.model.nodes[nid]
                    assert [w.shape for w in node.weights] == [w.shape for w in mutated.weights]
                    if code == "WS":
                        for w_old, w_new in zip(node.weights, mutated.weights):
                            assert np.array_equal(
                                np.sort(w_old.array, axis=None), np.sort(w_new.array, axis=None)
                            )
    assert successes >= 150
