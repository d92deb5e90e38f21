"""Interpreter backends: kernels, traces, fault injection, adapter client."""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

from graphmut.backends import (
    AdapterHandle,
    AdapterLostError,
    CaptureOptions,
    ExecutionTrace,
    FaultSpec,
    ProtocolViolationError,
    StageStatus,
    estimate_peak_mem,
    external_execute,
    faulty_interpret,
    optimized_interpret,
    reference_interpret,
    run_interpreter,
)
from graphmut.backends.faulty import CONV_NAN_THRESHOLD, FLATTEN_ALLOC_LIMIT
from graphmut.ir import GraphModel, InputSpec, LayerNode, TensorValue, infer_shapes
from graphmut.seeds import SEED_KINDS, generate_seed

from conftest import build_model, conv_node, dense_node, t

STUB = Path(__file__).parent / "stub_adapter.py"


def rand_input(model: GraphModel, seed: int = 0) -> TensorValue:
    rng = np.random.default_rng(seed)
    return TensorValue.from_array(rng.normal(0.0, 1.0, model.input.shape).astype(np.float32))


def single_node_model(node: LayerNode, input_shape, outputs=None):
    return build_model(input_shape, [node], outputs or [node.id])


class TestTraceTypes:
    def test_stage_helpers(self):
        trace = ExecutionTrace(backend_id="x")
        trace.stage_status["build"] = StageStatus("ok")
        trace.stage_status["load"] = StageStatus("crash", signature="KeyError", node_id="n1")
        assert trace.crashed
        assert trace.crash_stage == "load"
        assert trace.crash_signature == "KeyError"
        assert trace.crash_node == "n1"
        assert not trace.completed
        trace.check_invariants()

    def test_invariant_violation_detected(self):
        trace = ExecutionTrace(backend_id="x")
        trace.stage_status["build"] = StageStatus("crash", signature="boom")
        trace.stage_status["infer"] = StageStatus("ok")
        with pytest.raises(AssertionError):
            trace.check_invariants()

    def test_nan_nodes_ordering(self):
        trace = ExecutionTrace(backend_id="x")
        trace.layer_outputs["a"] = t([1.0, 2.0])
        trace.layer_outputs["b"] = t([np.nan])
        trace.layer_outputs["c"] = t([np.inf])
        assert trace.nan_nodes() == ["b", "c"]

    def test_fault_spec_validation(self):
        with pytest.raises(ValueError):
            FaultSpec(flatten_slowdown=1.0)
        with pytest.raises(ValueError):
            FaultSpec(mul_inconsistency=0.0)
        spec = FaultSpec(pad_crash=True, flatten_slowdown=1.5)
        assert set(spec.active) == {"pad-crash", "flatten-slowdown"}
        assert bool(spec) and not bool(FaultSpec())

    def test_fault_spec_from_config(self):
        spec = FaultSpec.from_config(["pad-crash", "conv-nan-emit"])
        assert spec.pad_crash and spec.conv_nan_emit
        spec = FaultSpec.from_config({"flatten-slowdown": 1.4586, "mul-inconsistency": 0.01})
        assert spec.flatten_slowdown == pytest.approx(1.4586)
        assert spec.mul_inconsistency == pytest.approx(0.01)
        with pytest.raises(ValueError, match="unknown fault"):
            FaultSpec.from_config({"bogus": True})
        with pytest.raises(ValueError, match="numeric parameter"):
            FaultSpec.from_config({"flatten-slowdown": True})

    def test_capture_options_validation(self):
        with pytest.raises(ValueError):
            CaptureOptions(timing_mode="guess")
        with pytest.raises(ValueError):
            CaptureOptions(wall_repeats=0)


class TestCostModel:
    def test_conv_virtual_time(self):
        model = generate_seed("tiny-cnn", np.random.default_rng(3))
        trace = reference_interpret(model, rand_input(model))
        # conv2: 16x60x60 outputs, 3x3 kernel over 8 channels
        assert trace.layer_times["conv2"] == pytest.approx(57600 * 9 * 8 / 1e6)
        # softmax touches each of its 10 outputs three times
        assert trace.layer_times["softmax"] == pytest.approx(3 * 10 / 1e6)
        assert trace.total_ms == pytest.approx(sum(trace.layer_times.values()))

    def test_pool_virtual_time(self):
        model = generate_seed("tiny-resblock", np.random.default_rng(3))
        trace = reference_interpret(model, rand_input(model))
        # avgpool: 8x8x8 outputs, 2x2 window
        assert trace.layer_times["avgpool"] == pytest.approx(8 * 8 * 8 * 4 / 1e6)

    def test_peak_mem_hand_case(self):
        model = build_model((1, 4), [
            dense_node("d1", "input", 4, 8),
            LayerNode(id="relu", kind="ReLU", inputs=["d1"]),
            dense_node("d2", "relu", 8, 2),
        ], ["d2"])
        # weights: (4*8+8 + 8*2+2) floats = 232 bytes. Activation high-water
        # is d1 alive alongside relu (8+8 floats = 64 bytes); the input is
        # freed after d1, d2's output is never freed.
        assert estimate_peak_mem(model, infer_shapes(model)) == 232 + 64

    def test_timing_off(self):
        model = generate_seed("tiny-mlp", np.random.default_rng(3))
        trace = reference_interpret(model, rand_input(model), CaptureOptions(timing=False))
        assert trace.layer_times == {} and trace.total_ms == 0.0

    def test_wall_mode_times_are_positive(self):
        model = generate_seed("tiny-mlp", np.random.default_rng(3))
        trace = reference_interpret(
            model, rand_input(model), CaptureOptions(timing_mode="wall", wall_repeats=3)
        )
        assert set(trace.layer_times) == set(model.nodes)
        assert all(v >= 0.0 for v in trace.layer_times.values())


class TestReferenceKernels:
    def test_identity_conv(self):
        eye = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for i in range(3):
            eye[i, i, 0, 0] = 1.0
        node = LayerNode(id="c", kind="Conv2D", inputs=["input"],
                         attrs={"filters": 3, "kernel": 1},
                         weights=[t(eye), t(np.zeros(3))])
        model = single_node_model(node, (1, 3, 5, 5))
        x = rand_input(model, 4)
        trace = reference_interpret(model, x)
        assert trace.layer_outputs["c"] == x

    def test_relu_definition(self):
        node = LayerNode(id="r", kind="ReLU", inputs=["input"])
        trace = reference_interpret(single_node_model(node, (1, 3)), t([[-1.0, 0.0, 2.0]]))
        assert trace.layer_outputs["r"].array.tolist() == [[0.0, 0.0, 2.0]]

    def test_relu6_nan_propagates(self):
        node = LayerNode(id="r6", kind="ReLU6", inputs=["input"])
        trace = reference_interpret(single_node_model(node, (1, 2)), t([[7.0, np.nan]]))
        out = trace.layer_outputs["r6"].array.ravel()
        assert out[0] == 6.0
        assert np.isnan(out[1])

    def test_strided_valid_conv_values(self):
        node = LayerNode(id="c", kind="Conv2D", inputs=["input"],
                         attrs={"filters": 1, "kernel": 2, "stride": 2, "padding": "valid"},
                         weights=[t(np.ones((1, 1, 2, 2))), t([0.0])])
        x = t(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        trace = reference_interpret(single_node_model(node, (1, 1, 4, 4)), x)
        assert trace.layer_outputs["c"].array.reshape(2, 2).tolist() == [[10.0, 18.0], [42.0, 50.0]]

    def test_avg_pool_same_padding_excludes_pad_cells(self):
        node = LayerNode(id="p", kind="AvgPool", inputs=["input"],
                         attrs={"pool": 2, "stride": 2, "padding": "same"})
        x = t(np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3))
        trace = reference_interpret(single_node_model(node, (1, 1, 3, 3)), x)
        assert trace.layer_outputs["p"].array.reshape(2, 2).tolist() == [[3.0, 4.5], [7.5, 9.0]]

    def test_max_pool_same_padding_handles_negatives(self):
        node = LayerNode(id="p", kind="MaxPool", inputs=["input"],
                         attrs={"pool": 2, "stride": 2, "padding": "same"})
        x = t(np.full((1, 1, 3, 3), -5.0))
        trace = reference_interpret(single_node_model(node, (1, 1, 3, 3)), x)
        assert np.all(trace.layer_outputs["p"].array == -5.0)

    def test_softmax_stability_and_normalization(self):
        node = LayerNode(id="s", kind="Softmax", inputs=["input"])
        trace = reference_interpret(single_node_model(node, (1, 2)), t([[1000.0, 1000.5]]))
        out = trace.layer_outputs["s"].array.ravel()
        assert np.all(np.isfinite(out))
        assert out.sum() == pytest.approx(1.0, abs=1e-6)
        assert out[1] / out[0] == pytest.approx(np.exp(0.5), rel=1e-5)

    def test_dense_known_values(self):
        node = LayerNode(id="d", kind="Dense", inputs=["input"], attrs={"units": 2},
                         weights=[t([[1.0, 2.0], [3.0, 4.0]]), t([10.0, 20.0])])
        trace = reference_interpret(single_node_model(node, (1, 2)), t([[1.0, 1.0]]))
        assert trace.layer_outputs["d"].array.tolist() == [[14.0, 26.0]]

    def test_pad_value_and_widths(self):
        node = LayerNode(id="p", kind="Pad", inputs=["input"],
                         attrs={"pads": [0, 0, 1, 2], "value": 9.0})
        trace = reference_interpret(single_node_model(node, (1, 2)), t([[5.0, 6.0]]))
        assert trace.layer_outputs["p"].array.tolist() == [[9.0, 5.0, 6.0, 9.0, 9.0]]

    def test_batchnorm_definition(self):
        node = LayerNode(id="b", kind="BatchNorm", inputs=["input"], attrs={"epsilon": 0.0},
                         weights=[t([2.0]), t([1.0]), t([3.0]), t([4.0])])
        trace = reference_interpret(single_node_model(node, (1, 1)), t([[7.0]]))
        # 2 * (7 - 3) / sqrt(4) + 1
        assert trace.layer_outputs["b"].array.ravel()[0] == pytest.approx(5.0)


class TestCrashContainment:
    def test_dangling_edge_is_build_crash(self):
        model = build_model((1, 4), [
            LayerNode(id="r", kind="ReLU", inputs=["ghost"]),
        ], ["r"])
        trace = reference_interpret(model, t([[1.0, 2.0, 3.0, 4.0]]))
        assert trace.crash_stage == "build"
        assert trace.crash_signature == "invalid-graph"
        assert "load" not in trace.stage_status and "infer" not in trace.stage_status
        trace.check_invariants()

    def test_input_shape_mismatch_is_build_crash(self):
        model = generate_seed("tiny-mlp", np.random.default_rng(3))
        trace = reference_interpret(model, t([[1.0, 2.0]]))
        assert trace.crash_stage == "build"
        assert trace.crash_signature == "input-shape-mismatch"

    def test_missing_kernel_is_load_crash(self):
        model = generate_seed("tiny-mlp", np.random.default_rng(3))
        trace = run_interpreter(model, rand_input(model), {}, "empty")
        assert trace.crash_stage == "load"
        assert trace.crash_signature == "KeyError"

    def test_raising_kernel_is_infer_crash_with_prefix(self):
        model = generate_seed("tiny-mlp", np.random.default_rng(3))

        def boom(inputs, node, weights, attrs):
            raise RuntimeError("kernel exploded")

        from graphmut.backends import REFERENCE_KERNELS

        table = dict(REFERENCE_KERNELS, Tanh=boom)
        trace = run_interpreter(model, rand_input(model), table, "boom")
        assert trace.crash_stage == "infer"
        assert trace.crash_signature == "RuntimeError"
        assert trace.crash_node == "tanh1"
        # the prefix before the explosion is captured, nothing after
        assert "d2" in trace.layer_outputs
        assert "tanh1" not in trace.layer_outputs and "d4" not in trace.layer_outputs
        trace.check_invariants()


class TestBackendAgreement:
    @pytest.mark.parametrize("kind", SEED_KINDS)
    def test_reference_vs_optimized_quick(self, kind):
        model = generate_seed(kind, np.random.default_rng(3))
        for i in range(10):
            x = rand_input(model, 100 + i)
            ref = reference_interpret(model, x)
            opt = optimized_interpret(model, x)
            assert ref.completed and opt.completed
            for nid, value in ref.layer_outputs.items():
                gap = np.max(np.abs(value.array - opt.layer_outputs[nid].array))
                assert gap < 1e-4, f"{kind}:{nid} diverged by {gap}"

    def test_zero_input_bit_equal_on_linear_layers(self):
        # bias-free conv/dense: zeros must ride through both interpreters
        # without either path introducing an offset
        rng = np.random.default_rng(5)
        conv = LayerNode(id="c", kind="Conv2D", inputs=["input"],
                         attrs={"filters": 3, "kernel": 3},
                         weights=[t(rng.normal(0, 1, (3, 2, 3, 3))), t(np.zeros(3))])
        dense = LayerNode(id="d", kind="Dense", inputs=["f"], attrs={"units": 5},
                          weights=[t(rng.normal(0, 1, (48, 5))), t(np.zeros(5))])
        model = build_model((1, 2, 4, 4), [
            conv,
            LayerNode(id="f", kind="Flatten", inputs=["c"]),
            dense,
        ], ["d"])
        x = t(np.zeros((1, 2, 4, 4)))
        ref = reference_interpret(model, x)
        opt = optimized_interpret(model, x)
        for nid in model.nodes:
            assert ref.layer_outputs[nid] == opt.layer_outputs[nid]
            assert not np.any(ref.layer_outputs[nid].data)

    def test_determinism(self):
        model = generate_seed("tiny-resblock", np.random.default_rng(3))
        x = rand_input(model, 9)
        a = reference_interpret(model, x)
        b = reference_interpret(model, x)
        assert a.layer_outputs == b.layer_outputs
        assert a.layer_times == b.layer_times
        assert a.total_ms == b.total_ms and a.peak_mem_bytes == b.peak_mem_bytes


class TestFaultInjection:
    def test_no_faults_equals_reference(self):
        model = generate_seed("tiny-cnn", np.random.default_rng(3))
        x = rand_input(model)
        ref = reference_interpret(model, x)
        none = faulty_interpret(model, x, FaultSpec())
        assert none.backend_id == "faulty"
        assert none.layer_outputs == ref.layer_outputs
        assert none.layer_times == ref.layer_times

    def test_relu6_nan_mishandle(self):
        node = LayerNode(id="r6", kind="ReLU6", inputs=["input"])
        model = single_node_model(node, (1, 3))
        x = t([[7.0, np.nan, -2.0]])
        ref = reference_interpret(model, x).layer_outputs["r6"].array.ravel()
        bad = faulty_interpret(model, x, FaultSpec(relu6_nan_mishandle=True))
        out = bad.layer_outputs["r6"].array.ravel()
        assert np.isnan(ref[1])
        assert out.tolist() == [6.0, 6.0, 0.0]

    def test_conv_nan_emit_only_over_threshold(self):
        node = LayerNode(id="c", kind="Conv2D", inputs=["input"],
                         attrs={"filters": 1, "kernel": 1},
                         weights=[t(np.full((1, 1, 1, 1), 100.0)), t([0.0])])
        model = single_node_model(node, (1, 1, 1, 2))
        x = t(np.array([[[[200.0, 1.0]]]]))  # outputs 20000 and 100
        out = faulty_interpret(model, x, FaultSpec(conv_nan_emit=True)).layer_outputs["c"]
        values = out.array.ravel()
        assert np.isnan(values[0]) and values[1] == 100.0
        ref = reference_interpret(model, x).layer_outputs["c"].array.ravel()
        assert ref[0] == 20000.0

    def test_pad_crash_on_high_rank_only(self):
        rank5 = LayerNode(id="p", kind="Pad", inputs=["input"],
                          attrs={"pads": [0] * 10, "value": 0.0})
        model5 = single_node_model(rank5, (1, 2, 2, 2, 2))
        x5 = t(np.ones((1, 2, 2, 2, 2)))
        spec = FaultSpec(pad_crash=True)
        crashed = faulty_interpret(model5, x5, spec)
        assert crashed.crash_stage == "infer"
        assert crashed.crash_signature == "pad-crash"
        assert crashed.crash_node == "p"
        assert reference_interpret(model5, x5).completed

        rank4 = LayerNode(id="p", kind="Pad", inputs=["input"],
                          attrs={"pads": [0] * 8, "value": 0.0})
        model4 = single_node_model(rank4, (1, 2, 2, 2))
        assert faulty_interpret(model4, t(np.ones((1, 2, 2, 2))), spec).completed

    def test_flatten_alloc_fail_threshold(self):
        big = single_node_model(LayerNode(id="f", kind="Flatten", inputs=["input"]),
                                (1, 3, 200, 200))
        xb = t(np.zeros((1, 3, 200, 200)))
        spec = FaultSpec(flatten_alloc_fail=True)
        trace = faulty_interpret(big, xb, spec)
        assert trace.crash_stage == "infer"
        assert trace.crash_signature == "flatten-alloc-fail"
        assert trace.alloc_failed
        assert 3 * 200 * 200 > FLATTEN_ALLOC_LIMIT

        model = generate_seed("tiny-cnn", np.random.default_rng(3))
        ok = faulty_interpret(model, rand_input(model), spec)
        assert ok.completed and not ok.alloc_failed

    def test_flatten_slowdown_scales_time_only(self):
        model = generate_seed("tiny-cnn", np.random.default_rng(3))
        x = rand_input(model)
        ref = reference_interpret(model, x)
        slow = faulty_interpret(model, x, FaultSpec(flatten_slowdown=1.4586))
        assert slow.layer_outputs == ref.layer_outputs
        assert slow.layer_times["flatten"] == ref.layer_times["flatten"] * 1.4586
        for nid in ref.layer_times:
            if nid != "flatten":
                assert slow.layer_times[nid] == ref.layer_times[nid]
        assert slow.total_ms > ref.total_ms

    def test_mul_inconsistency_scales_outputs(self):
        model = generate_seed("tiny-resblock", np.random.default_rng(3))
        x = rand_input(model)
        ref = reference_interpret(model, x)
        skew = faulty_interpret(model, x, FaultSpec(mul_inconsistency=0.25))
        expected = ref.layer_outputs["mul1"].array * np.float32(1.25)
        assert np.array_equal(skew.layer_outputs["mul1"].array, expected)

    def test_fault_locality_mul(self):
        model = generate_seed("tiny-resblock", np.random.default_rng(3))
        x = rand_input(model)
        ref = reference_interpret(model, x)
        skew = faulty_interpret(model, x, FaultSpec(mul_inconsistency=0.01))
        order = model.topo_order()
        mul_at = order.index("mul1")
        differing = [nid for nid in order if skew.layer_outputs[nid] != ref.layer_outputs[nid]]
        assert differing, "the fault must show up somewhere"
        assert all(order.index(nid) >= mul_at for nid in differing)

    def test_dormant_faults_change_nothing(self):
        # NaN- and threshold-triggered faults sit silent on a healthy seed.
        model = generate_seed("tiny-cnn", np.random.default_rng(3))
        x = rand_input(model)
        ref = reference_interpret(model, x)
        spec = FaultSpec(relu6_nan_mishandle=True, conv_nan_emit=True, pad_crash=True)
        assert faulty_interpret(model, x, spec).layer_outputs == ref.layer_outputs


class TestAdapterClient:
    def handle(self, mode, timeout_s=5.0):
        return AdapterHandle([sys.executable, str(STUB), mode], timeout_s=timeout_s)

    def model(self):
        return single_node_model(LayerNode(id="r", kind="ReLU", inputs=["input"]), (1, 2))

    def test_hello_and_ok_roundtrip(self):
        with self.handle("ok") as adapter:
            info = adapter.hello()
            assert info["name"] == "stub"
            trace = external_execute(adapter, self.model(), t([[1.0, -2.0]]))
            assert trace.backend_id == "external:stub"
            assert trace.completed
            assert trace.layer_outputs["y"].array.tolist() == [[1.0, -2.0]]
            assert trace.total_ms == 1.0
            assert trace.peak_mem_bytes == 4096

    def test_lazy_hello(self):
        with self.handle("ok") as adapter:
            trace = external_execute(adapter, self.model(), t([[0.5, 0.5]]))
            assert trace.completed and adapter.info is not None

    def test_bad_hello_is_protocol_violation(self):
        with self.handle("bad-hello") as adapter:
            with pytest.raises(ProtocolViolationError, match="hello reply"):
                adapter.hello()

    def test_adapter_death_is_infer_crash(self):
        with self.handle("die") as adapter:
            adapter.hello()
            trace = external_execute(adapter, self.model(), t([[1.0, 1.0]]))
            assert trace.crash_stage == "infer"
            assert trace.crash_signature == "adapter-lost"
            trace.check_invariants()

    def test_death_before_hello_is_load_crash(self):
        with self.handle("die-after-hello") as adapter:
            adapter.hello()
            # process exited; the next execution cannot even re-handshake
            adapter.info = None
            trace = external_execute(adapter, self.model(), t([[1.0, 1.0]]))
            assert trace.crash_stage == "load"
            assert trace.crash_signature == "adapter-lost"

    def test_timeout_is_infer_crash(self):
        with self.handle("hang", timeout_s=0.4) as adapter:
            adapter.hello()
            trace = external_execute(adapter, self.model(), t([[1.0, 1.0]]))
            assert trace.crash_stage == "infer"
            assert trace.crash_signature == "timeout"

    def test_garbage_response_raises_with_payload(self):
        with self.handle("garbage") as adapter:
            adapter.hello()
            with pytest.raises(ProtocolViolationError) as info:
                external_execute(adapter, self.model(), t([[1.0, 1.0]]))
            assert "not json" in info.value.payload

    def test_mismatched_id_is_protocol_violation(self):
        with self.handle("bad-id") as adapter:
            adapter.hello()
            with pytest.raises(ProtocolViolationError, match="does not match"):
                external_execute(adapter, self.model(), t([[1.0, 1.0]]))

    def test_missing_status_is_protocol_violation(self):
        with self.handle("no-status") as adapter:
            adapter.hello()
            with pytest.raises(ProtocolViolationError, match="unknown status"):
                external_execute(adapter, self.model(), t([[1.0, 1.0]]))

    def test_crash_status_becomes_trace(self):
        with self.handle("crash-status") as adapter:
            adapter.hello()
            trace = external_execute(adapter, self.model(), t([[1.0, 1.0]]))
            assert trace.crash_stage == "infer"
            assert trace.crash_signature == "StubExplosion"

    def test_nan_status_keeps_outputs(self):
        with self.handle("nan-status") as adapter:
            adapter.hello()
            trace = external_execute(adapter, self.model(), t([[1.0, 1.0]]))
            assert trace.completed
            assert trace.nan_nodes() == ["y"]

    def test_malformed_output_entry(self):
        with self.handle("malformed-output") as adapter:
            adapter.hello()
            with pytest.raises(ProtocolViolationError, match="malformed output"):
                external_execute(adapter, self.model(), t([[1.0, 1.0]]))

    def test_export_failure_is_build_crash(self):
        bogus = GraphModel(
            input=InputSpec("input", (1, 2)),
            nodes={"w": LayerNode(id="w", kind="Whatever", inputs=["input"])},
            outputs=["w"],
        )
        with self.handle("ok") as adapter:
            trace = external_execute(adapter, bogus, t([[1.0, 1.0]]))
            assert trace.crash_stage == "build"
