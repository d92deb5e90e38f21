"""Execution traces and the knobs that shape them.

A trace is everything one backend has to say about one model execution:
which lifecycle stages ran, what every layer produced, how long layers
took, and the memory picture.  Comparisons between traces happen
elsewhere; this module only defines the record types.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..ir import TensorValue

__all__ = [
    "STAGES",
    "CaptureOptions",
    "ExecutionTrace",
    "FaultSpec",
    "StageStatus",
    "trace_from_obj",
    "trace_to_obj",
]

STAGES = ("build", "load", "infer")

OK = "ok"
CRASH = "crash"


@dataclass(frozen=True)
class StageStatus:
    """Outcome of one lifecycle stage: ``ok`` or ``crash`` with a signature."""

    status: str
    signature: str | None = None
    node_id: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == OK


@dataclass
class ExecutionTrace:
    """One backend's account of one model execution.

    ``stage_status`` holds entries for the stages that were attempted, in
    lifecycle order (build, load, infer); once a stage crashes, later
    stages are absent.  ``layer_outputs`` covers the executed prefix only,
    keyed by node id in topological order.  Times are milliseconds.
    """

    backend_id: str
    stage_status: dict[str, StageStatus] = field(default_factory=dict)
    layer_outputs: dict[str, TensorValue] = field(default_factory=dict)
    layer_times: dict[str, float] = field(default_factory=dict)
    total_ms: float = 0.0
    peak_mem_bytes: int = 0
    alloc_failed: bool = False

    @property
    def crashed(self) -> bool:
        return any(not s.ok for s in self.stage_status.values())

    @property
    def crash_stage(self) -> str | None:
        """Earliest crashed stage name, or None if every stage passed."""
        for stage in STAGES:
            status = self.stage_status.get(stage)
            if status is not None and not status.ok:
                return stage
        return None

    @property
    def crash_signature(self) -> str | None:
        stage = self.crash_stage
        if stage is None:
            return None
        return self.stage_status[stage].signature

    @property
    def crash_node(self) -> str | None:
        stage = self.crash_stage
        if stage is None:
            return None
        return self.stage_status[stage].node_id

    @property
    def completed(self) -> bool:
        """All three stages ran and passed."""
        return all(stage in self.stage_status and self.stage_status[stage].ok for stage in STAGES)

    def nan_nodes(self) -> list[str]:
        """Node ids whose captured output contains NaN or Inf, in capture order."""
        bad = []
        for nid, value in self.layer_outputs.items():
            if not np.all(np.isfinite(value.data)):
                bad.append(nid)
        return bad

    def check_invariants(self) -> None:
        """Raise AssertionError if the stage bookkeeping is inconsistent."""
        seen_crash = False
        for stage in STAGES:
            present = stage in self.stage_status
            if seen_crash and present:
                raise AssertionError(f"stage {stage!r} present after a crashed stage")
            if present and not self.stage_status[stage].ok:
                seen_crash = True
        extra = set(self.stage_status) - set(STAGES)
        if extra:
            raise AssertionError(f"unknown stages recorded: {sorted(extra)}")


def trace_to_obj(trace: ExecutionTrace) -> dict:
    """JSON-safe form of a trace, full layer data included."""
    return {
        "backend": trace.backend_id,
        "stages": {
            name: {"status": s.status, "signature": s.signature, "node": s.node_id}
            for name, s in trace.stage_status.items()
        },
        "outputs": {
            nid: {"shape": list(v.shape), "data": [float(x) for x in v.data.ravel()]}
            for nid, v in trace.layer_outputs.items()
        },
        "times": dict(trace.layer_times),
        "total_ms": trace.total_ms,
        "peak_mem_bytes": trace.peak_mem_bytes,
        "alloc_failed": trace.alloc_failed,
    }


def trace_from_obj(obj: dict) -> ExecutionTrace:
    trace = ExecutionTrace(backend_id=obj["backend"])
    for name, s in obj.get("stages", {}).items():
        trace.stage_status[name] = StageStatus(
            status=s["status"], signature=s.get("signature"), node_id=s.get("node")
        )
    for nid, out in obj.get("outputs", {}).items():
        arr = np.asarray(out["data"], dtype=np.float32).reshape(tuple(out["shape"]))
        trace.layer_outputs[nid] = TensorValue.from_array(arr)
    trace.layer_times = {nid: float(ms) for nid, ms in obj.get("times", {}).items()}
    trace.total_ms = float(obj.get("total_ms", 0.0))
    trace.peak_mem_bytes = int(obj.get("peak_mem_bytes", 0))
    trace.alloc_failed = bool(obj.get("alloc_failed", False))
    return trace


@dataclass(frozen=True)
class CaptureOptions:
    """What to record during an execution.

    ``timing_mode`` selects between a deterministic cost-model clock
    (``virtual``, the default: layer time is proportional to the layer's
    arithmetic work) and repeated monotonic-clock measurement (``wall``,
    median of ``wall_repeats`` runs per layer).
    """

    per_layer: bool = True
    timing: bool = True
    timing_mode: str = "virtual"
    wall_repeats: int = 3

    def __post_init__(self):
        if self.timing_mode not in ("virtual", "wall"):
            raise ValueError(f"timing_mode must be 'virtual' or 'wall', got {self.timing_mode!r}")
        if self.wall_repeats < 1:
            raise ValueError("wall_repeats must be >= 1")


_FAULT_NAMES = {
    "relu6-nan-mishandle": "relu6_nan_mishandle",
    "conv-nan-emit": "conv_nan_emit",
    "pad-crash": "pad_crash",
    "flatten-slowdown": "flatten_slowdown",
    "flatten-alloc-fail": "flatten_alloc_fail",
    "mul-inconsistency": "mul_inconsistency",
}


@dataclass(frozen=True)
class FaultSpec:
    """Which injected misbehaviours the fault-seeded interpreter exhibits.

    Two faults carry a parameter: ``flatten_slowdown`` is a time factor
    (> 1) applied to Flatten layers, ``mul_inconsistency`` is a relative
    output perturbation (> 0) applied to Mul layers.  The boolean faults
    switch behaviours described in the interpreter itself.
    """

    relu6_nan_mishandle: bool = False
    conv_nan_emit: bool = False
    pad_crash: bool = False
    flatten_slowdown: float | None = None
    flatten_alloc_fail: bool = False
    mul_inconsistency: float | None = None

    def __post_init__(self):
        if self.flatten_slowdown is not None and not self.flatten_slowdown > 1.0:
            raise ValueError(f"flatten_slowdown factor must be > 1, got {self.flatten_slowdown}")
        if self.mul_inconsistency is not None and not self.mul_inconsistency > 0.0:
            raise ValueError(f"mul_inconsistency delta must be > 0, got {self.mul_inconsistency}")

    @property
    def active(self) -> tuple[str, ...]:
        """Config-style names of the enabled faults."""
        names = []
        for config_name, attr in _FAULT_NAMES.items():
            if getattr(self, attr) not in (False, None):
                names.append(config_name)
        return tuple(names)

    def __bool__(self) -> bool:
        return bool(self.active)

    @classmethod
    def from_config(cls, raw: dict | list | None) -> "FaultSpec":
        """Build from config data.

        Accepts a mapping of fault name to value (``true`` for switch
        faults, a number for parametrised ones) or a plain list of names
        (parametrised faults then need the mapping form).
        """
        if raw is None:
            return cls()
        if isinstance(raw, (list, tuple)):
            raw = {name: True for name in raw}
        kwargs = {}
        for name, value in raw.items():
            attr = _FAULT_NAMES.get(name)
            if attr is None:
                raise ValueError(f"unknown fault {name!r}; choose from {sorted(_FAULT_NAMES)}")
            if attr in ("flatten_slowdown", "mul_inconsistency"):
                if value is True:
                    raise ValueError(f"fault {name!r} needs a numeric parameter")
                kwargs[attr] = float(value)
            else:
                kwargs[attr] = bool(value)
        return cls(**kwargs)
