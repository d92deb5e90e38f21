"""Model execution backends: interpreters, fault injection, adapters.

Every backend turns (model, input) into an ExecutionTrace and never lets
a model failure escape as an exception — crashes are data here.
"""
from .core import FaultCrash, run_interpreter
from .costmodel import estimate_peak_mem, virtual_time_ms, work_units
from .external import (
    AdapterHandle,
    AdapterLostError,
    AdapterTimeoutError,
    ProtocolViolationError,
    external_execute,
)
from .faulty import faulty_interpret
from .optimized import OPTIMIZED_KERNELS, optimized_interpret
from .reference import REFERENCE_KERNELS, reference_interpret
from .trace import (
    STAGES,
    CaptureOptions,
    ExecutionTrace,
    FaultSpec,
    StageStatus,
    trace_from_obj,
    trace_to_obj,
)

__all__ = [
    "STAGES",
    "AdapterHandle",
    "AdapterLostError",
    "AdapterTimeoutError",
    "CaptureOptions",
    "ExecutionTrace",
    "FaultCrash",
    "FaultSpec",
    "OPTIMIZED_KERNELS",
    "ProtocolViolationError",
    "REFERENCE_KERNELS",
    "StageStatus",
    "estimate_peak_mem",
    "external_execute",
    "faulty_interpret",
    "optimized_interpret",
    "reference_interpret",
    "run_interpreter",
    "trace_from_obj",
    "trace_to_obj",
    "virtual_time_ms",
    "work_units",
]
