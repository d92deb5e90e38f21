"""Client for out-of-process runtime adapters.

An adapter is a child process speaking newline-delimited JSON on its
standard streams: a ``hello`` handshake announcing what runtime it
wraps, then one ``execute`` request at a time carrying base64 model
bytes and a flat input tensor.  The client converts each response into
an ExecutionTrace; a dead or unresponsive adapter becomes a crash entry
in the trace, while an adapter that answers outside the protocol raises
ProtocolViolationError with the offending payload attached.
"""
from __future__ import annotations

import base64
import json
import queue
import shlex
import subprocess
import threading
from collections.abc import Sequence

import numpy as np

from ..ir import GraphModel, TensorValue
from ..onnx_codec import export_model
from .trace import OK, CaptureOptions, ExecutionTrace, StageStatus

__all__ = [
    "AdapterHandle",
    "AdapterLostError",
    "AdapterTimeoutError",
    "ProtocolViolationError",
    "external_execute",
]

DEFAULT_TIMEOUT_S = 30.0

_EOF = object()


class AdapterLostError(Exception):
    """The adapter process died or closed its output stream."""


class AdapterTimeoutError(Exception):
    """The adapter did not answer within the allowed time."""


class ProtocolViolationError(Exception):
    """The adapter answered, but not in the shape the protocol demands."""

    def __init__(self, message: str, payload: str | None = None):
        super().__init__(message)
        self.payload = payload


class AdapterHandle:
    """A running adapter process plus the bookkeeping to talk to it.

    One request is in flight at a time; request ids increase from 0.
    ``command`` may be a shell-style string or an argv list.  The
    adapter's stderr is left attached to ours (it is the log stream).
    """

    def __init__(self, command: str | Sequence[str], timeout_s: float = DEFAULT_TIMEOUT_S):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.command = argv
        self.timeout_s = timeout_s
        self.info: dict | None = None
        self._next_id = 0
        self._proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
        )
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(_EOF)

    @property
    def backend_id(self) -> str:
        if self.info and self.info.get("name"):
            return f"external:{self.info['name']}"
        return "external"

    @property
    def alive(self) -> bool:
        return self._proc.poll() is None

    def _send(self, message: dict):
        if self._proc.poll() is not None or self._proc.stdin.closed:
            raise AdapterLostError("adapter process is gone")
        try:
            self._proc.stdin.write(json.dumps(message) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise AdapterLostError(f"adapter stdin closed: {exc}") from exc

    def _recv(self) -> dict:
        try:
            line = self._lines.get(timeout=self.timeout_s)
        except queue.Empty:
            raise AdapterTimeoutError(f"no answer within {self.timeout_s}s") from None
        if line is _EOF:
            raise AdapterLostError("adapter closed its output stream")
        try:
            message = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolViolationError(f"unparseable response: {exc}", payload=line) from exc
        if not isinstance(message, dict):
            raise ProtocolViolationError("response is not an object", payload=line)
        return message

    def hello(self) -> dict:
        """Handshake; returns and caches the adapter's identity record."""
        self._send({"cmd": "hello"})
        reply = self._recv()
        for key in ("name", "runtime", "version"):
            if not isinstance(reply.get(key), str):
                raise ProtocolViolationError(
                    f"hello reply missing string field {key!r}", payload=json.dumps(reply)
                )
        self.info = reply
        return reply

    def execute(self, model_bytes: bytes, input_value: TensorValue,
                per_layer: bool = True, timing: bool = True) -> dict:
        """One execute round-trip; returns the raw (id-checked) response."""
        rid = self._next_id
        self._next_id += 1
        self._send({
            "id": rid,
            "cmd": "execute",
            "model_b64": base64.b64encode(model_bytes).decode("ascii"),
            "input": {
                "shape": [int(d) for d in input_value.shape],
                "data": [float(v) for v in input_value.data],
            },
            "options": {"per_layer": per_layer, "timing": timing},
        })
        reply = self._recv()
        got = reply.get("id")
        if got != rid:
            raise ProtocolViolationError(
                f"response id {got!r} does not match request id {rid}",
                payload=json.dumps(reply),
            )
        return reply

    def close(self):
        """Shut the adapter down: EOF first, then escalate."""
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=0.5)
            return
        except subprocess.TimeoutExpired:
            pass
        self._proc.terminate()
        try:
            self._proc.wait(timeout=0.5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()

    def __enter__(self) -> "AdapterHandle":
        return self

    def __exit__(self, *exc_info):
        self.close()


def _parse_outputs(reply: dict) -> dict[str, TensorValue]:
    raw_outputs = reply.get("outputs")
    if not isinstance(raw_outputs, list):
        raise ProtocolViolationError("ok response lacks an outputs list",
                                     payload=json.dumps(reply))
    outputs: dict[str, TensorValue] = {}
    for entry in raw_outputs:
        try:
            name = entry["name"]
            shape = tuple(int(d) for d in entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float32).reshape(shape)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolViolationError(
                f"malformed output entry: {exc}", payload=json.dumps(entry)
            ) from exc
        outputs[name] = TensorValue.from_array(data)
    return outputs


def external_execute(endpoint: AdapterHandle, model: GraphModel, input_value: TensorValue,
                     capture: CaptureOptions | None = None) -> ExecutionTrace:
    """Run ``model`` through an adapter and shape the reply into a trace.

    The adapter's own lifecycle is opaque, so its crashes are recorded on
    the infer stage; only a local serialization failure lands on build.
    """
    capture = capture or CaptureOptions()
    trace = ExecutionTrace(backend_id=endpoint.backend_id)
    try:
        model_bytes = export_model(model)
    except Exception as exc:  # noqa: BLE001 - crash containment boundary
        trace.stage_status["build"] = StageStatus("crash", signature=type(exc).__name__)
        return trace
    trace.stage_status["build"] = StageStatus(OK)

    try:
        if endpoint.info is None:
            endpoint.hello()
        trace.backend_id = endpoint.backend_id
    except AdapterLostError:
        trace.stage_status["load"] = StageStatus("crash", signature="adapter-lost")
        return trace
    except AdapterTimeoutError:
        trace.stage_status["load"] = StageStatus("crash", signature="timeout")
        return trace
    trace.stage_status["load"] = StageStatus(OK)

    try:
        reply = endpoint.execute(
            model_bytes, input_value,
            per_layer=capture.per_layer, timing=capture.timing,
        )
    except AdapterLostError:
        trace.stage_status["infer"] = StageStatus("crash", signature="adapter-lost")
        return trace
    except AdapterTimeoutError:
        trace.stage_status["infer"] = StageStatus("crash", signature="timeout")
        return trace

    status = reply.get("status")
    if status == "crash":
        signature = reply.get("error") or "adapter-crash"
        trace.stage_status["infer"] = StageStatus("crash", signature=str(signature))
        return trace
    if status not in ("ok", "nan"):
        raise ProtocolViolationError(f"unknown status {status!r}", payload=json.dumps(reply))

    trace.layer_outputs = _parse_outputs(reply)
    total_ms = reply.get("total_ms")
    if not isinstance(total_ms, (int, float)) or isinstance(total_ms, bool):
        raise ProtocolViolationError("response lacks numeric total_ms", payload=json.dumps(reply))
    trace.total_ms = float(total_ms)
    peak = reply.get("peak_mem_bytes")
    if peak is not None:
        trace.peak_mem_bytes = int(peak)
    trace.stage_status["infer"] = StageStatus(OK)
    return trace
