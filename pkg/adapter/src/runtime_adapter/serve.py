"""JSON-lines stdio service around the torch runner.

One request per line in, one reply per line out, strictly in order.
The process never lets a model take it down: undecodable bytes and
kernel failures become ``status: "crash"`` replies whose signature is
the exception class name, non-finite outputs become ``status: "nan"``,
and a request the server cannot even read is answered with id ``-1``.
Logging goes to stderr only — stdout carries nothing but replies — and
end of input is a normal, zero-status shutdown.
"""

from __future__ import annotations

import argparse
import base64
import binascii
import json
import logging
import sys
import time
from typing import IO

import numpy as np
import torch

from .model import parse_model
from .torchexec import any_nonfinite, execute, select_outputs

__all__ = ["ADAPTER_NAME", "handle_line", "main", "serve"]

ADAPTER_NAME = "torch-stdio-runner"

log = logging.getLogger("runtime_adapter")


class _RequestError(ValueError):
    """The request itself (not the model) is malformed."""


def _hello_reply() -> dict:
    return {
        "name": ADAPTER_NAME,
        "runtime": "torch",
        "version": torch.__version__,
        "capabilities": {"per_layer": True},
    }


def _crash_reply(rid: int, signature: str) -> dict:
    return {"id": rid, "status": "crash", "error": signature}


def _peak_mem_bytes() -> int | None:
    """Process peak RSS in bytes, where the platform exposes it."""
    try:
        import resource
    except ImportError:
        return None
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # Linux reports KiB; macOS reports bytes.
    return int(peak) if sys.platform == "darwin" else int(peak) * 1024


def _decode_model(request: dict) -> bytes:
    encoded = request.get("model_b64")
    if not isinstance(encoded, str):
        raise _RequestError("request lacks a model_b64 string")
    try:
        return base64.b64decode(encoded, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise _RequestError(f"model_b64 is not valid base64 ({exc})") from exc


def _decode_input(request: dict) -> np.ndarray:
    spec = request.get("input")
    if not isinstance(spec, dict):
        raise _RequestError("request lacks an input object")
    try:
        shape = tuple(int(d) for d in spec["shape"])
        flat = np.asarray(spec["data"], dtype=np.float32)
    except (KeyError, TypeError, ValueError) as exc:
        raise _RequestError(f"input is malformed ({exc})") from exc
    try:
        return flat.reshape(shape)
    except ValueError as exc:
        raise _RequestError(f"input data does not fill shape {list(shape)}") from exc


def _run_execute(request: dict, rid: int) -> dict:
    model_bytes = _decode_model(request)
    input_array = _decode_input(request)
    options = request.get("options")
    options = options if isinstance(options, dict) else {}
    per_layer = bool(options.get("per_layer", True))

    start = time.perf_counter()
    try:
        graph = parse_model(model_bytes)
        captured = execute(graph, input_array)
        reported = captured if per_layer else select_outputs(graph, captured)
    except Exception as exc:  # any model failure must become a reply
        log.warning("request %d: model failed with %s: %s", rid, type(exc).__name__, exc)
        return _crash_reply(rid, type(exc).__name__)
    total_ms = (time.perf_counter() - start) * 1000.0

    status = "nan" if any_nonfinite(reported) else "ok"
    outputs = []
    for name, tensor in reported:
        array = tensor.detach().cpu().numpy()
        outputs.append({
            "name": name,
            "shape": [int(d) for d in array.shape],
            "data": [float(v) for v in array.ravel()],
        })
    reply = {"id": rid, "status": status, "outputs": outputs, "total_ms": total_ms}
    peak = _peak_mem_bytes()
    if peak is not None:
        reply["peak_mem_bytes"] = peak
    return reply


def handle_line(line: str) -> dict:
    """Turn one raw request line into one reply object.  Never raises."""
    try:
        request = json.loads(line)
    except json.JSONDecodeError as exc:
        return _crash_reply(-1, f"RequestError: undecodable request line ({exc.msg})")
    if not isinstance(request, dict):
        return _crash_reply(-1, "RequestError: request is not an object")

    cmd = request.get("cmd")
    if cmd == "hello":
        return _hello_reply()

    rid = request.get("id")
    if not isinstance(rid, int) or isinstance(rid, bool):
        rid = -1
    if cmd != "execute":
        return _crash_reply(rid, f"RequestError: unknown cmd {cmd!r}")
    try:
        return _run_execute(request, rid)
    except _RequestError as exc:
        return _crash_reply(rid, f"RequestError: {exc}")
    except Exception as exc:  # last resort: the loop must survive anything
        log.exception("request %d: unhandled failure", rid)
        return _crash_reply(rid, type(exc).__name__)


def serve(stdin: IO[str] | None = None, stdout: IO[str] | None = None) -> int:
    """Answer requests until end of input; always returns 0."""
    stdin = sys.stdin if stdin is None else stdin
    stdout = sys.stdout if stdout is None else stdout
    for line in stdin:
        if not line.strip():
            continue
        reply = handle_line(line)
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()
    log.info("end of input, shutting down")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="runtime-adapter",
        description="Run ONNX-subset models on torch over a stdio JSON-lines protocol.")
    parser.add_argument("--log-level", default="warning",
                        choices=("debug", "info", "warning", "error"),
                        help="stderr logging threshold (default: warning)")
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, args.log_level.upper()),
        format="[runtime-adapter] %(levelname)s: %(message)s")
    torch.set_num_threads(1)
    return serve()


if __name__ == "__main__":
    sys.exit(main())
