"""Optional end-to-end check against the harness CLI, when it is installed.

The harness talks to this adapter purely through public surfaces: its
``exec`` subcommand spawns the adapter process, streams the model over
the stdio protocol, and shapes the replies into a trace file.  This test
drives that path and cross-checks the resulting per-layer tensors
against the harness's built-in interpreter.  It skips cleanly when the
harness CLI is absent — the rest of this suite never needs it.
"""

import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

SAMPLE = Path(__file__).parent / "fixtures" / "sample.gmod"
HARNESS = shutil.which("graphmut")

pytestmark = pytest.mark.skipif(HARNESS is None,
                                reason="harness CLI not installed")


def _run_exec(backend_args: list[str], out: Path) -> dict:
    subprocess.run(
        [HARNESS, "exec", "--model", str(SAMPLE), "--input-seed", "7",
         "--out", str(out), *backend_args],
        check=True, capture_output=True, text=True, timeout=300)
    return json.loads(out.read_text())


def test_harness_exec_matches_builtin_interpreter(tmp_path):
    ref = _run_exec(["--backend", "reference"], tmp_path / "ref.json")
    ext = _run_exec(
        ["--backend", "external", "--adapter", f"{sys.executable} -m runtime_adapter"],
        tmp_path / "ext.json")

    assert ext["backend"].startswith("external:")
    assert all(stage["status"] == "ok" for stage in ext["stages"].values())

    assert list(ext["outputs"]) == list(ref["outputs"])
    worst = 0.0
    for name, entry in ref["outputs"].items():
        got = ext["outputs"][name]
        assert got["shape"] == entry["shape"], name
        gap = np.max(np.abs(np.asarray(got["data"], np.float64)
                            - np.asarray(entry["data"], np.float64)))
        worst = max(worst, float(gap))
    assert worst <= 1e-4, f"worst per-layer gap {worst}"
    assert ext["total_ms"] > 0.0
