"""Shared helpers: a line-oriented driver for an adapter subprocess."""

from __future__ import annotations

import json
import select
import subprocess
import sys

import pytest

ADAPTER_CMD = [sys.executable, "-m", "runtime_adapter"]


class AdapterProc:
    """Drive one adapter process over its stdio protocol, strictly serially."""

    def __init__(self, args: list[str] | None = None):
        self.proc = subprocess.Popen(
            ADAPTER_CMD + (args or []),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        self._first_read = True

    def send_line(self, line: str) -> None:
        assert self.proc.stdin is not None
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()

    def read_reply(self) -> dict:
        assert self.proc.stdout is not None
        # The very first reply waits for the runtime import; be generous.
        timeout = 180.0 if self._first_read else 60.0
        self._first_read = False
        ready, _, _ = select.select([self.proc.stdout], [], [], timeout)
        if not ready:
            self.proc.kill()
            raise AssertionError(f"adapter did not reply within {timeout}s")
        line = self.proc.stdout.readline()
        if not line:
            raise AssertionError("adapter closed stdout without replying")
        return json.loads(line)

    def roundtrip(self, request: dict) -> dict:
        self.send_line(json.dumps(request))
        return self.read_reply()

    def finish(self) -> tuple[int, str, str]:
        """Close stdin and collect (returncode, leftover stdout, stderr)."""
        out, err = self.proc.communicate(timeout=60)
        return self.proc.returncode, out, err

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()


@pytest.fixture(scope="module")
def adapter():
    proc = AdapterProc()
    yield proc
    proc.kill()
