"""Replay of the recorded 50-request transcript against a live process.

The fixture was recorded once against the harness's reference
interpreter (see fixtures/record_transcript.py) and is self-contained:
requests go down the pipe exactly as stored, and replies must match the
stored expectations — every id answered, corrupt bytes signalled as a
crash, non-finite models signalled as nan, and valid models within
1e-4 of the recorded reference tensors.
"""

import base64
import gzip
import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import AdapterProc

TRANSCRIPT = Path(__file__).parent / "fixtures" / "transcript.jsonl.gz"
TOLERANCE = 1e-4


def _load_records() -> list[dict]:
    with gzip.open(TRANSCRIPT, "rt", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle]


@pytest.fixture(scope="module")
def replay():
    """(records, replies) after one strictly serial run of the transcript."""
    records = _load_records()
    proc = AdapterProc()
    try:
        hello = proc.roundtrip({"cmd": "hello"})
        replies = []
        for record in records:
            proc.send_line(json.dumps(record["request"]))
            replies.append(proc.read_reply())
        rc, leftover, _ = proc.finish()
    finally:
        proc.kill()
    return {"records": records, "replies": replies, "hello": hello,
            "rc": rc, "leftover": leftover}


class TestTranscriptShape:
    def test_fifty_requests_with_failure_coverage(self):
        records = _load_records()
        assert len(records) == 50
        statuses = [r["expect"]["status"] for r in records]
        assert statuses.count("ok") == 46
        assert statuses.count("crash") == 2
        assert statuses.count("nan") == 2
        assert [r["request"]["id"] for r in records] == list(range(50))

    def test_hello_identifies_the_runtime(self, replay):
        assert replay["hello"]["runtime"] == "torch"
        assert isinstance(replay["hello"]["name"], str)
        assert isinstance(replay["hello"]["version"], str)


class TestReplay:
    def test_every_id_is_answered_in_order(self, replay):
        got = [reply["id"] for reply in replay["replies"]]
        assert got == list(range(50))

    def test_no_extra_output_and_clean_exit(self, replay):
        assert replay["rc"] == 0
        assert replay["leftover"] == ""

    def test_statuses_match_expectations(self, replay):
        for record, reply in zip(replay["records"], replay["replies"]):
            assert reply["status"] == record["expect"]["status"], record["note"]

    def test_corrupt_models_carry_a_parse_signature(self, replay):
        crashes = [(rec, rep) for rec, rep in zip(replay["records"], replay["replies"])
                   if rec["expect"]["status"] == "crash"]
        assert crashes
        for record, reply in crashes:
            assert reply["error"] == "ModelParseError", record["note"]
            assert "outputs" not in reply

    def test_nonfinite_models_report_nan_with_tensors(self, replay):
        nans = [(rec, rep) for rec, rep in zip(replay["records"], replay["replies"])
                if rec["expect"]["status"] == "nan"]
        assert nans
        for record, reply in nans:
            assert reply["outputs"], record["note"]
            flat = (v for entry in reply["outputs"] for v in entry["data"])
            assert any(not math.isfinite(v) for v in flat), record["note"]
            assert reply["total_ms"] >= 0.0

    def test_valid_models_match_reference_within_tolerance(self, replay):
        worst = 0.0
        checked = 0
        for record, reply in zip(replay["records"], replay["replies"]):
            if record["expect"]["status"] != "ok":
                continue
            expected = record["expect"]["outputs"]
            assert [o["name"] for o in reply["outputs"]] == \
                [o["name"] for o in expected], record["note"]
            for want, got in zip(expected, reply["outputs"]):
                assert got["shape"] == want["shape"], (record["note"], want["name"])
                ref = np.frombuffer(base64.b64decode(want["data_b64"]), dtype="<f4")
                out = np.asarray(got["data"], dtype=np.float64)
                gap = float(np.max(np.abs(out - ref.astype(np.float64)))) if ref.size else 0.0
                worst = max(worst, gap)
                checked += ref.size
            assert reply["total_ms"] >= 0.0
            if sys.platform.startswith("linux"):
                assert reply["peak_mem_bytes"] > 0
        assert checked > 50_000, "transcript should cover a substantial tensor volume"
        assert worst <= TOLERANCE, f"worst per-layer gap {worst} exceeds {TOLERANCE}"
