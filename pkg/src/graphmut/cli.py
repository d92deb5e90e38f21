"""Command-line front end: campaigns plus one-off model operations.

Subcommands:

* ``fuzz``    — run a campaign from a config file; exit 0 when defects
  were found, 1 when none were, 2 on configuration errors;
* ``mutate``  — apply a single operator at a named site and save the mutant;
* ``exec``    — run one model on one backend and dump the trace as JSON;
* ``compare`` — diff two trace dumps: distances, growth rates, verdicts;
* ``stats``   — render the per-operator table from a campaign directory;
* ``replay``  — rebuild every mutant in a lineage file and check hashes.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import native
from .backends import (
    AdapterHandle,
    CaptureOptions,
    FaultSpec,
    external_execute,
    faulty_interpret,
    optimized_interpret,
    reference_interpret,
    trace_from_obj,
    trace_to_obj,
)
from .campaign import ADAPTER_ENV, SEEDS_DIR, STATS_FILE, render_stats, run_campaign
from .engine import CampaignConfig, MissingSeedError, MutantRecord
from .engine import replay as replay_lineage
from .ir import GraphError, TensorValue
from .operators import MutationSite, catalog, make_operator
from .operators import apply as apply_operator
from .oracles import (
    AlignmentError,
    OracleConfig,
    classify,
    crash_oracle,
    efficiency_oracle,
    inconsistency_oracle,
    layer_distance,
    memory_oracle,
    nan_oracle,
    rate_series,
)

__all__ = ["main"]

EXIT_FOUND = 0
EXIT_NONE = 1
EXIT_CONFIG = 2


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_fuzz(args) -> int:
    try:
        cfg = CampaignConfig.from_file(args.config)
        if args.budget is not None:
            if args.budget < 0:
                raise ValueError("budget must be >= 0")
            cfg.budget = args.budget
        result = run_campaign(cfg, args.out)
    except (ValueError, OSError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    print(f"generated {result.generated} mutants "
          f"({result.legal} legal, {result.illegal} illegal)")
    by_taxonomy: dict[str, int] = {}
    for report in result.unique_reports:
        by_taxonomy[report.taxonomy_id] = by_taxonomy.get(report.taxonomy_id, 0) + 1
    print(f"unique defects: {len(result.unique_reports)}")
    for tax in sorted(by_taxonomy):
        print(f"  {tax}: {by_taxonomy[tax]}")
    print(f"reports written to {Path(args.out)}")
    return EXIT_FOUND if result.found_defects else EXIT_NONE


def _parse_site(raw: str) -> MutationSite:
    if ":" in raw:
        node, detail = raw.split(":", 1)
        return MutationSite(node, int(detail) if detail.isdigit() else detail)
    return MutationSite(raw)


def cmd_mutate(args) -> int:
    try:
        model = native.load(args.model)
        op = make_operator(args.op)
    except (ValueError, OSError, GraphError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    site = _parse_site(args.site)
    try:
        outcome = apply_operator(model, op, site, np.random.default_rng(args.seed))
    except GraphError as exc:
        return _fail(f"operator {args.op} is inapplicable at {args.site}: {exc}", EXIT_NONE)
    out_path = args.out or str(Path(args.model).with_suffix(".mut.gmod"))
    native.save(outcome.model, out_path)
    actions = ", ".join(a.action for a in outcome.repair_log) or "none"
    print(f"wrote {out_path} (repairs: {actions})")
    return EXIT_FOUND


def cmd_exec(args) -> int:
    try:
        model = native.load(args.model)
    except (OSError, GraphError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    x_arr = np.random.default_rng(args.input_seed).standard_normal(
        model.input.shape).astype(np.float32)
    x = TensorValue.from_array(x_arr)
    capture = CaptureOptions()
    name = args.backend
    if name == "reference":
        trace = reference_interpret(model, x, capture)
    elif name == "optimized":
        trace = optimized_interpret(model, x, capture)
    elif name == "faulty":
        trace = faulty_interpret(model, x, FaultSpec(), capture)
    elif name == "external":
        command = args.adapter or os.environ.get(ADAPTER_ENV, "")
        if not command:
            return _fail(f"external backend needs --adapter or ${ADAPTER_ENV}", EXIT_CONFIG)
        with AdapterHandle(command) as handle:
            trace = external_execute(handle, model, x, capture)
    else:
        return _fail(f"unknown backend {name!r}", EXIT_CONFIG)
    # Insertion order in "outputs" is capture order; the rate metric depends
    # on it, so no sort_keys here.
    payload = json.dumps(trace_to_obj(trace), indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(payload)
    return EXIT_FOUND


def cmd_compare(args) -> int:
    try:
        with open(args.trace_a, encoding="utf-8") as fh:
            trace_a = trace_from_obj(json.load(fh))
        with open(args.trace_b, encoding="utf-8") as fh:
            trace_b = trace_from_obj(json.load(fh))
    except (OSError, ValueError, KeyError) as exc:
        return _fail(f"cannot load traces: {exc}", EXIT_CONFIG)

    key_a = trace_a.backend_id
    key_b = trace_b.backend_id if trace_b.backend_id != key_a else f"{trace_b.backend_id}-b"
    trace_b.backend_id = key_b
    traces = {key_a: trace_a, key_b: trace_b}
    cfg = OracleConfig()

    print(f"comparing {key_a} vs {key_b}")
    reports = []
    for oracle in (crash_oracle, nan_oracle):
        found = oracle(traces, cfg)
        if found is not None:
            reports.append(found)

    try:
        distances = layer_distance(trace_a, trace_b)
    except AlignmentError as exc:
        print(f"distance series: not comparable ({exc})")
        distances = None
    if distances is not None:
        print("distance series:")
        for nid, value in distances.values:
            print(f"  {nid}: D={value!r}")
        for nid in distances.nan_layers:
            print(f"  {nid}: skipped (non-finite values)")
        rates = rate_series(distances, cfg)
        print("growth rates:")
        if not rates.values:
            print("  (series too short)")
        for nid, value in rates.values:
            print(f"  {nid}: R={value!r}")
        found = inconsistency_oracle(rates, cfg)
        if found is not None:
            reports.append(found)

    for oracle in (efficiency_oracle, memory_oracle):
        found = oracle(traces, cfg)
        if found is not None:
            reports.append(found)

    if not reports:
        print("verdict: no defect signals between these traces")
    else:
        print("verdict:")
        for report in reports:
            classify(report, traces)
            keys = ("node", "stage", "signature", "max_rate", "total_ratio", "peak_ratio")
            summary = ", ".join(
                f"{k}={report.evidence[k]}" for k in keys
                if report.evidence.get(k) not in (None, "")
            )
            print(f"  {report.taxonomy_id} {report.kind}: {summary}")
    return EXIT_FOUND


def cmd_stats(args) -> int:
    path = Path(args.dir) / STATS_FILE
    try:
        with open(path, encoding="utf-8") as fh:
            stats = json.load(fh)
    except (OSError, ValueError) as exc:
        return _fail(f"cannot load {path}: {exc}", EXIT_CONFIG)
    print(render_stats(stats), end="")
    return EXIT_FOUND


def cmd_replay(args) -> int:
    path = Path(args.lineage)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    meta: dict = {}
    rows = []
    for line in lines:
        if not line.strip():
            continue
        obj = json.loads(line)
        if "_meta" in obj:
            meta = obj["_meta"]
        else:
            rows.append(obj)

    seeds: dict[str, object] = {}
    seeds_dir = path.parent / SEEDS_DIR
    if seeds_dir.is_dir():
        for seed_path in sorted(seeds_dir.glob("*.gmod")):
            seeds[seed_path.stem] = native.load(seed_path)
    operator_table = {op.code: op for op in catalog(meta.get("operator_params") or {})}

    all_ok = True
    for obj in rows:
        record = MutantRecord.from_obj(obj)
        try:
            model = replay_lineage(record, seeds, operator_table)
        except MissingSeedError as exc:
            return _fail(str(exc), EXIT_CONFIG)
        except GraphError as exc:
            print(f"{record.id} FAILED ({exc})")
            all_ok = False
            continue
        digest = native.fingerprint(model)
        stored = obj.get("sha256")
        if stored is None or digest == stored:
            print(f"{record.id} OK")
        else:
            print(f"{record.id} MISMATCH (got {digest[:12]}, stored {stored[:12]})")
            all_ok = False
    return EXIT_FOUND if all_ok else EXIT_NONE


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphmut",
        description="differential fuzzing of graph-model execution backends",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuzz", help="run a mutation campaign from a config file")
    p.add_argument("--config", required=True, help="campaign config (JSON)")
    p.add_argument("--budget", type=int, default=None, help="override the config budget")
    p.add_argument("--out", required=True, help="output directory for campaign artifacts")
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("mutate", help="apply one operator at one site")
    p.add_argument("--model", required=True, help="input model file")
    p.add_argument("--op", required=True, help="operator code (LA, LR, ..., NEB)")
    p.add_argument("--site", required=True, help="site: node id, optionally node:detail")
    p.add_argument("--seed", type=int, default=0, help="rng seed for the step")
    p.add_argument("--out", default=None, help="output path (default: <model>.mut.gmod)")
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser("exec", help="run one model on one backend, dump the trace")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--backend", required=True,
                   help="reference | optimized | faulty | external")
    p.add_argument("--adapter", default=None,
                   help=f"adapter launch command (default: ${ADAPTER_ENV})")
    p.add_argument("--input-seed", type=int, default=0, help="rng seed for the input tensor")
    p.add_argument("--out", default=None, help="write the trace here instead of stdout")
    p.set_defaults(func=cmd_exec)

    p = sub.add_parser("compare", help="compare two trace dumps")
    p.add_argument("trace_a", help="first trace JSON")
    p.add_argument("trace_b", help="second trace JSON")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("stats", help="print the operator table for a campaign directory")
    p.add_argument("dir", help="campaign output directory")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("replay", help="rebuild mutants from a lineage file, verify hashes")
    p.add_argument("--lineage", required=True, help="lineage.jsonl from a campaign")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
