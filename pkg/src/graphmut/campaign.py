"""One full fuzzing campaign: generate, execute, judge, persist.

A campaign drives the mutation engine for a configured budget, runs
every mutant on every configured backend, applies the legality
partition and the defect oracles, and writes these artifacts into the
output directory:

* ``reports.jsonl``    — one record per unique defect after dedup;
* ``lineage.jsonl``    — one record per mutant (meta line first), with
  the input seed and the model hash, enough to replay any mutant;
* ``stats.json``       — per-operator counters and means;
* ``curves.csv``       — max growth rate per (mutant, backend pair);
* ``summary.json``     — campaign-level counts for machine consumption;
* ``seeds/``           — the seed models, so replay needs no engine.

With virtual timing (the default) the whole run is deterministic: the
same config produces byte-identical artifacts.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import native
from .backends import (
    AdapterHandle,
    CaptureOptions,
    ExecutionTrace,
    FaultSpec,
    external_execute,
    faulty_interpret,
    optimized_interpret,
    reference_interpret,
)
from .engine import (
    CampaignComplete,
    CampaignConfig,
    MutantRecord,
    MutationEngine,
    legality_check,
)
from .ir import GraphModel, TensorValue
from .oracles import AlignmentError, DefectReport, dedup, evaluate, layer_distance, rate_series

__all__ = [
    "ADAPTER_ENV",
    "BackendSet",
    "CampaignResult",
    "CURVES_FILE",
    "LINEAGE_FILE",
    "REPORTS_FILE",
    "SEEDS_DIR",
    "STATS_FILE",
    "SUMMARY_FILE",
    "pairwise_max_rates",
    "render_stats",
    "run_campaign",
]

REPORTS_FILE = "reports.jsonl"
LINEAGE_FILE = "lineage.jsonl"
STATS_FILE = "stats.json"
CURVES_FILE = "curves.csv"
SUMMARY_FILE = "summary.json"
SEEDS_DIR = "seeds"

ADAPTER_ENV = "GRAPHMUT_ADAPTER"


class BackendSet:
    """Resolved executors keyed by a short alias; owns adapter processes.

    Config entries: ``reference``, ``optimized``, ``faulty`` (takes the
    campaign's fault switches), ``external:<command>``, or plain
    ``external`` which launches the command in $GRAPHMUT_ADAPTER.
    """

    def __init__(self, cfg: CampaignConfig, capture: CaptureOptions,
                 adapter_command: str | None = None):
        self.capture = capture
        self.runners: dict[str, object] = {}
        self.handles: list[AdapterHandle] = []
        external_names = [n for n in cfg.backends if n == "external" or n.startswith("external:")]
        ext_index = 0
        for name in cfg.backends:
            if name == "reference":
                alias, runner = "reference", self._plain(reference_interpret)
            elif name == "optimized":
                alias, runner = "optimized", self._plain(optimized_interpret)
            elif name == "faulty":
                faults = FaultSpec.from_config(cfg.faults)
                alias = "faulty"
                runner = lambda model, x, _f=faults: faulty_interpret(model, x, _f, self.capture)
            elif name in external_names:
                command = name.split(":", 1)[1] if ":" in name else \
                    (adapter_command or os.environ.get(ADAPTER_ENV, ""))
                if not command:
                    raise ValueError(
                        "external backend needs a command: use 'external:<cmd>' "
                        f"or set ${ADAPTER_ENV}"
                    )
                ext_index += 1
                alias = "external" if len(external_names) == 1 else f"external{ext_index}"
                handle = AdapterHandle(command)
                self.handles.append(handle)
                runner = lambda model, x, _h=handle: external_execute(_h, model, x, self.capture)
            else:
                raise ValueError(f"unknown backend {name!r}")
            if alias in self.runners:
                raise ValueError(f"duplicate backend {alias!r} in config")
            self.runners[alias] = runner

    def _plain(self, interpret):
        return lambda model, x: interpret(model, x, self.capture)

    def run(self, model: GraphModel, x: TensorValue) -> dict[str, ExecutionTrace]:
        traces = {}
        for alias, runner in self.runners.items():
            trace = runner(model, x)
            trace.backend_id = alias  # one label everywhere: map key == trace id
            traces[alias] = trace
        return traces

    def close(self) -> None:
        for handle in self.handles:
            handle.close()

    def __enter__(self) -> "BackendSet":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def pairwise_max_rates(traces: dict[str, ExecutionTrace], oracle_cfg) -> dict[str, float | None]:
    """Max growth rate per backend pair; None when no rate is computable."""
    out: dict[str, float | None] = {}
    ids = sorted(traces)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            key = f"{a}|{b}"
            ta, tb = traces[a], traces[b]
            if not (ta.layer_outputs and tb.layer_outputs):
                out[key] = None
                continue
            try:
                rates = rate_series(layer_distance(ta, tb), oracle_cfg)
            except AlignmentError:
                out[key] = None
                continue
            out[key] = max((v for _, v in rates.values), default=None) if rates.values else None
    return out


@dataclass
class _OperatorTally:
    generated: int = 0
    illegal: int = 0
    legal: int = 0
    exec_ms_sum: float = 0.0
    rate_sums: dict[str, float] = field(default_factory=dict)
    rate_counts: dict[str, int] = field(default_factory=dict)

    def to_obj(self) -> dict:
        mean_inconsistency = {
            pair: self.rate_sums[pair] / self.rate_counts[pair]
            for pair in sorted(self.rate_sums)
            if self.rate_counts.get(pair)
        }
        return {
            "mutants_generated": self.generated,
            "illegal": self.illegal,
            "illegal_rate": (self.illegal / self.generated) if self.generated else 0.0,
            "mean_execution_ms": (self.exec_ms_sum / self.legal) if self.legal else 0.0,
            "mean_inconsistency": mean_inconsistency,
        }


@dataclass
class CampaignResult:
    out_dir: Path
    generated: int
    legal: int
    illegal: int
    unique_reports: list[DefectReport]
    records: list[MutantRecord]

    @property
    def found_defects(self) -> bool:
        return bool(self.unique_reports)


def _report_obj(report: DefectReport) -> dict:
    return {
        "kind": report.kind,
        "taxonomy_id": report.taxonomy_id,
        "mutant": report.mutant,
        "pair": list(report.pair),
        "evidence": report.evidence,
        "dedup_key": report.dedup_key,
        "duplicate_count": report.duplicate_count,
    }


def run_campaign(cfg: CampaignConfig, out_dir, adapter_command: str | None = None) -> CampaignResult:
    """Run one campaign to its budget (or cap exhaustion) and persist results."""
    if len(cfg.backends) < 2:
        raise ValueError("a campaign needs at least two backends to compare")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    capture = CaptureOptions(timing_mode=cfg.timing_mode)
    engine = MutationEngine(cfg)

    seeds_dir = out / SEEDS_DIR
    seeds_dir.mkdir(exist_ok=True)
    for kind, model in engine.pool.seeds.items():
        native.save(model, seeds_dir / f"{kind}.gmod")

    raw_reports: list[DefectReport] = []
    records: list[MutantRecord] = []
    lineage_rows: list[dict] = []
    curve_rows: list[tuple] = []
    tallies: dict[str, _OperatorTally] = {}
    legal_count = illegal_count = 0

    with BackendSet(cfg, capture, adapter_command) as backends:
        for _ in range(cfg.budget):
            try:
                record, model = engine.next_mutant()
            except CampaignComplete:
                break
            input_seed = int(engine.rng.integers(2**63))
            x_arr = np.random.default_rng(input_seed).standard_normal(
                model.input.shape).astype(np.float32)
            x = TensorValue.from_array(x_arr)

            traces = backends.run(model, x)
            verdict = legality_check(traces, cfg, output_ids=list(model.outputs))
            record.legality = verdict
            records.append(record)

            tally = tallies.setdefault(record.operator, _OperatorTally())
            tally.generated += 1
            rates = pairwise_max_rates(traces, cfg.oracle)
            if verdict.is_legal:
                legal_count += 1
                tally.legal += 1
                tally.exec_ms_sum += sum(t.total_ms for t in traces.values())
                for pair, value in rates.items():
                    if value is not None:
                        tally.rate_sums[pair] = tally.rate_sums.get(pair, 0.0) + value
                        tally.rate_counts[pair] = tally.rate_counts.get(pair, 0) + 1
                engine.admit(record, model)
                _, reports = evaluate(model, traces, cfg.oracle, legality=verdict)
                for report in reports:
                    report.mutant = record.id
                raw_reports.extend(reports)
            else:
                illegal_count += 1
                tally.illegal += 1

            order_index = int(record.id.lstrip("m"))
            for pair in sorted(rates):
                curve_rows.append((order_index, record.operator, pair, rates[pair], verdict.status))
            lineage_rows.append({
                **record.to_obj(),
                "input_seed": input_seed,
                "sha256": hashlib.sha256(native.to_bytes(model)).hexdigest(),
            })

    unique = dedup(raw_reports)

    with open(out / REPORTS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for report in unique:
            fh.write(json.dumps(_report_obj(report), sort_keys=True) + "\n")

    meta = {"_meta": {"rng_seed": cfg.rng_seed, "seeds": list(cfg.seeds),
                      "operator_params": cfg.operator_params}}
    with open(out / LINEAGE_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for row in lineage_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    pairs = sorted({pair for tally in tallies.values() for pair in tally.rate_sums})
    stats = {
        "operators": {code: tallies[code].to_obj() for code in sorted(tallies)},
        "pairs": pairs,
        "totals": {"generated": len(records), "legal": legal_count, "illegal": illegal_count},
    }
    with open(out / STATS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(stats, fh, sort_keys=True, indent=2)
        fh.write("\n")

    with open(out / CURVES_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("order,operator,pair,maxR,legal\n")
        for order_index, operator, pair, value, status in curve_rows:
            rendered = "" if value is None else repr(value)
            fh.write(f"{order_index},{operator},{pair},{rendered},{status}\n")

    by_taxonomy: dict[str, int] = {}
    for report in unique:
        by_taxonomy[report.taxonomy_id] = by_taxonomy.get(report.taxonomy_id, 0) + 1
    summary = {
        "budget": cfg.budget,
        "generated": len(records),
        "legal": legal_count,
        "illegal": illegal_count,
        "raw_reports": len(raw_reports),
        "unique_defects": len(unique),
        "by_taxonomy": by_taxonomy,
        "seeds": list(cfg.seeds),
        "backends": list(cfg.backends),
        "rng_seed": cfg.rng_seed,
    }
    with open(out / SUMMARY_FILE, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")

    return CampaignResult(
        out_dir=out,
        generated=len(records),
        legal=legal_count,
        illegal=illegal_count,
        unique_reports=unique,
        records=records,
    )


def render_stats(stats: dict) -> str:
    """Human-readable operator table from a loaded ``stats.json`` object."""
    operators = stats.get("operators", {})
    if not operators:
        return "no mutants generated; the stats table is empty\n"
    pairs = stats.get("pairs", [])
    header = ["operator", "generated", "illegal", "mean-ms", f"max-R means ({', '.join(pairs)})"]
    rows = []
    for code in sorted(operators):
        entry = operators[code]
        means = entry.get("mean_inconsistency", {})
        triple = "(" + ",".join(f"{means[p]:.3f}" if p in means else "-" for p in pairs) + ")"
        rows.append([
            code,
            str(entry["mutants_generated"]),
            f"{entry['illegal_rate'] * 100:.2f}%",
            f"{entry['mean_execution_ms']:.3f}",
            triple,
        ])
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows)
    totals = stats.get("totals", {})
    lines.append("")
    lines.append(
        f"total: {totals.get('generated', 0)} generated, "
        f"{totals.get('legal', 0)} legal, {totals.get('illegal', 0)} illegal"
    )
    return "\n".join(lines) + "\n"
