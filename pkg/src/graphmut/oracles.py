"""Trace comparison: distance/rate metrics, defect oracles, classification.

The pipeline runs in a fixed order.  First the legality partition: a
mutant whose misbehaviour shows up on *every* backend (universal crash,
universal NaN, out-of-float32-range outputs) is the mutation's own
fault and produces no reports.  Only Legal mutants reach the five
oracles, each of which turns one flavour of cross-backend divergence
into a DefectReport:

1. NaN/Inf appearing on some but not all backends;
2. crashes on some but not all backends;
3. the layer-to-layer inconsistency growth rate exceeding a threshold;
4. one backend running disproportionately slower;
5. allocation failure or disproportionate peak memory on some backends.

Reports are classified into a defect-taxonomy id and deduplicated by a
structural key so one underlying defect reported by many mutants
collapses into a single record with a duplicate count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ir import GraphModel
from .backends.trace import STAGES, ExecutionTrace

__all__ = [
    "AlignmentError",
    "DefectReport",
    "DistanceSeries",
    "KIND_CRASH",
    "KIND_EFFICIENCY",
    "KIND_INCONSISTENCY",
    "KIND_MEMORY",
    "KIND_NAN",
    "Legality",
    "OracleConfig",
    "RateSeries",
    "classify",
    "crash_oracle",
    "dedup",
    "efficiency_oracle",
    "evaluate",
    "inconsistency_oracle",
    "layer_distance",
    "legality_check",
    "memory_oracle",
    "nan_oracle",
    "rate_series",
]

KIND_CRASH = "Crash"
KIND_NAN = "NAN"
KIND_INCONSISTENCY = "Inconsistency"
KIND_EFFICIENCY = "Efficiency"
KIND_MEMORY = "Memory"


class AlignmentError(Exception):
    """Two traces share no common executed layer to compare."""


@dataclass(frozen=True)
class OracleConfig:
    """Thresholds for the metric and resource oracles.

    ``epsilon`` keeps the rate denominator away from zero;
    ``threshold_t`` is the strict bound the inconsistency rate must
    exceed to count; the two ratio thresholds govern the efficiency and
    memory oracles; ``legality_bound`` is the output-magnitude limit
    past which a mutant is judged illegal rather than defective.
    """

    epsilon: float = 1e-7
    threshold_t: float = 1e3
    efficiency_ratio: float = 1.3
    memory_ratio: float = 2.0
    legality_bound: float = 1e36

    def __post_init__(self):
        for name in ("epsilon", "threshold_t", "efficiency_ratio", "memory_ratio", "legality_bound"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.threshold_t < 1.0:
            raise ValueError("threshold_t must be >= 1")


@dataclass(frozen=True)
class DistanceSeries:
    """Per-layer mean absolute distance between two traces.

    ``values`` covers the common executed prefix in capture order;
    layers carrying NaN/Inf in either trace are listed in
    ``nan_layers`` and excluded from ``values``.
    """

    pair: tuple[str, str]
    values: tuple[tuple[str, float], ...]
    nan_layers: tuple[str, ...] = ()


@dataclass(frozen=True)
class RateSeries:
    """Layer-to-layer growth rate of a distance series.

    Entries start at the second distance layer: each rate compares a
    layer's distance against its direct precursor's.
    """

    pair: tuple[str, str]
    values: tuple[tuple[str, float], ...]

    def max_entry(self) -> tuple[str, float] | None:
        best = None
        for nid, rate in self.values:
            if best is None or rate > best[1]:
                best = (nid, rate)
        return best


@dataclass
class DefectReport:
    """One detected divergence, classified and ready for dedup."""

    kind: str
    pair: tuple[str, ...]
    evidence: dict
    taxonomy_id: str = ""
    mutant: str | None = None
    dedup_key: str = ""
    duplicate_count: int = 1


@dataclass(frozen=True)
class Legality:
    """Verdict of the legality partition: pending, legal, or illegal(reason)."""

    status: str
    reason: str | None = None

    @classmethod
    def pending(cls) -> "Legality":
        return cls("pending")

    @classmethod
    def legal(cls) -> "Legality":
        return cls("legal")

    @classmethod
    def illegal(cls, reason: str) -> "Legality":
        return cls("illegal", reason)

    @property
    def is_legal(self) -> bool:
        return self.status == "legal"

    @property
    def is_illegal(self) -> bool:
        return self.status == "illegal"


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def layer_distance(trace_m: ExecutionTrace, trace_n: ExecutionTrace) -> DistanceSeries:
    """Mean absolute elementwise distance per common captured layer.

    Alignment is by node id over the executed prefix both traces share
    (a crash simply shortens the comparable prefix).  A layer whose
    output holds NaN/Inf on either side is flagged and left out of the
    distance values rather than poisoning the mean.
    """
    pair = (trace_m.backend_id, trace_n.backend_id)
    common = [nid for nid in trace_m.layer_outputs if nid in trace_n.layer_outputs]
    if not common:
        raise AlignmentError(f"no common executed layer between {pair[0]} and {pair[1]}")
    values: list[tuple[str, float]] = []
    nan_layers: list[str] = []
    for nid in common:
        m = trace_m.layer_outputs[nid]
        n = trace_n.layer_outputs[nid]
        if m.shape != n.shape:
            raise AlignmentError(f"layer {nid!r} shapes differ: {m.shape} vs {n.shape}")
        a = m.data.astype(np.float64)
        b = n.data.astype(np.float64)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            nan_layers.append(nid)
            continue
        values.append((nid, float(np.mean(np.abs(a - b)))))
    return DistanceSeries(pair=pair, values=tuple(values), nan_layers=tuple(nan_layers))


def rate_series(d: DistanceSeries, cfg: OracleConfig) -> RateSeries:
    """Growth rate between consecutive layer distances.

    Each entry is |(D_i - D_prev) / (D_prev + epsilon)|, rounded to
    float32 so the boundary case 1e-4 / 1e-7 lands on 1000.0 exactly
    instead of picking up a spurious last-bit excess.  A series shorter
    than two layers yields an empty result.
    """
    if len(d.values) < 2:
        return RateSeries(pair=d.pair, values=())
    rates = []
    for (_, previous), (nid, current) in zip(d.values, d.values[1:]):
        quotient = abs((current - previous) / (previous + cfg.epsilon))
        rates.append((nid, float(np.float32(quotient))))
    return RateSeries(pair=d.pair, values=tuple(rates))


# --------------------------------------------------------------------------
# Legality partition
# --------------------------------------------------------------------------


def _final_values(trace: ExecutionTrace, output_ids: list[str] | None) -> list[np.ndarray]:
    if output_ids:
        return [trace.layer_outputs[nid].data for nid in output_ids if nid in trace.layer_outputs]
    if trace.layer_outputs:
        last = next(reversed(trace.layer_outputs))
        return [trace.layer_outputs[last].data]
    return []


def legality_check(traces: dict[str, ExecutionTrace], cfg,
                   output_ids: list[str] | None = None) -> Legality:
    """Partition a mutant: failures shared by every backend are its own.

    ``cfg`` is anything carrying a ``legality_bound``.  ``output_ids``
    names the graph outputs used for the range check; without it the
    last captured layer stands in.
    """
    if len(traces) < 2:
        raise ValueError("legality check needs at least two traces")
    ts = list(traces.values())
    if all(t.crashed for t in ts):
        return Legality.illegal("universal-crash")
    if all(t.nan_nodes() for t in ts):
        return Legality.illegal("universal-nan")
    bound = cfg.legality_bound
    survivors = [t for t in ts if not t.crashed]
    out_of_range = []
    for t in survivors:
        finals = _final_values(t, output_ids)
        out_of_range.append(
            bool(finals) and all(np.any(np.abs(v) > bound) for v in finals)
        )
    if survivors and all(out_of_range):
        return Legality.illegal("range")
    return Legality.legal()


# --------------------------------------------------------------------------
# Oracles
# --------------------------------------------------------------------------


def _node_kind(model: GraphModel | None, nid: str | None) -> str:
    if model is not None and nid is not None and nid in model.nodes:
        return model.nodes[nid].kind
    return ""


def nan_oracle(traces: dict[str, ExecutionTrace], cfg: OracleConfig,
               model: GraphModel | None = None) -> DefectReport | None:
    """NaN/Inf on some but not all backends."""
    offending = {bid: t.nan_nodes() for bid, t in traces.items()}
    with_nan = [bid for bid in sorted(offending) if offending[bid]]
    if not with_nan or len(with_nan) == len(traces):
        return None
    first_node = offending[with_nan[0]][0]
    return DefectReport(
        kind=KIND_NAN,
        pair=tuple(sorted(traces)),
        evidence={
            "node": first_node,
            "node_kind": _node_kind(model, first_node),
            "backends_with_nan": with_nan,
        },
    )


def crash_oracle(traces: dict[str, ExecutionTrace], cfg: OracleConfig,
                 model: GraphModel | None = None) -> DefectReport | None:
    """Crash on some but not all backends; evidence is the earliest stage."""
    crashed = [bid for bid in sorted(traces) if traces[bid].crashed]
    if not crashed or len(crashed) == len(traces):
        return None
    earliest = min(crashed, key=lambda bid: STAGES.index(traces[bid].crash_stage))
    trace = traces[earliest]
    return DefectReport(
        kind=KIND_CRASH,
        pair=tuple(sorted(traces)),
        evidence={
            "stage": trace.crash_stage,
            "signature": trace.crash_signature,
            "node": trace.crash_node,
            "node_kind": _node_kind(model, trace.crash_node),
            "backends_crashed": crashed,
        },
    )


def inconsistency_oracle(r: RateSeries, cfg: OracleConfig,
                         model: GraphModel | None = None) -> DefectReport | None:
    """Maximum layer-to-layer rate strictly above the threshold."""
    best = r.max_entry()
    if best is None:
        return None
    nid, rate = best
    if not rate > cfg.threshold_t:
        return None
    return DefectReport(
        kind=KIND_INCONSISTENCY,
        pair=r.pair,
        evidence={
            "node": nid,
            "node_kind": _node_kind(model, nid),
            "max_rate": rate,
        },
    )


def efficiency_oracle(traces: dict[str, ExecutionTrace], cfg: OracleConfig,
                      model: GraphModel | None = None) -> DefectReport | None:
    """One backend disproportionately slower, in total or on one layer.

    Fires when the total-time ratio exceeds the threshold, or — so a
    single slowed-down layer cannot hide inside a large total — when
    any common layer's time ratio does.  Evidence names the layer with
    the dominant absolute time gap.
    """
    if any(t.crashed for t in traces.values()):
        return None
    totals = {bid: t.total_ms for bid, t in traces.items()}
    if len(totals) < 2 or min(totals.values()) <= 0.0:
        return None
    total_ratio = max(totals.values()) / min(totals.values())

    common = set.intersection(*(set(t.layer_times) for t in traces.values()))
    dominant, dominant_gap, layer_ratio = None, -1.0, 1.0
    for nid in common:
        times = [traces[bid].layer_times[nid] for bid in traces]
        low, high = min(times), max(times)
        gap = high - low
        if gap > dominant_gap:
            dominant, dominant_gap = nid, gap
        if low > 0.0:
            layer_ratio = max(layer_ratio, high / low)

    if not (total_ratio > cfg.efficiency_ratio or layer_ratio > cfg.efficiency_ratio):
        return None
    return DefectReport(
        kind=KIND_EFFICIENCY,
        pair=tuple(sorted(traces)),
        evidence={
            "total_ratio": total_ratio,
            "layer_ratio": layer_ratio,
            "node": dominant,
            "node_kind": _node_kind(model, dominant),
            "totals_ms": {bid: totals[bid] for bid in sorted(totals)},
        },
    )


def memory_oracle(traces: dict[str, ExecutionTrace], cfg: OracleConfig,
                  model: GraphModel | None = None) -> DefectReport | None:
    """Allocation failure or peak-memory blowup on some backends only."""
    failed = [bid for bid in sorted(traces) if traces[bid].alloc_failed]
    if failed and len(failed) < len(traces):
        first = traces[failed[0]]
        return DefectReport(
            kind=KIND_MEMORY,
            pair=tuple(sorted(traces)),
            evidence={
                "alloc_failed_backends": failed,
                "node": first.crash_node,
                "node_kind": _node_kind(model, first.crash_node),
            },
        )
    if failed:
        return None  # all failed: illegal upstream, nothing to report
    peaks = {bid: t.peak_mem_bytes for bid, t in traces.items()}
    if len(peaks) < 2 or min(peaks.values()) <= 0:
        return None
    ratio = max(peaks.values()) / min(peaks.values())
    if not ratio > cfg.memory_ratio:
        return None
    return DefectReport(
        kind=KIND_MEMORY,
        pair=tuple(sorted(traces)),
        evidence={
            "peak_ratio": ratio,
            "peaks": {bid: peaks[bid] for bid in sorted(peaks)},
            "node": None,
            "node_kind": "",
        },
    )


# --------------------------------------------------------------------------
# Classification and dedup
# --------------------------------------------------------------------------

_CRASH_STAGE_IDS = {"build": "G1", "load": "G3", "infer": "G2"}
_KIND_IDS = {
    KIND_NAN: "F2",
    KIND_INCONSISTENCY: "F1",
    KIND_EFFICIENCY: "E1",
    KIND_MEMORY: "B1",
}


def classify(report: DefectReport, traces: dict[str, ExecutionTrace] | None = None) -> str:
    """Assign the taxonomy id implied by the report kind (and crash stage)."""
    if report.kind == KIND_CRASH:
        stage = report.evidence.get("stage")
        if stage is None and traces is not None:
            stages = [t.crash_stage for t in traces.values() if t.crashed]
            stage = min(stages, key=STAGES.index) if stages else None
        if stage not in _CRASH_STAGE_IDS:
            raise ValueError(f"crash report with unknown stage {stage!r}")
        report.taxonomy_id = _CRASH_STAGE_IDS[stage]
    elif report.kind in _KIND_IDS:
        report.taxonomy_id = _KIND_IDS[report.kind]
    else:
        raise ValueError(f"unknown report kind {report.kind!r}")
    return report.taxonomy_id


def _decade_bucket(value: float) -> str:
    if not math.isfinite(value) or value <= 0.0:
        return "inf"
    return f"1e{int(math.floor(math.log10(value)))}"


def _metric_bucket(report: DefectReport) -> str:
    if report.kind == KIND_CRASH:
        return str(report.evidence.get("signature") or "")
    if report.kind == KIND_INCONSISTENCY:
        return _decade_bucket(report.evidence["max_rate"])
    if report.kind == KIND_EFFICIENCY:
        ratio = max(report.evidence.get("total_ratio", 1.0), report.evidence.get("layer_ratio", 1.0))
        return f"{ratio:.1f}"
    if report.kind == KIND_MEMORY:
        if "alloc_failed_backends" in report.evidence:
            return "alloc"
        return f"{report.evidence.get('peak_ratio', 0.0):.1f}"
    return ""


def dedup_key(report: DefectReport) -> str:
    parts = (
        report.kind,
        report.taxonomy_id,
        report.evidence.get("node_kind") or "",
        _metric_bucket(report),
    )
    return "|".join(parts)


def dedup(reports: list[DefectReport]) -> list[DefectReport]:
    """Collapse reports sharing a dedup key; first occurrence represents all.

    The surviving report's ``duplicate_count`` is the total number of
    raw reports behind it (1 when it was unique).
    """
    unique: dict[str, DefectReport] = {}
    for report in reports:
        key = report.dedup_key or dedup_key(report)
        report.dedup_key = key
        if key in unique:
            unique[key].duplicate_count += 1
        else:
            report.duplicate_count = 1
            unique[key] = report
    return list(unique.values())


# --------------------------------------------------------------------------
# Whole-mutant evaluation
# --------------------------------------------------------------------------


def evaluate(model: GraphModel, traces: dict[str, ExecutionTrace],
             cfg: OracleConfig, legality: Legality | None = None) -> tuple[Legality, list[DefectReport]]:
    """Legality partition, then every oracle, classified, in stable order.

    Illegal mutants yield no reports.  Inconsistency runs per backend
    pair over the common executed prefix; the other oracles look at the
    trace map as a whole.  Reports come back classified but duplicates
    included — dedup is the campaign's job.  A caller that already ran
    the partition (possibly under a different bound) passes its verdict
    as ``legality``.
    """
    if legality is None:
        legality = legality_check(traces, cfg, output_ids=list(model.outputs))
    if not legality.is_legal:
        return legality, []

    reports: list[DefectReport] = []
    for oracle in (crash_oracle, nan_oracle):
        found = oracle(traces, cfg, model=model)
        if found is not None:
            reports.append(found)

    backend_ids = sorted(traces)
    for i, bid_m in enumerate(backend_ids):
        for bid_n in backend_ids[i + 1:]:
            trace_m, trace_n = traces[bid_m], traces[bid_n]
            if not (trace_m.layer_outputs and trace_n.layer_outputs):
                continue
            try:
                distances = layer_distance(trace_m, trace_n)
            except AlignmentError:
                continue
            rates = rate_series(distances, cfg)
            found = inconsistency_oracle(rates, cfg, model=model)
            if found is not None:
                reports.append(found)

    for oracle in (efficiency_oracle, memory_oracle):
        found = oracle(traces, cfg, model=model)
        if found is not None:
            reports.append(found)

    for report in reports:
        classify(report, traces)
        report.dedup_key = dedup_key(report)
    return legality, reports
