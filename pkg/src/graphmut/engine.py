"""Mutant generation: weighted selection, lineage records, capped budgets.

The engine grows a population of mutants from a handful of seed models.
Each call to :meth:`MutationEngine.next_mutant` picks a base (a seed or
an already-accepted mutant, shallow lineages preferred), an operator
(drawn family-first so the configured family proportions hold exactly),
and a site (backbone-biased), applies one mutation step, and returns the
new model together with a lineage record that can reproduce it
bit-for-bit later.  Per-operator application caps bound the campaign;
when nothing selectable remains the engine signals completion.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import native, operators
from .ir import GraphError, GraphModel, RegionTag
from .oracles import Legality, OracleConfig, legality_check
from .seeds import SEED_KINDS, generate_seed

__all__ = [
    "CampaignComplete",
    "CampaignConfig",
    "MissingSeedError",
    "MutantRecord",
    "MutationEngine",
    "MutationStep",
    "SeedPool",
    "default_caps",
    "legality_check",
    "lineage_matches",
    "replay",
    "select_operator",
    "select_site",
    "selectable_operators",
]

DEFAULT_FAMILY_WEIGHTS = {"structure": 4.0, "input": 2.0, "parameter": 1.0, "weight": 2.0}

_BASE_ATTEMPTS = 32


class CampaignComplete(Exception):
    """Every selectable operator has exhausted its application cap."""


class MissingSeedError(Exception):
    """A lineage references a seed the pool does not hold."""


def default_caps(depth: int) -> dict[str, int]:
    """Per-operator application caps, scaled by seed depth (node count).

    Removal-style operators get tight caps on shallow models — a dozen
    removals would hollow a 13-node seed out entirely — while weight
    operators, which never change the topology, keep a flat cap.
    """
    if depth < 15:
        lr, arfm, other = 5, 5, 10
    elif depth <= 40:
        lr, arfm, other = 20, 10, 40
    else:
        lr, arfm, other = 50, 20, 100
    caps = {code: other for code in operators.OPERATOR_CODES}
    caps["LR"] = lr
    caps["ARFm"] = arfm
    for code in operators.FAMILIES["weight"]:
        caps[code] = 100
    return caps


@dataclass(frozen=True)
class MutationStep:
    """One applied mutation: operator code, site, and the rng seed used."""

    operator: str
    node_id: str
    detail: str | int | None
    seed: int

    def to_obj(self) -> dict:
        return {"operator": self.operator, "node": self.node_id,
                "detail": self.detail, "seed": self.seed}

    @classmethod
    def from_obj(cls, obj: dict) -> "MutationStep":
        return cls(operator=obj["operator"], node_id=obj["node"],
                   detail=obj.get("detail"), seed=int(obj["seed"]))


@dataclass
class MutantRecord:
    """A mutant's identity and full recipe back to its seed."""

    id: str
    seed_id: str
    steps: tuple[MutationStep, ...]
    legality: Legality = field(default_factory=Legality.pending)

    @property
    def order(self) -> int:
        return len(self.steps)

    @property
    def operator(self) -> str:
        """The operator of the step that created this mutant."""
        return self.steps[-1].operator

    def to_obj(self) -> dict:
        return {
            "id": self.id,
            "seed": self.seed_id,
            "steps": [s.to_obj() for s in self.steps],
            "legality": {"status": self.legality.status, "reason": self.legality.reason},
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "MutantRecord":
        leg = obj.get("legality", {})
        return cls(
            id=obj["id"],
            seed_id=obj["seed"],
            steps=tuple(MutationStep.from_obj(s) for s in obj["steps"]),
            legality=Legality(status=leg.get("status", "pending"), reason=leg.get("reason")),
        )


@dataclass
class CampaignConfig:
    """Everything a campaign run needs, loadable from a JSON file."""

    budget: int = 200
    seeds: tuple[str, ...] = ("tiny-cnn", "tiny-resblock")
    backends: tuple[str, ...] = ("reference", "optimized")
    family_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_FAMILY_WEIGHTS))
    operator_weights: dict[str, float] = field(default_factory=dict)
    operator_params: dict[str, dict] = field(default_factory=dict)
    backbone_bias: float = 0.7
    order_bias: float = 0.97
    legality_bound: float = 1e36
    rng_seed: int = 0
    caps: dict[str, int] | None = None
    pool_limit: int = 64
    timing_mode: str = "virtual"
    faults: dict = field(default_factory=dict)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for kind in self.seeds:
            if kind not in SEED_KINDS:
                raise ValueError(f"unknown seed kind {kind!r}; choose from {SEED_KINDS}")
        if not 0.0 <= self.backbone_bias <= 1.0:
            raise ValueError("backbone_bias must lie in [0, 1]")
        if not 0.0 < self.order_bias <= 1.0:
            raise ValueError("order_bias must lie in (0, 1]")
        if self.legality_bound <= 0.0:
            raise ValueError("legality_bound must be positive")
        if self.pool_limit < 1:
            raise ValueError("pool_limit must be >= 1")
        unknown = set(self.family_weights) - set(operators.FAMILIES)
        if unknown:
            raise ValueError(f"unknown operator families in weights: {sorted(unknown)}")
        if any(w < 0 for w in self.family_weights.values()):
            raise ValueError("family weights must be nonnegative")
        if not any(w > 0 for w in self.family_weights.values()):
            raise ValueError("family weights must not all be zero")
        bad_ops = set(self.operator_weights) - set(operators.OPERATOR_CODES)
        if bad_ops:
            raise ValueError(f"unknown operator codes in weights: {sorted(bad_ops)}")
        if any(w < 0 for w in self.operator_weights.values()):
            raise ValueError("operator weights must be nonnegative")
        if self.caps is not None and any(v < 0 for v in self.caps.values()):
            raise ValueError("operator caps must be nonnegative")

    @classmethod
    def from_obj(cls, raw: dict) -> "CampaignConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(raw)
        for key in ("seeds", "backends"):
            if key in data:
                data[key] = tuple(data[key])
        if "oracle" in data and not isinstance(data["oracle"], OracleConfig):
            try:
                data["oracle"] = OracleConfig(**data["oracle"])
            except TypeError as exc:
                raise ValueError(f"bad oracle section: {exc}") from exc
        cfg = cls(**data)
        # the campaign-level bound governs the legality partition; keep the
        # oracle view consistent unless the file pinned them separately
        if "legality_bound" in raw and "oracle" in raw and \
                "legality_bound" not in raw["oracle"]:
            cfg.oracle = replace(cfg.oracle, legality_bound=cfg.legality_bound)
        return cfg

    @classmethod
    def from_file(cls, path) -> "CampaignConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
        return cls.from_obj(raw)


class SeedPool:
    """Seeds plus a bounded window of accepted mutants to build on.

    When the window is full, the deepest (then newest) mutant is evicted
    first, so shallow lineages stick around and the population does not
    run away into ever-longer mutation chains.
    """

    def __init__(self, seeds: dict[str, GraphModel], limit: int = 64):
        if not seeds:
            raise ValueError("seed pool needs at least one seed")
        self.seeds = dict(seeds)
        self.limit = limit
        self.live: dict[str, tuple[MutantRecord, GraphModel]] = {}
        self._seq: dict[str, int] = {}
        self._admitted = 0

    def admit(self, record: MutantRecord, model: GraphModel) -> None:
        """Add an accepted mutant, evicting the deepest entry if full."""
        if len(self.live) >= self.limit:
            victim = max(self.live, key=lambda mid: (self.live[mid][0].order, self._seq[mid]))
            del self.live[victim]
            del self._seq[victim]
        self.live[record.id] = (record, model)
        self._seq[record.id] = self._admitted
        self._admitted += 1

    def bases(self) -> list[tuple[str, MutantRecord | None, GraphModel]]:
        """Candidate bases: every seed, then every live mutant."""
        out: list[tuple[str, MutantRecord | None, GraphModel]] = [
            (sid, None, model) for sid, model in self.seeds.items()
        ]
        out.extend((mid, record, model) for mid, (record, model) in self.live.items())
        return out


def selectable_operators(cfg: CampaignConfig, remaining: dict[str, int]) -> list[str]:
    """Operator codes that still have cap budget and positive weight."""
    out = []
    for fam, codes in operators.FAMILIES.items():
        if cfg.family_weights.get(fam, 0.0) <= 0.0:
            continue
        out.extend(
            code for code in codes
            if remaining.get(code, 0) > 0 and cfg.operator_weights.get(code, 1.0) > 0.0
        )
    return out


def select_operator(cfg: CampaignConfig, remaining: dict[str, int],
                    rng: np.random.Generator,
                    exclude: frozenset[str] | set[str] = frozenset()) -> str | None:
    """Draw an operator: family by configured weight, then op within it.

    Operators with exhausted caps, zero weight, or in ``exclude`` do not
    participate; a family with nothing left drops out of the family
    draw.  Returns None when no operator is selectable.
    """
    choices: list[tuple[float, list[str]]] = []
    for fam, codes in operators.FAMILIES.items():
        fam_weight = cfg.family_weights.get(fam, 0.0)
        if fam_weight <= 0.0:
            continue
        avail = [
            code for code in codes
            if code not in exclude
            and remaining.get(code, 0) > 0
            and cfg.operator_weights.get(code, 1.0) > 0.0
        ]
        if avail:
            choices.append((fam_weight, avail))
    if not choices:
        return None
    fam_weights = np.array([w for w, _ in choices], dtype=np.float64)
    fam_idx = int(rng.choice(len(choices), p=fam_weights / fam_weights.sum()))
    codes = choices[fam_idx][1]
    op_weights = np.array(
        [cfg.operator_weights.get(code, 1.0) for code in codes], dtype=np.float64
    )
    return codes[int(rng.choice(len(codes), p=op_weights / op_weights.sum()))]


def select_site(model: GraphModel, op: operators.MutationOperator,
                backbone_bias: float, rng: np.random.Generator) -> operators.MutationSite | None:
    """Pick a site, favouring the backbone region with probability ``backbone_bias``.

    Falls back to the full site set when the drawn region has nothing to
    offer; returns None when the operator has no site at all.
    """
    sites = operators.applicable_sites(model, op)
    if not sites:
        return None
    backbone = [s for s in sites if model.regions.get(s.node_id) is RegionTag.BACKBONE]
    head = [s for s in sites if model.regions.get(s.node_id) is not RegionTag.BACKBONE]
    chosen = backbone if rng.random() < backbone_bias else head
    if not chosen:
        chosen = sites
    return chosen[int(rng.integers(len(chosen)))]


class MutationEngine:
    """Stateful mutant generator for one campaign."""

    def __init__(self, cfg: CampaignConfig, seed_models: dict[str, GraphModel] | None = None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.rng_seed)
        if seed_models is None:
            seed_models = {kind: generate_seed(kind, self.rng) for kind in cfg.seeds}
        self.pool = SeedPool(seed_models, limit=cfg.pool_limit)
        depth = min(len(m.nodes) for m in seed_models.values())
        self.caps = dict(cfg.caps) if cfg.caps is not None else default_caps(depth)
        self.remaining = dict(self.caps)
        self.operators = {op.code: op for op in operators.catalog(cfg.operator_params)}
        self._counter = 0

    def _pick_base(self) -> tuple[str, MutantRecord | None, GraphModel]:
        entries = self.pool.bases()
        weights = np.array(
            [self.cfg.order_bias ** (record.order if record else 0)
             for _, record, _ in entries],
            dtype=np.float64,
        )
        idx = int(self.rng.choice(len(entries), p=weights / weights.sum()))
        return entries[idx]

    def next_mutant(self) -> tuple[MutantRecord, GraphModel]:
        """Apply one fresh mutation step to some base; raises CampaignComplete
        when every operator with selection weight has hit its cap."""
        if not selectable_operators(self.cfg, self.remaining):
            raise CampaignComplete("all operator caps exhausted")
        for _ in range(_BASE_ATTEMPTS):
            base_id, base_record, base_model = self._pick_base()
            tried: set[str] = set()
            while True:
                code = select_operator(self.cfg, self.remaining, self.rng, exclude=tried)
                if code is None:
                    break  # nothing applies to this base; draw another
                op = self.operators[code]
                site = select_site(base_model, op, self.cfg.backbone_bias, self.rng)
                if site is None:
                    tried.add(code)
                    continue
                step_seed = int(self.rng.integers(2**63))
                try:
                    outcome = operators.apply(
                        base_model, op, site, np.random.default_rng(step_seed)
                    )
                except GraphError:
                    tried.add(code)
                    continue
                self.remaining[code] -= 1
                self._counter += 1
                step = MutationStep(operator=code, node_id=site.node_id,
                                    detail=site.detail, seed=step_seed)
                record = MutantRecord(
                    id=f"m{self._counter:04d}",
                    seed_id=base_record.seed_id if base_record else base_id,
                    steps=(base_record.steps if base_record else ()) + (step,),
                )
                return record, outcome.model
        raise CampaignComplete("no base admits any remaining operator")

    def admit(self, record: MutantRecord, model: GraphModel) -> None:
        """Accept a legality-cleared mutant into the base pool."""
        self.pool.admit(record, model)

    def replay(self, record: MutantRecord) -> GraphModel:
        return replay(record, self.pool.seeds, self.operators)


def replay(record: MutantRecord, seeds: dict[str, GraphModel],
           operator_table: dict[str, operators.MutationOperator] | None = None) -> GraphModel:
    """Rebuild a mutant from its lineage; bit-identical to the original.

    ``operator_table`` must carry the same operator parameters the
    campaign ran with (the engine's own table does).
    """
    if record.seed_id not in seeds:
        raise MissingSeedError(f"lineage {record.id} needs unknown seed {record.seed_id!r}")
    if operator_table is None:
        operator_table = {op.code: op for op in operators.catalog()}
    model = seeds[record.seed_id]
    for step in record.steps:
        op = operator_table[step.operator]
        site = operators.MutationSite(step.node_id, step.detail)
        model = operators.apply(model, op, site, np.random.default_rng(step.seed)).model
    return model


def lineage_matches(record: MutantRecord, model: GraphModel,
                    seeds: dict[str, GraphModel],
                    operator_table: dict[str, operators.MutationOperator] | None = None) -> bool:
    """True when replaying the record reproduces ``model`` byte for byte."""
    return native.to_bytes(replay(record, seeds, operator_table)) == native.to_bytes(model)
