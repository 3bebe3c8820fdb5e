"""Replay engine, counterfactual decisive-stage localization and the repair loop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import model
from .agent import (
    claimed_onsets,
    earliest_entity,
    entity_items,
    run_stage,
    tests_for,
    verification_first_report,
)
from .audit import audit_trace
from .model import DecisionReport, RankedCandidate, RcaTrace, replace_stage, split_edge
from .patches import (
    RECOLLECTION_OPERATORS,
    InsufficientEvidenceException,
    PatchError,
    StagePatch,
    all_operator_patches,
    apply_patch,
    auto_params,
    propose_candidates,
)
from .router import RouterConfig, route, severity_hint
from .taxonomy import MODALITIES, STAGES, Stage, classify_signals

VARIANTS = ("full", "no_fast_slow", "no_cce")


@dataclass(frozen=True)
class RepairConfig:
    delta: float = 0.05
    K: int = 3
    I: int = 3
    topk_fallback: int = 3

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.I < 1:
            raise ValueError("I must be at least 1")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.topk_fallback < 1:
            raise ValueError("topk_fallback must be at least 1")


@dataclass(frozen=True)
class CandidateOutcome:
    stage: Stage
    k: int
    patch: StagePatch
    replayed_trace: RcaTrace
    delta_S: float
    replay_cost: int
    S_before: float = 0.0
    S_after: float = 0.0

    def summary(self) -> dict:
        return {"stage": self.stage.name, "k": self.k, "operator": self.patch.operator,
                "produced_by": self.patch.produced_by, "delta_S": self.delta_S,
                "replay_cost": self.replay_cost, "S_after": self.S_after}


@dataclass
class ReplayStats:
    executions: int = 0
    per_stage: dict = field(default_factory=dict)
    replays: int = 0

    def tick(self, stage: Stage):
        self.executions += 1
        self.per_stage[stage.name] = self.per_stage.get(stage.name, 0) + 1


def replay(trace: RcaTrace, s, patch: StagePatch, executor, store, topo, seed: int = 0,
           stats: ReplayStats | None = None) -> RcaTrace:
    """Replace stage ``s`` with the patched artifact and re-run every later stage."""
    s = Stage.parse(s)
    if patch.stage != s:
        raise ValueError(f"patch targets {patch.stage.name}, replay asked for {s.name}")
    stats = stats if stats is not None else ReplayStats()
    stats.replays += 1
    artifact = apply_patch(trace, patch, store, topo)
    out = replace_stage(trace, s, artifact, ref=patch.ref())
    for stage in STAGES:
        if stage <= s:
            continue
        art = run_stage(executor, stage, out.upstream(stage), store, topo, seed)
        stats.tick(stage)
        out = out.with_artifact(stage, art)
        if stage is Stage.S3 and art.insufficient_evidence and out.hs.hypotheses:
            raise InsufficientEvidenceException(
                f"replay after {patch.operator} found no feasible causal chain"
            )
    return out


# --- repair memory -----------------------------------------------------------


def _bucket_degree(n: int) -> str:
    return "0" if n == 0 else "1" if n == 1 else "2+"


def _bucket_sparsity(n: int) -> str:
    return "low" if n < 10 else "mid" if n < 30 else "high"


def incident_signature(trace: RcaTrace, topo) -> dict:
    ep = trace.ep
    counts = {m: 0 for m in MODALITIES}
    for it in ep.items:
        counts[it.modality] = counts.get(it.modality, 0) + 1
    dominant = max(MODALITIES, key=lambda m: (counts[m], -MODALITIES.index(m)))
    r = earliest_entity(ep)
    guess = classify_signals(it.signal for it in entity_items(ep, r)) if r else None
    top = trace.dr.top.entity if trace.dr.top else r
    degree = len(topo.callees(top)) if top in topo.services else 0
    return {
        "modality": dominant,
        "fault_class": guess or "unknown",
        "degree": _bucket_degree(degree),
        "sparsity": _bucket_sparsity(len(ep.items)),
    }


@dataclass(frozen=True)
class MemoryEntry:
    signature: dict
    stage: Stage
    template: dict
    delta_S: float


class RepairMemory:
    """Append-ordered table of successful repairs keyed by incident signature."""

    def __init__(self, entries=(), delta: float = 0.05):
        self.entries = list(entries)
        self.delta = delta

    def __len__(self):
        return len(self.entries)

    def lookup(self, signature: dict) -> list[dict]:
        hits = [(i, e) for i, e in enumerate(self.entries) if e.signature == signature]
        hits.sort(key=lambda ie: (-ie[1].delta_S, ie[0]))
        out, seen = [], set()
        for i, e in hits:
            key = (e.stage, e.template["operator"])
            if key in seen:
                continue
            seen.add(key)
            out.append({"id": i, "stage": e.stage.name, "operator": e.template["operator"], "delta_S": e.delta_S})
        return out

    def record(self, entry: MemoryEntry) -> bool:
        if entry.delta_S < self.delta:
            return False
        self.entries.append(entry)
        return True

    def snapshot(self) -> "RepairMemory":
        return RepairMemory(list(self.entries), self.delta)

    def to_json(self) -> str:
        return json.dumps({"delta": self.delta, "entries": [model.encode(e) for e in self.entries]},
                          sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RepairMemory":
        raw = json.loads(text)
        entries = [MemoryEntry(e["signature"], Stage.parse(e["stage"]), e["template"], e["delta_S"])
                   for e in raw.get("entries", ())]
        return cls(entries, raw.get("delta", 0.05))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RepairMemory":
        p = Path(path)
        return cls.from_json(p.read_text()) if p.exists() else cls()


def memory_lookup(memory: RepairMemory, signature: dict) -> list[dict]:
    return memory.lookup(signature)


def memory_record(memory: RepairMemory, entry: MemoryEntry) -> RepairMemory:
    memory.record(entry)
    return memory


# --- counterfactual evaluation --------------------------------------------


class _Env:
    def __init__(self, executor, store, topo, seed, weights, stats):
        self.executor, self.store, self.topo, self.seed = executor, store, topo, seed
        self.weights = weights
        self.stats = stats

    def audit(self, trace):
        return audit_trace(trace, self.store, self.topo, self.weights)

    def evaluate(self, trace, S, patch, k) -> CandidateOutcome:
        before = self.stats.executions
        replayed = replay(trace, patch.stage, patch, self.executor, self.store, self.topo, self.seed, self.stats)
        S2 = self.audit(replayed).S
        return CandidateOutcome(patch.stage, k, patch, replayed, S2 - S, self.stats.executions - before, S, S2)


@dataclass(frozen=True)
class Localization:
    stage: Stage | None
    best: CandidateOutcome | None
    outcomes: tuple = ()
    rolled_back: bool = False


def _probe_stage(env, trace, S, cands, delta, outcomes, early_exit_memory=True):
    best = None
    for k, patch in enumerate(cands):
        out = env.evaluate(trace, S, patch, k)
        outcomes.append(out)
        if best is None or out.delta_S > best.delta_S:
            best = out
        if early_exit_memory and patch.produced_by.startswith("memory:") and out.delta_S >= delta:
            break
    return best


def localize_decisive_stage(trace, report, cfg: RepairConfig, executor, store, topo, seed=0,
                            weights=None, memory_templates=None, stats=None, allow_rollback=True,
                            critic=None) -> Localization:
    """s* = the first stage whose best candidate improves S by at least delta."""
    env = _Env(executor, store, topo, seed, weights if weights is not None else report.weights,
               stats if stats is not None else ReplayStats())
    outcomes: list[CandidateOutcome] = []
    try:
        for s in STAGES:
            cands = propose_candidates(trace, report.stage(s), store, topo, cfg.K, memory_templates, critic=critic)
            best = _probe_stage(env, trace, report.S, cands, cfg.delta, outcomes)
            if best is not None and best.delta_S >= cfg.delta:
                return Localization(s, best, tuple(outcomes))
    except InsufficientEvidenceException:
        if not allow_rollback:
            raise
        return _rollback(env, trace, report, cfg, outcomes)
    return Localization(None, None, tuple(outcomes))


def _rollback(env, trace, report, cfg, outcomes) -> Localization:
    """Recollect evidence at S1; a second infeasible chain propagates to the caller."""
    cands = []
    for op in RECOLLECTION_OPERATORS:
        try:
            cands.append(StagePatch(Stage.S1, op, auto_params(op, trace, env.store, env.topo), "rollback",
                                    "evidence recollection after infeasible chain"))
        except PatchError:
            continue
    try:
        best = _probe_stage(env, trace, report.S, cands, cfg.delta, outcomes, early_exit_memory=False)
    except InsufficientEvidenceException as exc:
        exc.attempted = [c.operator for c in cands]
        raise
    if best is not None and best.delta_S >= cfg.delta:
        return Localization(Stage.S1, best, tuple(outcomes), rolled_back=True)
    return Localization(None, None, tuple(outcomes), rolled_back=True)


def exhaustive_minimal_stage(trace, report, executor, store, topo, seed=0, delta=0.05, weights=None):
    """Oracle: probe all sixteen operators stage by stage; first stage with ΔS ≥ delta."""
    env = _Env(executor, store, topo, seed, weights if weights is not None else report.weights, ReplayStats())
    per_stage = {}
    for s in STAGES:
        best = None
        for k, patch in enumerate(all_operator_patches(trace, s, store, topo)):
            try:
                out = env.evaluate(trace, report.S, patch, k)
            except (PatchError, InsufficientEvidenceException):
                continue
            if best is None or out.delta_S > best:
                best = out.delta_S
        per_stage[s] = best
    for s in STAGES:
        if per_stage[s] is not None and per_stage[s] >= delta:
            return s, per_stage
    return None, per_stage


# --- repair loop ------------------------------------------------------------


@dataclass(frozen=True)
class RepairResult:
    final_trace: RcaTrace
    outcome: str
    decisive_stage: Stage | None
    rounds_used: int
    replay_log: tuple = ()
    initial_S: float = 0.0
    final_S: float = 0.0
    localized_stage: Stage | None = None
    history: tuple = ()
    executions: int = 0
    candidates_evaluated: int = 0
    rollbacks: int = 0
    committed: tuple = ()
    committed_kinds: tuple = ()

    def to_dict(self, full_log: bool = True) -> dict:
        out = {
            "outcome": self.outcome,
            "decisive_stage": self.decisive_stage.name if self.decisive_stage else None,
            "localized_stage": self.localized_stage.name if self.localized_stage else None,
            "rounds_used": self.rounds_used,
            "initial_S": self.initial_S,
            "final_S": self.final_S,
            "history": list(self.history),
            "executions": self.executions,
            "candidates_evaluated": self.candidates_evaluated,
            "rollbacks": self.rollbacks,
            "committed": [dict(c.summary(), kind=k) for c, k in zip(self.committed, self.committed_kinds)],
            "final_trace": model.encode(self.final_trace),
        }
        if full_log:
            out["replay_log"] = [dict(o.summary(), replayed_trace=model.encode(o.replayed_trace))
                                 for o in self.replay_log]
        else:
            out["replay_log"] = [o.summary() for o in self.replay_log]
        return out


def fallback_report(trace: RcaTrace, k: int) -> DecisionReport:
    """Conservative verification-first DR over the top-k candidates."""
    if trace.hs.hypotheses:
        return verification_first_report(trace.hs, trace.ep, k)
    onsets = claimed_onsets(trace.ep)
    ents = sorted(onsets, key=lambda e: (onsets[e], e))[:k]
    if not ents:
        ents = sorted({it.target for it in trace.ep.items if split_edge(it.target) is None})[:k]
    if not ents:
        ents = list(trace.dr.ranking and [trace.dr.ranking[0].entity] or [])
    ranking = tuple(
        RankedCandidate(e, classify_signals(it.signal for it in entity_items(trace.ep, e)) or "network_delay",
                        round(0.3 / max(1, len(ents)), 12), ())
        for e in ents
    )
    return DecisionReport(ranking, tests_for(ranking, len(ranking)), True)


def repair(trace: RcaTrace, bundle, executor, router_cfg: RouterConfig | None = None,
           repair_cfg: RepairConfig | None = None, memory: RepairMemory | None = None,
           seed: int | None = None, weights=None, variant: str = "full", critic=None) -> RepairResult:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    router_cfg = router_cfg or RouterConfig()
    cfg = repair_cfg or RepairConfig()
    seed = trace.seed if seed is None else seed
    store, topo = bundle.store, bundle.topology
    stats = ReplayStats()
    env = _Env(executor, store, topo, seed, weights, stats)
    report = env.audit(trace)
    initial_S = report.S
    if route(report, router_cfg).kind == "pass":
        return RepairResult(trace, "passed", None, 0, (), initial_S, initial_S, history=())

    templates = memory.lookup(incident_signature(trace, topo)) if memory is not None else None
    cur = trace
    log: list[CandidateOutcome] = []
    committed: list[CandidateOutcome] = []
    history = []
    kinds = []
    rollbacks = 0
    rounds = 0
    exhausted = False
    while rounds < cfg.I and report.S < router_cfg.tau:
        rounds += 1
        decision = route(report, router_cfg)
        kind = decision.kind
        if variant == "no_fast_slow" and kind == "fast":
            kind = "slow"
        chosen = None
        path_taken = kind
        if kind == "fast":
            hint = decision.blamed_stage_hint
            cands = propose_candidates(cur, report.stage(hint), store, topo, 1, templates, critic=critic)
            if cands:
                try:
                    out = env.evaluate(cur, report.S, cands[0], 0)
                    log.append(out)
                    if out.S_after >= router_cfg.tau:
                        chosen = out
                except (InsufficientEvidenceException, PatchError):
                    pass
            if chosen is None:
                path_taken = "fast->slow"
        if chosen is None:
            if variant == "no_cce":
                hint = severity_hint(report)
                cands = propose_candidates(cur, report.stage(hint), store, topo, 1, templates, critic=critic)
                if cands:
                    try:
                        chosen = env.evaluate(cur, report.S, cands[0], 0)
                        log.append(chosen)
                    except (InsufficientEvidenceException, PatchError):
                        exhausted = True
                path_taken = "hinted"
            else:
                try:
                    loc = localize_decisive_stage(cur, report, cfg, executor, store, topo, seed, report.weights,
                                                  templates, stats, critic=critic)
                except InsufficientEvidenceException as exc:
                    rollbacks += 1
                    exhausted = True
                    history.append({"round": rounds, "path": "rollback-failed", "stage": "S1", "S": report.S,
                                    "rollback_operators": getattr(exc, "attempted", [])})
                    break
                log.extend(loc.outcomes)
                rollbacks += int(loc.rolled_back)
                chosen = loc.best if loc.stage is not None else None
                if loc.rolled_back:
                    path_taken = "rollback"
        if chosen is None:
            history.append({"round": rounds, "path": path_taken, "stage": None, "S": report.S})
            exhausted = True
            break
        committed.append(chosen)
        kinds.append(path_taken if path_taken in ("fast", "hinted") else "slow")
        cur = chosen.replayed_trace
        report = env.audit(cur)
        if memory is not None and chosen.delta_S >= cfg.delta:
            memory.record(MemoryEntry(incident_signature(trace, topo), chosen.stage,
                                      {"operator": chosen.patch.operator}, chosen.delta_S))
        top = cur.dr.top.entity if cur.dr.top else None
        history.append({"round": rounds, "path": path_taken, "stage": chosen.stage.name,
                        "operator": chosen.patch.operator, "S": report.S, "top1": top})

    localized = committed[0].stage if committed else None
    common = dict(replay_log=tuple(log), initial_S=initial_S, localized_stage=localized,
                  history=tuple(history), executions=stats.executions, candidates_evaluated=stats.replays,
                  rollbacks=rollbacks, committed=tuple(committed), committed_kinds=tuple(kinds))
    if report.S >= router_cfg.tau and committed and not exhausted:
        outcome = "fast_repaired" if kinds[0] == "fast" else "slow_repaired"
        return RepairResult(cur, outcome, localized, rounds, final_S=report.S, **common)
    fb = fallback_report(cur, cfg.topk_fallback)
    final = replace(replace_stage(cur, Stage.S4, fb, ref={"stage": "S4", "operator": "verification_first_fallback"}))
    meta = dict(final.meta)
    meta["fallback"] = "no score claim"
    final = replace(final, meta=meta)
    return RepairResult(final, "verification_first_fallback", None, rounds, final_S=env.audit(final).S, **common)
