"""Rule-based stage audit: twelve checks, per-stage diagnostics and the global score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .agent import (
    best_path,
    claimed_onsets,
    measure_item,
)
from .model import EvidenceItem, RcaTrace, SystemTopology, split_edge
from .sim import STEP_MS
from .taxonomy import (
    CHARACTERISTIC_SIGNAL,
    SEVERITY_RANK,
    Stage,
    classify_signals,
    compatible_classes,
    entity_kind,
    expected_modalities,
)

CHECKS = {
    Stage.S1: ("ep.window_onset", "ep.modality_coverage", "ep.scope_neighborhood"),
    Stage.S2: ("hs.grounding", "hs.anchoring", "hs.cross_layer"),
    Stage.S3: ("as.reachability", "as.temporal_order", "as.link_support"),
    Stage.S4: ("dr.calibration", "dr.ranking_consistency", "dr.verification_tests"),
}
CHECK_IDS = tuple(c for s in Stage for c in CHECKS[s])
CHECK_STAGE = {c: s for s, ids in CHECKS.items() for c in ids}

ANCHOR_SCORE = 0.5
ONSET_TOLERANCE_MS = STEP_MS
SCORE_TOLERANCE = 0.1
CALIBRATION_CONF = 0.9
MIN_SUPPORT = 2


@dataclass(frozen=True)
class SeverityThresholds:
    minor: float = 0.5

    def severity(self, score: float) -> str:
        if score >= 1.0:
            return "info"
        if score >= self.minor:
            return "minor"
        if score > 0.0:
            return "major"
        return "hard_violation"


@dataclass(frozen=True)
class AuditCheck:
    check_id: str
    stage: Stage
    score: float
    severity: str
    blame: tuple[str, ...] = ()
    message: str = ""


@dataclass(frozen=True)
class StageDiagnostics:
    stage: Stage
    checks: tuple[AuditCheck, ...]
    stage_severity: str
    stage_score: float

    def failing(self) -> list[AuditCheck]:
        return [c for c in self.checks if c.score < 1.0]


@dataclass(frozen=True)
class AuditReport:
    S: float
    diagnostics: tuple[StageDiagnostics, ...]
    weights: dict = field(default_factory=dict)

    def stage(self, s) -> StageDiagnostics:
        return self.diagnostics[Stage.parse(s) - 1]

    def check(self, check_id: str) -> AuditCheck:
        for d in self.diagnostics:
            for c in d.checks:
                if c.check_id == check_id:
                    return c
        raise KeyError(check_id)

    def scores(self) -> dict[str, float]:
        return {c.check_id: c.score for d in self.diagnostics for c in d.checks}


def uniform_weights() -> dict[str, float]:
    return {c: 1.0 / len(CHECK_IDS) for c in CHECK_IDS}


def validate_weights(weights) -> dict[str, float]:
    w = dict(weights)
    unknown = sorted(set(w) - set(CHECK_IDS))
    if unknown:
        raise ValueError(f"unknown check ids in weights: {unknown}")
    for c in CHECK_IDS:
        w.setdefault(c, 0.0)
    if any(v < 0 for v in w.values()):
        raise ValueError("weights must be non-negative")
    total = math.fsum(w.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {total!r}, expected 1")
    return {c: float(w[c]) for c in CHECK_IDS}


def weighted_score(scores: dict[str, float], weights: dict[str, float]) -> float:
    return math.fsum(weights[c] * scores[c] for c in CHECK_IDS)


# --- evidence backing --------------------------------------------------------


def item_backed(store, item: EvidenceItem, window) -> bool:
    """True iff re-measuring the item's claim against the store reproduces it."""
    got = measure_item(store, item.modality, item.target, item.signal, window)
    if got is None:
        return False
    onset, score = got
    return abs(score - item.anomaly_score) <= SCORE_TOLERANCE and abs(onset - item.window[0]) <= ONSET_TOLERANCE_MS


class _Ctx:
    """Per-trace cache of the facts several checks share."""

    def __init__(self, trace: RcaTrace, store, topo: SystemTopology):
        self.trace, self.store, self.topo = trace, store, topo
        ep = trace.ep
        self.window = ep.incident_window
        self.backed = {it.id: item_backed(store, it, self.window) for it in ep.items}
        self.items = ep.by_id

    def backed_items(self, entity=None):
        out = [it for it in self.trace.ep.items if self.backed[it.id]]
        if entity is not None:
            out = [it for it in out if it.target == entity]
        return out

    def anomalous_ep_entities(self, min_score: float = ANCHOR_SCORE) -> set[str]:
        return {
            it.target for it in self.backed_items()
            if split_edge(it.target) is None and it.anomaly_score >= min_score
        }

    def store_onset(self, entity):
        return self.store.onset(entity)


def _check(cid, score, thresholds, blame=(), message=""):
    score = min(1.0, max(0.0, float(score)))
    return AuditCheck(cid, Stage.parse(cid[:2].upper()), score, thresholds.severity(score),
                      tuple(blame), message)


# --- S1 -----------------------------------------------------------------------


def _s1(ctx: _Ctx, th):
    ep, store, topo = ctx.trace.ep, ctx.store, ctx.topo
    a, b = ep.incident_window
    onsets = {e: store.onset(e) for e in ep.entity_scope if store.onset(e) is not None}
    if not onsets:
        c1 = _check("ep.window_onset", 0.0, th, ("ep.window",), "no detectable onset inside the scope")
    else:
        first = min(onsets, key=lambda e: (onsets[e], e))
        inside = a <= onsets[first] < b
        c1 = _check("ep.window_onset", 1.0 if inside else 0.0, th, () if inside else ("ep.window",),
                    f"earliest onset on {first} {'inside' if inside else 'outside'} the window")

    unbacked = sorted(i for i, ok in ctx.backed.items() if not ok)
    if unbacked:
        c2 = _check("ep.modality_coverage", 0.0, th, unbacked, f"{len(unbacked)} items not reproduced by telemetry")
    else:
        onsets_claimed = claimed_onsets(ep)
        if not onsets_claimed:
            c2 = _check("ep.modality_coverage", 0.0, th, ("ep.items",), "no metric evidence")
        else:
            e = min(onsets_claimed, key=lambda x: (onsets_claimed[x], x))
            own = [it for it in ep.items if it.target == e]
            edges = [it for it in ep.items if (split_edge(it.target) or ("", ""))[1] == e]
            fc = classify_signals(it.signal for it in own) or "network_delay"
            expected = expected_modalities(fc, entity_kind(e))
            present = {it.modality for it in own + edges}
            got = [m for m in expected if m in present]
            c2 = _check("ep.modality_coverage", len(got) / len(expected), th,
                        () if len(got) == len(expected) else tuple(it.id for it in own),
                        f"{e}: {len(got)}/{len(expected)} expected modalities for {fc}")

    scope = set(ep.entity_scope)
    horizon = scope.union(*(topo.neighbors(e) for e in scope)) if scope else set()
    anomalous = {e for e in horizon if store.onset(e) is not None and store.onset(e) < b}
    if not anomalous:
        c3 = _check("ep.scope_neighborhood", 1.0, th, (), "no anomalous entity near the scope")
    else:
        first = min(anomalous, key=lambda e: (store.onset(e), e))
        if first not in scope or not ctx.backed_items(first):
            c3 = _check("ep.scope_neighborhood", 0.0, th, ("ep.scope",),
                        f"earliest anomalous entity {first} not covered by backed evidence")
        else:
            covered = len(anomalous & scope)
            c3 = _check("ep.scope_neighborhood", covered / len(anomalous), th,
                        () if covered == len(anomalous) else ("ep.scope",),
                        f"{covered}/{len(anomalous)} anomalous neighbors in scope")
    return (c1, c2, c3)


# --- S2 -----------------------------------------------------------------------


def _grounded(ctx: _Ctx, h) -> bool:
    if not h.support:
        return False
    signals = []
    for sid in h.support:
        it = ctx.items.get(sid)
        if it is None or not ctx.backed[sid]:
            return False
        pair = split_edge(it.target)
        if it.target != h.candidate_entity and not (pair and pair[1] == h.candidate_entity):
            return False
        if it.target == h.candidate_entity:
            signals.append(it.signal)
    return h.fault_class in compatible_classes(signals)


def _s2(ctx: _Ctx, th):
    hs = ctx.trace.hs
    bad = [h.id for h in hs.hypotheses if not _grounded(ctx, h)]
    c1 = _check("hs.grounding", 0.0 if bad else 1.0, th, bad,
                f"{len(bad)} hypotheses not grounded in backed evidence" if bad else "all hypotheses grounded")

    anomalous = ctx.anomalous_ep_entities()
    hyp_entities = {h.candidate_entity for h in hs.hypotheses}
    ids = tuple(h.id for h in hs.hypotheses)
    if not anomalous:
        c2 = _check("hs.anchoring", 1.0, th, (), "no anomalous entity to account for")
    elif len(hs.hypotheses) == 1 and len(anomalous) >= 2:
        c2 = _check("hs.anchoring", 0.0, th, ids, f"single hypothesis against {len(anomalous)} anomalous entities")
    else:
        onsets = {e: t for e, t in claimed_onsets(ctx.trace.ep).items() if e in anomalous}
        first = min(onsets, key=lambda e: (onsets[e], e)) if onsets else None
        if first is not None and first not in hyp_entities:
            c2 = _check("hs.anchoring", 0.0, th, ids or ("hs",), f"earliest anomalous entity {first} not hypothesized")
        else:
            covered = len(anomalous & hyp_entities)
            need = min(16, len(anomalous))
            c2 = _check("hs.anchoring", min(1.0, covered / need), th, () if covered >= need else ids,
                        f"{covered}/{need} anomalous entities hypothesized")

    kinds = {entity_kind(e) for e in anomalous}
    if not kinds:
        c3 = _check("hs.cross_layer", 1.0, th, (), "no anomalous layer")
    else:
        have = kinds & {entity_kind(e) for e in hyp_entities}
        c3 = _check("hs.cross_layer", len(have) / len(kinds), th, () if have == kinds else ids,
                    f"{len(have)}/{len(kinds)} anomalous layers hypothesized")
    return (c1, c2, c3)


# --- S3 -----------------------------------------------------------------------


def path_reachable(path, topo: SystemTopology) -> bool:
    if len(set(path.steps)) != len(path.steps):
        return False
    if any(s not in topo.entities for s in path.steps):
        return False
    return all(topo.is_link(u, v, path.direction) for u, v in path.links())


def path_temporal_ok(path, store) -> bool:
    truth = [store.onset(s) for s in path.steps]
    if any(t is None for t in truth):
        return False
    if any(b < a for a, b in zip(truth, truth[1:])):
        return False
    if len(path.onsets) != len(path.steps):
        return False
    return all(abs(c - t) <= ONSET_TOLERANCE_MS for c, t in zip(path.onsets, truth))


def link_supported(ctx: _Ctx, path, u, v) -> bool:
    for sid in path.link_support(u, v):
        it = ctx.items.get(sid)
        if it is None or not ctx.backed[sid]:
            continue
        pair = split_edge(it.target)
        if it.target in (u, v) or (pair and set(pair) == {u, v}):
            return True
    return False


def _s3(ctx: _Ctx, th):
    as_ = ctx.trace.as_
    if as_.insufficient_evidence or not as_.paths:
        msg = "analysis declared insufficient evidence" if as_.insufficient_evidence else "no propagation paths"
        return tuple(_check(c, 0.0, th, (), msg) for c in CHECKS[Stage.S3])
    topo, store = ctx.topo, ctx.store
    alert = store.alert[0]

    bad = [p.id for p in as_.paths if not path_reachable(p, topo) or p.steps[-1] != alert]
    c1 = _check("as.reachability", 0.0 if bad else 1.0, th, bad,
                f"{len(bad)} paths not topology-consistent" if bad else "all paths reachable")

    bad = [p.id for p in as_.paths if not path_temporal_ok(p, store)]
    best = best_path(as_, ctx.trace.ep)
    root = best.steps[0]
    root_onset = store.onset(root)
    for h in ctx.trace.hs.hypotheses:
        t = store.onset(h.candidate_entity)
        if h.candidate_entity == root or t is None:
            continue
        if (root_onset is None or t < root_onset) and root in topo.ancestors_of_effects(h.candidate_entity):
            bad.append(best.id)
            break
    bad = sorted(set(bad))
    c2 = _check("as.temporal_order", 0.0 if bad else 1.0, th, bad,
                f"{len(bad)} paths violate cause-before-effect" if bad else "onsets ordered")

    bad = [p.id for p in as_.paths if not all(link_supported(ctx, p, u, v) for u, v in p.links())]
    c3 = _check("as.link_support", 0.0 if bad else 1.0, th, bad,
                f"{len(bad)} paths with unsupported links" if bad else "every link supported")
    return (c1, c2, c3)


# --- S4 -----------------------------------------------------------------------


def derived_support(trace: RcaTrace, cand) -> set[str]:
    paths = {p.id: p for p in trace.as_.paths}
    out: set[str] = set()
    for pid in cand.derived_from:
        if pid in paths:
            out |= paths[pid].support_ids()
    return out


def _s4(ctx: _Ctx, th):
    trace, store = ctx.trace, ctx.store
    dr = trace.dr
    top = dr.top
    if top is None:
        return tuple(_check(c, 0.0, th, (), "empty ranking") for c in CHECKS[Stage.S4])

    n_support = len(derived_support(trace, top))
    over = top.confidence >= CALIBRATION_CONF and n_support < MIN_SUPPORT
    c1 = _check("dr.calibration", 0.0 if over else 1.0, th, ("rank:0",) if over else (),
                f"confidence {top.confidence:.3f} with {n_support} supporting items")

    as_ = trace.as_
    if as_.insufficient_evidence or not as_.paths:
        ok = dr.verification_first
        c2 = _check("dr.ranking_consistency", 1.0 if ok else 0.0, th, () if ok else ("rank:0",),
                    "insufficient analysis reported verification-first" if ok else
                    "confident ranking without analysis support")
    else:
        best = best_path(as_, trace.ep)
        agrees = top.entity == best.steps[0]
        separated = len(dr.ranking) < 2 or top.confidence > dr.ranking[1].confidence
        ok = agrees and separated
        blame = () if ok else (("rank:0", best.id) if not agrees else ("rank:0", "rank:1"))
        c2 = _check("dr.ranking_consistency", 1.0 if ok else 0.0, th, blame,
                    "top-1 matches best-supported path" if ok else
                    (f"top-1 {top.entity} vs best path root {best.steps[0]}" if not agrees else "top-1 not separated"))

    classes = {c.entity: c.fault_class for c in dr.ranking}

    def anomalous(test):
        return store.measure_metric(test.target, test.signal, ctx.window) is not None

    top_tests = [t for t in dr.verification_tests if t.target == top.entity]
    if not top_tests or not any(anomalous(t) for t in top_tests):
        c3 = _check("dr.verification_tests", 0.0, th, ("rank:0",), "no discriminative test for the top candidate")
    else:
        good = [
            t for t in dr.verification_tests
            if anomalous(t) and t.signal == CHARACTERISTIC_SIGNAL.get(classes.get(t.target, ""))
        ]
        frac = len(good) / len(dr.verification_tests)
        c3 = _check("dr.verification_tests", frac, th, () if frac == 1.0 else ("rank:0",),
                    f"{len(good)}/{len(dr.verification_tests)} tests discriminative and mechanism-consistent")
    return (c1, c2, c3)


_STAGE_FN = {Stage.S1: _s1, Stage.S2: _s2, Stage.S3: _s3, Stage.S4: _s4}


def _diagnostics(stage, checks, weights) -> StageDiagnostics:
    ws = [weights[c.check_id] for c in checks]
    total = math.fsum(ws)
    if total > 0:
        score = math.fsum(w * c.score for w, c in zip(ws, checks)) / total
    else:
        score = math.fsum(c.score for c in checks) / len(checks)
    sev = max((c.severity for c in checks), key=lambda s: SEVERITY_RANK[s])
    return StageDiagnostics(stage, tuple(checks), sev, min(1.0, max(0.0, score)))


def audit_stage(trace, s, store, topo, weights=None, thresholds=None, _ctx=None) -> StageDiagnostics:
    stage = Stage.parse(s)
    w = validate_weights(weights) if weights is not None else uniform_weights()
    ctx = _ctx or _Ctx(trace, store, topo)
    return _diagnostics(stage, _STAGE_FN[stage](ctx, thresholds or SeverityThresholds()), w)


def audit_trace(trace, store, topo, weights=None, thresholds=None) -> AuditReport:
    w = validate_weights(weights) if weights is not None else uniform_weights()
    ctx = _Ctx(trace, store, topo)
    th = thresholds or SeverityThresholds()
    diags = tuple(_diagnostics(s, _STAGE_FN[s](ctx, th), w) for s in Stage)
    scores = {c.check_id: c.score for d in diags for c in d.checks}
    return AuditReport(weighted_score(scores, w), diags, w)


def resolve_blame(trace: RcaTrace, ref: str) -> bool:
    """True iff a blame reference names something inside ``trace``."""
    if ref in ("ep.window", "ep.scope", "ep.items", "hs"):
        return True
    if ref.startswith("rank:"):
        try:
            return 0 <= int(ref[5:]) < len(trace.dr.ranking)
        except ValueError:
            return False
    ids = set(trace.ep.by_id) | {h.id for h in trace.hs.hypotheses} | {p.id for p in trace.as_.paths}
    return ref in ids
