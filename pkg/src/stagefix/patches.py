"""Stage critics and the sixteen schema-preserving patch operators."""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field, replace

from . import audit as _audit
from .agent import (
    HYPOTHESIS_MIN_SCORE,
    claimed_onsets,
    collect_evidence,
    anomaly_closure,
    hypothesis_for,
    order_hypotheses,
    rank_from_analysis,
    tests_for,
    verification_first_report,
)
from .model import (
    AnalysisStructure,
    DecisionReport,
    EvidencePackage,
    Hypothesis,
    HypothesisSet,
    PropagationPath,
    VerificationTest,
    link_key,
    sort_ranking,
    split_edge,
)
from .taxonomy import (
    CHARACTERISTIC_SIGNAL,
    COUNTER_CLASS,
    MODALITIES,
    OPERATOR_STAGE,
    PATCH_OPERATORS,
    SEVERITY_RANK,
    Stage,
    entity_kind,
)

WINDOW_MARGIN_MS = 2 * 60_000

CHECK_OPERATORS = {
    "ep.window_onset": ("shift_expand_window", "realign_timestamps"),
    "ep.modality_coverage": ("requery_modality",),
    "ep.scope_neighborhood": ("expand_scope_neighbors", "requery_modality"),
    "hs.grounding": ("remove_unsupported",),
    "hs.anchoring": ("add_alternatives", "add_counter_hypotheses"),
    "hs.cross_layer": ("add_cross_layer", "add_alternatives"),
    "as.reachability": ("rebuild_reachable_chain", "prune_hallucinated_edges"),
    "as.temporal_order": ("restore_temporal_order", "rebuild_reachable_chain"),
    "as.link_support": ("attach_link_support", "prune_hallucinated_edges"),
    "dr.calibration": ("recalibrate_confidence",),
    "dr.ranking_consistency": ("align_ranking_with_analysis",),
    "dr.verification_tests": ("replace_verification_tests", "match_actions_to_mechanism"),
}

# operators allowed during an S1 rollback: they re-read telemetry rather than edit claims
RECOLLECTION_OPERATORS = ("shift_expand_window", "requery_modality", "expand_scope_neighbors")


class PatchError(ValueError):
    pass


class InsufficientEvidenceException(PatchError):
    """No topology-consistent, temporally ordered, supported chain exists."""


@dataclass(frozen=True)
class StagePatch:
    stage: Stage
    operator: str
    params: dict = field(default_factory=dict)
    produced_by: str = "manual"
    rationale: str = ""

    def __post_init__(self):
        stage = Stage.parse(self.stage)
        object.__setattr__(self, "stage", stage)
        if self.operator not in OPERATOR_STAGE:
            raise ValueError(f"unknown patch operator {self.operator!r}")
        if OPERATOR_STAGE[self.operator] != stage:
            raise ValueError(f"{self.operator} is an {OPERATOR_STAGE[self.operator].name} operator, not {stage.name}")

    def ref(self) -> dict:
        return {"stage": self.stage.name, "operator": self.operator, "params": self.params,
                "produced_by": self.produced_by}


# --- helpers -------------------------------------------------------------------


def _ctx(trace, store, topo):
    return _audit._Ctx(trace, store, topo)


def _backed_ep(ctx) -> EvidencePackage:
    ep = ctx.trace.ep
    return replace(ep, items=tuple(it for it in ep.items if ctx.backed[it.id]))


def _with_items(ep: EvidencePackage, extra) -> tuple:
    merged = {it.id: it for it in ep.items}
    for it in extra:
        merged[it.id] = it
    return tuple(sorted(merged.values(), key=lambda it: it.id))


def _earliest_visible_onset(ep, store, topo):
    near = set(ep.entity_scope) | set(anomaly_closure(store, topo, [store.alert[0]], (store.horizon[0], ep.incident_window[1])))
    onsets = [store.onset(e) for e in near if store.onset(e) is not None]
    return min(onsets) if onsets else None


# --- S1 operators ------------------------------------------------------------


def _shift_expand_window(trace, params, store, topo):
    ep = trace.ep
    start = min(ep.incident_window[0], int(params["start"]))
    end = max(ep.incident_window[1], int(params.get("end", ep.incident_window[1])))
    window = (start, end)
    return EvidencePackage(window, ep.entity_scope, collect_evidence(store, ep.entity_scope, window))


def _requery_modality(trace, params, store, topo):
    ep = trace.ep
    mods = tuple(m for m in MODALITIES if m in params.get("modalities", MODALITIES))
    if not mods:
        raise PatchError("requery_modality needs at least one modality")
    kept = [it for it in ep.items if it.modality not in mods]
    fresh = collect_evidence(store, ep.entity_scope, ep.incident_window, mods)
    return EvidencePackage(ep.incident_window, ep.entity_scope,
                           tuple(sorted(kept + list(fresh), key=lambda it: it.id)))


def _expand_scope_neighbors(trace, params, store, topo):
    ep = trace.ep
    add = set(params.get("add", ())) - set(ep.entity_scope)
    unknown = sorted(e for e in add if e not in topo.entities)
    if unknown:
        raise PatchError(f"unknown entities {unknown}")
    scope = tuple(sorted(set(ep.entity_scope) | add))
    fresh = collect_evidence(store, scope, ep.incident_window)
    new = [it for it in fresh if it.id not in ep.by_id]
    return EvidencePackage(ep.incident_window, scope, _with_items(ep, new))


def _realign_timestamps(trace, params, store, topo):
    ep = trace.ep
    from .agent import measure_item

    a, b = ep.incident_window
    first = _earliest_visible_onset(ep, store, topo)
    if first is not None and first < a:
        a = first - WINDOW_MARGIN_MS
    window = (a, b)
    items = []
    for it in ep.items:
        got = measure_item(store, it.modality, it.target, it.signal, window)
        items.append(replace(it, window=(got[0], b)) if got else it)
    return EvidencePackage(window, ep.entity_scope, tuple(items))


# --- S2 operators ------------------------------------------------------------


def _remove_unsupported(trace, params, store, topo):
    drop = set(params.get("remove", ()))
    kept = tuple(h for h in trace.hs.hypotheses if h.id not in drop)
    return HypothesisSet(kept)


def _add_entities(trace, entities, store, topo, ctx=None):
    ctx = ctx or _ctx(trace, store, topo)
    bep = _backed_ep(ctx)
    have = {h.id for h in trace.hs.hypotheses}
    new = []
    for e in entities:
        h = hypothesis_for(bep, e)
        if h is not None and h.id not in have:
            new.append(h)
    if not new:
        raise PatchError("no groundable hypothesis to add")
    return HypothesisSet(order_hypotheses(list(trace.hs.hypotheses) + new, trace.ep, topo, store.alert[0], cap=10 ** 6))


def _add_alternatives(trace, params, store, topo):
    return _add_entities(trace, params.get("entities", ()), store, topo)


def _add_counter_hypotheses(trace, params, store, topo):
    want = set(params.get("ids", ()))
    have = {h.id for h in trace.hs.hypotheses}
    new = []
    for h in trace.hs.hypotheses:
        counter = COUNTER_CLASS.get(h.fault_class)
        if h.id in want and counter:
            hid = f"h:{h.candidate_entity}:{counter}"
            if hid not in have:
                new.append(Hypothesis(hid, h.candidate_entity, counter, h.support,
                                      rationale=f"counter-hypothesis to {h.fault_class}"))
                have.add(hid)
    if not new:
        raise PatchError("no counter-hypothesis applicable")
    return HypothesisSet(trace.hs.hypotheses + tuple(new))


def _add_cross_layer(trace, params, store, topo):
    return _add_entities(trace, params.get("entities", ()), store, topo)


# --- S3 operators ------------------------------------------------------------


def _path_valid(ctx, p, alert):
    return (
        _audit.path_reachable(p, ctx.topo)
        and p.steps[-1] == alert
        and _audit.path_temporal_ok(p, ctx.store)
        and all(_audit.link_supported(ctx, p, u, v) for u, v in p.links())
    )


def _backed_link_support(ctx, u, v):
    ids = []
    for it in ctx.backed_items():
        if it.anomaly_score < HYPOTHESIS_MIN_SCORE:
            continue
        pair = split_edge(it.target)
        if it.target == v or (pair and set(pair) == {u, v}):
            ids.append(it.id)
    return tuple(sorted(ids))


def feasible_chain(ctx, candidate):
    """BFS for the shortest effect walk candidate -> alert meeting every S3 constraint."""
    store, topo = ctx.store, ctx.topo
    alert = store.alert[0]
    onsets = claimed_onsets(_backed_ep(ctx))

    def on_time(e):
        t, s = onsets.get(e), store.onset(e)
        return t is not None and s is not None and abs(t - s) <= _audit.ONSET_TOLERANCE_MS

    if not on_time(candidate) or not on_time(alert):
        return None
    if candidate == alert:
        return PropagationPath(f"p:{candidate}", (candidate,), (onsets[candidate],), {})
    prev = {candidate: None}
    queue = deque([candidate])
    while queue and alert not in prev:
        u = queue.popleft()
        for v in sorted(topo.effects(u)):
            if v in prev or not on_time(v):
                continue
            if store.onset(v) < store.onset(u) or onsets[v] < onsets[u]:
                continue
            if not _backed_link_support(ctx, u, v):
                continue
            prev[v] = u
            queue.append(v)
    if alert not in prev:
        return None
    steps = [alert]
    while prev[steps[-1]] is not None:
        steps.append(prev[steps[-1]])
    steps.reverse()
    support = {link_key(u, v): _backed_link_support(ctx, u, v) for u, v in zip(steps, steps[1:])}
    return PropagationPath(f"p:{candidate}", tuple(steps), tuple(onsets[s] for s in steps), support,
                           rationale=f"rebuilt chain from {candidate}")


def _rebuild_reachable_chain(trace, params, store, topo, ctx=None):
    ctx = ctx or _ctx(trace, store, topo)
    alert = store.alert[0]
    kept = [p for p in trace.as_.paths if _path_valid(ctx, p, alert)]
    covered = {p.steps[0] for p in kept}
    for h in trace.hs.hypotheses:
        e = h.candidate_entity
        if e in covered:
            continue
        p = feasible_chain(ctx, e)
        if p is not None:
            if any(q.id == p.id for q in kept):
                p = replace(p, id=f"{p.id}:rebuilt")
            kept.append(p)
            covered.add(e)
    if not kept:
        raise InsufficientEvidenceException("no hypothesized root has a feasible chain to the alerted entity")
    return AnalysisStructure(tuple(kept), False)


def _prune_hallucinated_edges(trace, params, store, topo):
    targets = set(params.get("path_ids", ()))
    alert = store.alert[0]
    out = []
    for p in trace.as_.paths:
        if p.id not in targets:
            out.append(p)
            continue
        keep = list(range(len(p.steps)))
        # drop interior steps that touch no real link
        for i in range(1, len(p.steps) - 1):
            x = p.steps[i]
            if x not in topo.entities or (
                not topo.is_link(p.steps[i - 1], x, p.direction) and not topo.is_link(x, p.steps[i + 1], p.direction)
            ):
                keep.remove(i)
        steps = [p.steps[i] for i in keep]
        onsets = [p.onsets[i] for i in keep] if len(p.onsets) == len(p.steps) else []
        # keep the longest valid suffix that still ends at the alerted entity
        cut = len(steps) - 1
        while cut > 0 and topo.is_link(steps[cut - 1], steps[cut], p.direction):
            cut -= 1
        steps, onsets = steps[cut:], onsets[cut:]
        if not steps or steps[-1] != alert:
            continue
        ids = set(p.support_ids())
        support = {link_key(u, v): tuple(sorted(ids & set(_merged_support(p, u, v))))
                   for u, v in zip(steps, steps[1:])}
        out.append(replace(p, steps=tuple(steps), onsets=tuple(onsets), support=support))
    if not out:
        raise PatchError("pruning removed every path")
    return AnalysisStructure(tuple(out), False)


def _merged_support(p, u, v):
    got = p.link_support(u, v)
    return got if got else tuple(p.support_ids())


def _restore_temporal_order(trace, params, store, topo, ctx=None):
    ctx = ctx or _ctx(trace, store, topo)
    targets = set(params.get("path_ids", ()))
    claimed = claimed_onsets(_backed_ep(ctx))
    out = []
    for p in trace.as_.paths:
        if p.id not in targets:
            out.append(p)
            continue
        ons = tuple(claimed.get(s, store.onset(s) if store.onset(s) is not None else 0) for s in p.steps)
        truth = [store.onset(s) for s in p.steps]
        steps, direction, support = p.steps, p.direction, dict(p.support)
        if None not in truth and any(b < a for a, b in zip(truth, truth[1:])):
            rev = tuple(reversed(p.steps))
            rtruth = list(reversed(truth))
            if all(b >= a for a, b in zip(rtruth, rtruth[1:])):
                steps = rev
                ons = tuple(reversed(ons))
                direction = "call" if p.direction == "reverse" else "reverse"
                support = {link_key(u, v): p.link_support(v, u) for u, v in zip(steps, steps[1:])}
            else:
                # truncate to the ordered suffix ending at the alert
                cut = len(truth) - 1
                while cut > 0 and truth[cut - 1] <= truth[cut]:
                    cut -= 1
                steps, ons = steps[cut:], ons[cut:]
                support = {link_key(u, v): p.link_support(u, v) for u, v in zip(steps, steps[1:])}
        out.append(replace(p, steps=steps, onsets=ons, direction=direction, support=support))
    return AnalysisStructure(tuple(out), False)


def _attach_link_support(trace, params, store, topo, ctx=None):
    ctx = ctx or _ctx(trace, store, topo)
    targets = set(params.get("path_ids", ()))
    out, attached = [], 0
    for p in trace.as_.paths:
        if p.id not in targets:
            out.append(p)
            continue
        support = dict(p.support)
        for u, v in p.links():
            if not _audit.link_supported(ctx, p, u, v):
                ids = _backed_link_support(ctx, u, v) or _backed_link_support(ctx, v, u)
                if ids:
                    support[link_key(u, v)] = tuple(sorted(set(p.link_support(u, v)) | set(ids)))
                    attached += 1
        out.append(replace(p, support=support))
    if not attached:
        raise PatchError("no backed evidence to attach")
    return AnalysisStructure(tuple(out), trace.as_.insufficient_evidence)


# --- S4 operators ------------------------------------------------------------


def calibration_cap(n_support: int) -> float:
    return min(0.5 + 0.1 * n_support, 0.95)


def _recalibrate_confidence(trace, params, store, topo):
    dr = trace.dr
    ranking = []
    for c in dr.ranking:
        cap = calibration_cap(len(_audit.derived_support(trace, c)))
        ranking.append(replace(c, confidence=min(c.confidence, cap)))
    return replace(dr, ranking=sort_ranking(ranking))


def _align_ranking_with_analysis(trace, params, store, topo):
    as_ = trace.as_
    if as_.insufficient_evidence or not as_.paths:
        k = int(params.get("k", 3))
        return verification_first_report(trace.hs, trace.ep, k)
    ranking = rank_from_analysis(as_, trace.hs, trace.ep)
    return DecisionReport(ranking, trace.dr.verification_tests, False)


def _replace_verification_tests(trace, params, store, topo):
    dr = trace.dr
    n = int(params.get("n", 2))
    if not dr.ranking:
        raise PatchError("no ranking to derive tests from")
    return replace(dr, verification_tests=tests_for(dr.ranking, n))


def _match_actions_to_mechanism(trace, params, store, topo):
    dr = trace.dr
    if not dr.ranking:
        raise PatchError("no ranking to match tests against")
    classes = {c.entity: c.fault_class for c in dr.ranking}
    seen, tests = set(), []
    for t in dr.verification_tests:
        if t.target not in classes:
            continue
        sig = CHARACTERISTIC_SIGNAL.get(classes[t.target], t.signal)
        fixed = VerificationTest(t.target, f"confirm sustained {sig} deviation on {t.target}", sig)
        if (fixed.target, fixed.signal) not in seen:
            seen.add((fixed.target, fixed.signal))
            tests.append(fixed)
    if dr.top.entity not in {t.target for t in tests}:
        tests = list(tests_for(dr.ranking, 1)) + tests
    return replace(dr, verification_tests=tuple(tests))


_APPLY = {
    "shift_expand_window": _shift_expand_window,
    "requery_modality": _requery_modality,
    "expand_scope_neighbors": _expand_scope_neighbors,
    "realign_timestamps": _realign_timestamps,
    "remove_unsupported": _remove_unsupported,
    "add_alternatives": _add_alternatives,
    "add_counter_hypotheses": _add_counter_hypotheses,
    "add_cross_layer": _add_cross_layer,
    "rebuild_reachable_chain": _rebuild_reachable_chain,
    "prune_hallucinated_edges": _prune_hallucinated_edges,
    "restore_temporal_order": _restore_temporal_order,
    "attach_link_support": _attach_link_support,
    "recalibrate_confidence": _recalibrate_confidence,
    "align_ranking_with_analysis": _align_ranking_with_analysis,
    "replace_verification_tests": _replace_verification_tests,
    "match_actions_to_mechanism": _match_actions_to_mechanism,
}
assert set(_APPLY) == set(OPERATOR_STAGE)


def apply_patch(trace, patch: StagePatch, store, topo):
    """Return only the patched stage artifact; the rest of the trace is untouched."""
    if trace.artifact(patch.stage) is None:
        raise PatchError(f"trace has no {patch.stage.name} artifact")
    return _APPLY[patch.operator](trace, dict(patch.params), store, topo)


# --- automatic parameters ---------------------------------------------------


def auto_params(operator: str, trace, store, topo, ctx=None) -> dict:
    """Parameters a rule critic would choose for ``operator`` on this trace."""
    ctx = ctx or _ctx(trace, store, topo)
    ep = trace.ep
    if operator == "shift_expand_window":
        first = _earliest_visible_onset(ep, store, topo)
        if first is None:
            raise PatchError("no detectable onset to widen toward")
        return {"start": min(ep.incident_window[0], first - WINDOW_MARGIN_MS), "end": ep.incident_window[1]}
    if operator == "requery_modality":
        return {"modalities": list(MODALITIES)}
    if operator == "expand_scope_neighbors":
        window = ep.incident_window
        seeds = {store.alert[0]} | (set(ep.entity_scope) & store.anomalous_entities(window))
        core = anomaly_closure(store, topo, seeds, window)
        want = set(core)
        for e in core:
            want.update(topo.neighbors(e))
        add = sorted(want - set(ep.entity_scope))
        if not add:
            add = sorted({n for e in ep.entity_scope for n in topo.neighbors(e)} - set(ep.entity_scope))
        if not add:
            raise PatchError("scope already closed under neighbors")
        return {"add": add}
    if operator == "realign_timestamps":
        return {}
    if operator == "remove_unsupported":
        bad = [h.id for h in trace.hs.hypotheses if not _audit._grounded(ctx, h)]
        if not bad:
            raise PatchError("every hypothesis is grounded")
        return {"remove": bad}
    if operator in ("add_alternatives", "add_cross_layer"):
        anomalous = ctx.anomalous_ep_entities()
        have = {h.candidate_entity for h in trace.hs.hypotheses}
        missing = sorted(anomalous - have)
        if operator == "add_cross_layer":
            kinds = {entity_kind(e) for e in have}
            missing = [e for e in missing if entity_kind(e) not in kinds]
        if not missing:
            raise PatchError("no anomalous entity left to hypothesize")
        return {"entities": missing}
    if operator == "add_counter_hypotheses":
        have = {h.id for h in trace.hs.hypotheses}
        ids = [h.id for h in trace.hs.hypotheses
               if h.fault_class in COUNTER_CLASS and f"h:{h.candidate_entity}:{COUNTER_CLASS[h.fault_class]}" not in have]
        if not ids:
            raise PatchError("no hypothesis has a counter class")
        return {"ids": ids}
    if operator == "rebuild_reachable_chain":
        return {}
    alert = store.alert[0]
    if operator == "prune_hallucinated_edges":
        ids = [p.id for p in trace.as_.paths if not _audit.path_reachable(p, topo) or (p.steps and p.steps[-1] != alert)]
        if not ids:
            raise PatchError("no hallucinated edges")
        return {"path_ids": ids}
    if operator == "restore_temporal_order":
        ids = [p.id for p in trace.as_.paths if not _audit.path_temporal_ok(p, store)]
        if not ids:
            raise PatchError("every path is temporally ordered")
        return {"path_ids": ids}
    if operator == "attach_link_support":
        ids = [p.id for p in trace.as_.paths
               if not all(_audit.link_supported(ctx, p, u, v) for u, v in p.links())]
        if not ids:
            raise PatchError("every link is supported")
        return {"path_ids": ids}
    if operator == "align_ranking_with_analysis":
        return {"k": 3}
    if operator == "replace_verification_tests":
        return {"n": 2}
    if operator in ("recalibrate_confidence", "match_actions_to_mechanism"):
        return {}
    raise PatchError(f"no automatic parameters for {operator}")


# --- critics ------------------------------------------------------------------


def _failing(diag):
    order = {c.check_id: i for i, c in enumerate(diag.checks)}
    bad = [c for c in diag.checks if c.score < 1.0]
    return sorted(bad, key=lambda c: (-SEVERITY_RANK[c.severity], order[c.check_id]))


def propose_candidates(trace, diag, store, topo, K: int = 3, memory_templates=None,
                       allowed=None, critic=None) -> list[StagePatch]:
    """Up to K patches addressing the failing checks of one stage's diagnostics."""
    stage = diag.stage
    failing = _failing(diag)
    if not failing or K <= 0:
        return []
    mapped = []
    for c in failing:
        for op in CHECK_OPERATORS[c.check_id]:
            if op not in (x[0] for x in mapped):
                mapped.append((op, c))
    mapped_ops = {op for op, _ in mapped}
    ordered = []
    for i, tpl in enumerate(memory_templates or ()):
        op = tpl["operator"]
        if Stage.parse(tpl["stage"]) == stage and op in mapped_ops and op not in (o for o, _ in ordered):
            ordered.append((op, f"memory:{tpl.get('id', i)}"))
    if critic is not None:
        for op in critic.suggest(trace, diag, [o for o, _ in mapped]) or ():
            if op in mapped_ops and op not in (o for o, _ in ordered):
                ordered.append((op, f"critic:{critic.critic_id}"))
    for op, c in mapped:
        if op not in (o for o, _ in ordered):
            ordered.append((op, f"rule:{c.check_id}"))
    if allowed is not None:
        ordered = [(o, src) for o, src in ordered if o in allowed]
    ctx = _ctx(trace, store, topo)
    out = []
    for op, src in ordered:
        try:
            params = auto_params(op, trace, store, topo, ctx)
        except PatchError:
            continue
        blamed = ", ".join(c.check_id for c in failing if op in CHECK_OPERATORS[c.check_id])
        out.append(StagePatch(stage, op, params, src, f"addresses {blamed}"))
        if len(out) >= K:
            break
    return out


def all_operator_patches(trace, stage, store, topo, allowed=None) -> list[StagePatch]:
    """Every operator of ``stage`` with automatic parameters (for exhaustive probing)."""
    ctx = _ctx(trace, store, topo)
    out = []
    for op in PATCH_OPERATORS[Stage.parse(stage)]:
        if allowed is not None and op not in allowed:
            continue
        try:
            params = auto_params(op, trace, store, topo, ctx)
        except PatchError:
            continue
        out.append(StagePatch(stage, op, params, "oracle", "exhaustive probe"))
    return out


_FENCE = re.compile(r"```(?:json)?\s*(\[.*?\]|\{.*?\})\s*```", re.S)


class ExternalCritic:
    """Asks the generation service to rank operators for the failing checks.

    Any transport or parse failure yields no suggestion, so the rule
    ordering takes over.
    """

    critic_id = "external"

    def __init__(self, url=None, token=None, model_name="default", transport=None, timeout=60.0):
        import os

        import httpx

        self.url = url or os.environ.get("STAGEFIX_GEN_URL")
        if not self.url:
            raise ValueError("external critic needs STAGEFIX_GEN_URL")
        token = token or os.environ.get("STAGEFIX_GEN_TOKEN")
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.model_name = model_name
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def prompt(self, trace, diag, operators) -> list[dict]:
        failing = [{"check": c.check_id, "severity": c.severity, "blame": list(c.blame), "message": c.message}
                   for c in diag.checks if c.score < 1.0]
        body = {
            "stage": diag.stage.name,
            "failing_checks": failing,
            "allowed_operators": operators,
            "artifact": json.loads(_dumps_stage(trace, diag.stage)),
        }
        return [
            {"role": "system", "content": "You are a stage critic for a root cause analysis trace. Given the "
                                          "failing audit checks of one stage, choose which patch operators to try, "
                                          "best first. Answer with a fenced ```json list of operator names."},
            {"role": "user", "content": json.dumps(body, sort_keys=True)},
        ]

    def suggest(self, trace, diag, operators) -> list[str]:
        import httpx

        body = {"model": self.model_name, "messages": self.prompt(trace, diag, operators), "temperature": 0.0}
        try:
            resp = self._client.post(self.url, json=body)
            resp.raise_for_status()
            text = resp.json()["content"]
            m = _FENCE.search(text)
            got = json.loads(m.group(1)) if m else []
        except (httpx.HTTPError, KeyError, ValueError, AttributeError):
            return []
        if not isinstance(got, list):
            return []
        return [op for op in got if isinstance(op, str) and op in operators]


def _dumps_stage(trace, stage):
    from .model import dumps

    return dumps(trace.artifact(stage))
