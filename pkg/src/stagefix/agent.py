"""The four-stage RCA base agent: rule-based and external backends, plus fault injection."""

from __future__ import annotations

import json
import os
import re
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import model
from .model import (
    AnalysisStructure,
    DecisionReport,
    EvidenceItem,
    EvidencePackage,
    Hypothesis,
    HypothesisSet,
    PropagationPath,
    RankedCandidate,
    RcaTrace,
    SystemTopology,
    VerificationTest,
    edge_id,
    link_key,
    sort_ranking,
    split_edge,
)
from .taxonomy import (
    CHARACTERISTIC_SIGNAL,
    METRICS,
    MODALITIES,
    REASONING_FAULTS,
    SPAN_ERRORS,
    SPAN_LATENCY,
    STAGES,
    Stage,
    classify_signals,
    entity_kind,
)

WINDOW_BEFORE_MS = 10 * 60_000
WINDOW_AFTER_MS = 5 * 60_000
HYPOTHESIS_MIN_SCORE = 0.3
MAX_HYPOTHESES = 16
MAX_PATHS = 16
EARLINESS_WEIGHT = 60.0


class StageError(RuntimeError):
    def __init__(self, stage, message: str, raw: str | None = None):
        self.stage = Stage.parse(stage)
        self.raw = raw
        super().__init__(f"{self.stage.name}: {message}")


# --- shared evidence helpers ---------------------------------------------


def default_window(store) -> tuple[int, int]:
    t = store.alert[1]
    return (t - WINDOW_BEFORE_MS, t + WINDOW_AFTER_MS)


def measure_item(store, modality: str, target: str, signal: str, window):
    """Re-measure one evidence claim against the store: (onset, score) or None."""
    if modality == "metric":
        return store.measure_metric(target, signal, window)
    if modality == "log":
        return store.measure_log(target, signal, window)
    if modality == "trace":
        return store.measure_trace(target, signal, window)
    return None


def _make_item(modality, target, signal, onset, score, window_end) -> EvidenceItem:
    tag = {"metric": "z-peak", "log": "error burst", "trace": "span anomaly"}[modality]
    return EvidenceItem(
        id=f"ev:{modality}:{target}:{signal}",
        modality=modality,
        target=target,
        window=(onset, window_end),
        summary=f"{signal} {tag} on {target}",
        anomaly_score=round(score, 6),
        signal=signal,
    )


def collect_evidence(store, scope, window, modalities=MODALITIES) -> tuple[EvidenceItem, ...]:
    scope = set(scope)
    items = []
    if "metric" in modalities:
        for e in sorted(scope):
            for metric in METRICS:
                got = store.measure_metric(e, metric, window)
                if got:
                    items.append(_make_item("metric", e, metric, got[0], got[1], window[1]))
    if "log" in modalities:
        for e in sorted(scope):
            for template in store.log_templates(e):
                got = store.measure_log(e, template, window)
                if got:
                    items.append(_make_item("log", e, template, got[0], got[1], window[1]))
    if "trace" in modalities:
        for edge in store.edges_with_spans():
            u, v = split_edge(edge)
            if u in scope and v in scope:
                for signal in (SPAN_LATENCY, SPAN_ERRORS):
                    got = store.measure_trace(edge, signal, window)
                    if got:
                        items.append(_make_item("trace", edge, signal, got[0], got[1], window[1]))
    return tuple(sorted(items, key=lambda it: it.id))


def anomaly_closure(store, topo: SystemTopology, seeds, window) -> set[str]:
    """Entities anomalous in ``window`` reachable from ``seeds`` through anomalous neighbors."""
    seen = {s for s in seeds}
    queue = deque(sorted(seeds))
    while queue:
        e = queue.popleft()
        for n in topo.neighbors(e):
            if n not in seen and store.entity_anomalous_in(n, window):
                seen.add(n)
                queue.append(n)
    return seen


def claimed_onsets(ep: EvidencePackage) -> dict[str, int]:
    """Earliest metric-item onset claimed per entity."""
    out: dict[str, int] = {}
    for it in ep.items:
        if it.modality == "metric" and split_edge(it.target) is None:
            t = it.window[0]
            if it.target not in out or t < out[it.target]:
                out[it.target] = t
    return out


def earliest_entity(ep: EvidencePackage) -> str | None:
    onsets = claimed_onsets(ep)
    if not onsets:
        return None
    return min(onsets, key=lambda e: (onsets[e], e))


def entity_items(ep: EvidencePackage, entity: str, min_score: float = 0.0) -> list[EvidenceItem]:
    return [it for it in ep.items if it.target == entity and it.anomaly_score >= min_score]


def inbound_edge_items(ep: EvidencePackage, entity: str) -> list[EvidenceItem]:
    out = []
    for it in ep.items:
        pair = split_edge(it.target)
        if pair and pair[1] == entity:
            out.append(it)
    return out


def hypothesis_for(ep: EvidencePackage, entity: str) -> Hypothesis | None:
    own = entity_items(ep, entity, HYPOTHESIS_MIN_SCORE)
    if not own:
        return None
    fault_class = classify_signals(it.signal for it in own)
    if fault_class is None:
        return None
    support = tuple(sorted({it.id for it in own} | {it.id for it in inbound_edge_items(ep, entity)}))
    return Hypothesis(
        id=f"h:{entity}:{fault_class}",
        candidate_entity=entity,
        fault_class=fault_class,
        support=support,
        rationale=f"{fault_class} signature on {entity}",
    )


def order_hypotheses(hyps, ep: EvidencePackage, topo: SystemTopology, alert: str, cap: int = MAX_HYPOTHESES):
    onsets = claimed_onsets(ep)
    far = 10 ** 18
    ranked = sorted(hyps, key=lambda h: (onsets.get(h.candidate_entity, far), h.id))[:cap]
    dist = topo.relation_distance(alert)
    return tuple(sorted(ranked, key=lambda h: (dist.get(h.candidate_entity, far), h.id)))


def link_support_items(ep: EvidencePackage, u: str, v: str) -> tuple[str, ...]:
    """Evidence ids supporting propagation u -> v on the effect side."""
    ids = {it.id for it in entity_items(ep, v, HYPOTHESIS_MIN_SCORE)}
    for it in ep.items:
        pair = split_edge(it.target)
        if pair and set(pair) == {u, v} and it.anomaly_score >= HYPOTHESIS_MIN_SCORE:
            ids.add(it.id)
    return tuple(sorted(ids))


def build_path(candidate: str, ep: EvidencePackage, topo: SystemTopology, alert: str, greedy: bool = False):
    """Shortest (or greedy) effect-following walk candidate -> alert over evidenced entities.

    Returns (steps, onsets, support) or None when no walk satisfies the
    nondecreasing-onset and per-link support constraints.
    """
    onsets = claimed_onsets(ep)
    if candidate not in onsets or alert not in onsets:
        return None
    if candidate == alert:
        return (candidate,), (onsets[candidate],), {}

    def ok(u, v):
        return v in onsets and onsets[v] >= onsets[u] and link_support_items(ep, u, v)

    if greedy:
        dist = topo.relation_distance(alert)
        far = 10 ** 9
        steps = [candidate]
        while steps[-1] != alert:
            nxt = [v for v in topo.effects(steps[-1]) if v not in steps and ok(steps[-1], v)]
            if not nxt:
                return None
            steps.append(min(nxt, key=lambda v: (dist.get(v, far), v)))
    else:
        prev = {candidate: None}
        queue = deque([candidate])
        while queue and alert not in prev:
            u = queue.popleft()
            for v in sorted(topo.effects(u)):
                if v not in prev and ok(u, v):
                    prev[v] = u
                    queue.append(v)
        if alert not in prev:
            return None
        steps = [alert]
        while prev[steps[-1]] is not None:
            steps.append(prev[steps[-1]])
        steps.reverse()
    support = {link_key(u, v): link_support_items(ep, u, v) for u, v in zip(steps, steps[1:])}
    return tuple(steps), tuple(onsets[s] for s in steps), support


def path_score(path: PropagationPath, ep: EvidencePackage) -> float:
    """Support count plus onset earliness of the path root within the EP window."""
    a, b = ep.incident_window
    span = max(1, b - a)
    onset0 = path.onsets[0] if path.onsets else b
    earliness = min(1.0, max(0.0, (b - onset0) / span))
    return len(path.support_ids()) + EARLINESS_WEIGHT * earliness


def best_path(as_: AnalysisStructure, ep: EvidencePackage) -> PropagationPath | None:
    if not as_.paths:
        return None
    return max(as_.paths, key=lambda p: (path_score(p, ep), [-ord(c) for c in p.id]))


def tests_for(ranking, n: int, alert: str | None = None) -> tuple[VerificationTest, ...]:
    tests = []
    for cand in ranking[:n]:
        signal = CHARACTERISTIC_SIGNAL.get(cand.fault_class, "latency_ms")
        tests.append(VerificationTest(
            target=cand.entity,
            description=f"confirm sustained {signal} deviation on {cand.entity}",
            signal=signal,
        ))
    return tuple(tests)


def rank_from_analysis(as_: AnalysisStructure, hs: HypothesisSet, ep: EvidencePackage):
    classes = {}
    for h in hs.hypotheses:
        classes.setdefault(h.candidate_entity, h.fault_class)
    scores: dict[str, float] = {}
    derived: dict[str, list[str]] = {}
    for p in as_.paths:
        root = p.steps[0]
        s = path_score(p, ep)
        scores[root] = max(scores.get(root, 0.0), s)
        derived.setdefault(root, []).append(p.id)
    total = sum(scores.values())
    ranking = []
    for entity, s in scores.items():
        fault_class = classes.get(entity) or classify_signals(it.signal for it in entity_items(ep, entity)) or "network_delay"
        conf = s / total if total > 0 else 1.0 / len(scores)
        ranking.append(RankedCandidate(entity, fault_class, conf, tuple(sorted(derived[entity]))))
    return sort_ranking(ranking)


def verification_first_report(hs: HypothesisSet, ep: EvidencePackage, k: int, base_conf: float = 0.3):
    seen, cands = set(), []
    onsets = claimed_onsets(ep)
    far = 10 ** 18
    for h in sorted(hs.hypotheses, key=lambda h: (onsets.get(h.candidate_entity, far), h.id)):
        if h.candidate_entity in seen:
            continue
        seen.add(h.candidate_entity)
        cands.append(h)
    cands = cands[:k] if k else cands
    n = max(1, len(cands))
    ranking = tuple(
        RankedCandidate(h.candidate_entity, h.fault_class, round(base_conf / n, 12), ()) for h in cands
    )
    return DecisionReport(ranking=ranking, verification_tests=tests_for(ranking, len(ranking)),
                          verification_first=True)


# --- executors -------------------------------------------------------------


class RuleExecutor:
    """Deterministic template-driven stage executor."""

    PRESETS = ("strong", "weak")

    def __init__(self, preset: str = "strong"):
        if preset not in self.PRESETS:
            raise ValueError(f"unknown rule preset {preset!r}")
        self.preset = preset
        self.executor_id = f"rule-{preset}"

    def run(self, stage, upstream, store, topo, seed: int = 0):
        stage = Stage.parse(stage)
        missing = [s for s in STAGES if s < stage and upstream.get(s) is None]
        if missing:
            raise StageError(stage, f"missing upstream artifacts {[s.name for s in missing]}")
        alert = store.alert[0]
        if stage is Stage.S1:
            return self._s1(store, topo, alert)
        if stage is Stage.S2:
            return self._s2(upstream[Stage.S1], topo, alert)
        if stage is Stage.S3:
            return self._s3(upstream[Stage.S1], upstream[Stage.S2], topo, alert)
        return self._s4(upstream[Stage.S1], upstream[Stage.S2], upstream[Stage.S3], alert)

    def _s1(self, store, topo, alert):
        window = default_window(store)
        if self.preset == "strong":
            core = anomaly_closure(store, topo, [alert], window)
        else:
            core = {alert}
        scope = set(core)
        for e in core:
            scope.update(topo.neighbors(e))
        return EvidencePackage(window, tuple(sorted(scope)), collect_evidence(store, scope, window))

    def _s2(self, ep, topo, alert):
        hyps = []
        for e in sorted({it.target for it in ep.items if split_edge(it.target) is None}):
            h = hypothesis_for(ep, e)
            if h is not None:
                hyps.append(h)
        return HypothesisSet(order_hypotheses(hyps, ep, topo, alert))

    def _s3(self, ep, hs, topo, alert):
        if not hs.hypotheses:
            return AnalysisStructure((), True)
        onsets = claimed_onsets(ep)
        far = 10 ** 18
        cands = []
        for h in hs.hypotheses:
            if h.candidate_entity not in cands:
                cands.append(h.candidate_entity)
        paths = []
        if self.preset == "weak":
            cands.sort(key=lambda e: (onsets.get(e, far), e))
        for entity in cands:
            got = build_path(entity, ep, topo, alert, greedy=self.preset == "weak")
            if got is None:
                continue
            steps, ons, support = got
            paths.append(PropagationPath(f"p:{entity}", steps, ons, support,
                                         rationale=f"{entity} reaches {alert}"))
            if self.preset == "weak" or len(paths) >= MAX_PATHS:
                break
        if not paths:
            return AnalysisStructure((), True)
        return AnalysisStructure(tuple(paths), False)

    def _s4(self, ep, hs, as_, alert):
        if as_.insufficient_evidence or not as_.paths:
            return verification_first_report(hs, ep, 0)
        ranking = rank_from_analysis(as_, hs, ep)
        n_tests = 2 if self.preset == "strong" else 1
        return DecisionReport(ranking, tests_for(ranking, n_tests), False)


# --- external generation backend -------------------------------------------

_FENCE = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.S)

STAGE_PROMPTS = {
    Stage.S1: "Collect an evidence package for the incident. Return JSON with keys "
              "incident_window [start_ms, end_ms], entity_scope [ids], items [{id, modality, target, "
              "window, summary, anomaly_score, signal}].",
    Stage.S2: "Propose root-cause hypotheses grounded in the evidence ids. Return JSON with key "
              "hypotheses [{id, candidate_entity, fault_class, support, rationale}].",
    Stage.S3: "Build fault propagation paths from candidate roots to the alerted entity along the "
              "topology. Return JSON with keys paths [{id, steps, onsets, support, rationale, direction}] "
              "and insufficient_evidence.",
    Stage.S4: "Rank root-cause candidates and propose verification tests. Return JSON with keys "
              "ranking [{entity, fault_class, confidence, derived_from}], verification_tests "
              "[{target, description, signal}], verification_first.",
}


class ExternalExecutor:
    """Stage executor backed by a text-generation HTTP service."""

    def __init__(self, url: str | None = None, token: str | None = None, model_name: str = "default",
                 temperature: float = 0.0, max_in_flight: int = 4, timeout: float = 60.0, transport=None):
        import httpx

        self.url = url or os.environ.get("STAGEFIX_GEN_URL")
        self.token = token or os.environ.get("STAGEFIX_GEN_TOKEN")
        if not self.url:
            raise ValueError("external executor needs STAGEFIX_GEN_URL")
        self.model_name = model_name
        self.temperature = temperature
        self.executor_id = f"external-{model_name}"
        self._gate = threading.BoundedSemaphore(max_in_flight)
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def _messages(self, stage, upstream, store, topo):
        context = {
            "alert": list(store.alert),
            "default_window": list(default_window(store)),
            "services": list(topo.services),
            "call_edges": [edge_id(u, v) for u, v in topo.call_edges],
            "upstream": {s.name: model.encode(a) for s, a in sorted(upstream.items()) if s < stage},
        }
        if stage is Stage.S1:
            window = default_window(store)
            context["anomalous_entities"] = sorted(store.anomalous_entities(window))
        return [
            {"role": "system", "content": "You are a root cause analysis agent. Answer with one fenced "
                                          "```json block containing only the requested artifact."},
            {"role": "user", "content": STAGE_PROMPTS[stage] + "\n\n" + json.dumps(context, sort_keys=True)},
        ]

    def _ask(self, messages) -> str:
        import httpx

        body = {"model": self.model_name, "messages": messages, "temperature": self.temperature}
        with self._gate:
            try:
                resp = self._client.post(self.url, json=body)
                resp.raise_for_status()
                return resp.json()["content"]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                raise _Transport(str(exc)) from exc

    def run(self, stage, upstream, store, topo, seed: int = 0):
        stage = Stage.parse(stage)
        messages = self._messages(stage, upstream, store, topo)
        raw = ""
        for _ in range(2):
            try:
                raw = self._ask(messages)
            except _Transport as exc:
                raise StageError(stage, f"transport error: {exc}", raw=None) from exc
            artifact = self._parse(stage, raw, upstream, topo)
            if artifact is not None:
                return artifact
        raise StageError(stage, "unparseable or schema-invalid artifact", raw=raw)

    def _parse(self, stage, raw, upstream, topo):
        m = _FENCE.search(raw or "")
        if not m:
            return None
        try:
            artifact = model.decode(model.STAGE_TYPES[stage], json.loads(m.group(1)))
        except (ValueError, TypeError, KeyError):
            return None
        return artifact if not stage_violations(stage, artifact, upstream, topo) else None


class _Transport(Exception):
    pass


def stage_violations(stage, artifact, upstream, topo):
    """Schema violations of one stage artifact given its upstream."""
    placeholder = {
        Stage.S1: EvidencePackage((0, 0), (), ()),
        Stage.S2: HypothesisSet(()),
        Stage.S3: AnalysisStructure((), True),
        Stage.S4: DecisionReport(),
    }
    arts = {s: upstream.get(s, placeholder[s]) for s in STAGES}
    arts[stage] = artifact
    trace = RcaTrace(arts[Stage.S1], arts[Stage.S2], arts[Stage.S3], arts[Stage.S4], "", "", 0)
    return [v for v in model.validate_trace(trace, topo) if v.stage == stage.name]


def make_executor(name: str, **kwargs):
    if name in RuleExecutor.PRESETS:
        return RuleExecutor(name)
    if name == "external":
        return ExternalExecutor(**kwargs)
    raise ValueError(f"unknown executor {name!r}")


# --- pipeline ---------------------------------------------------------------


def run_stage(executor, stage, partial, store, topo, seed: int = 0):
    stage = Stage.parse(stage)
    try:
        return executor.run(stage, dict(partial), store, topo, seed)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, f"executor failure: {exc}") from exc


def run_pipeline(executor, bundle, seed: int = 0) -> RcaTrace:
    from .sim import IncidentBundle

    if not isinstance(bundle, IncidentBundle):
        try:
            bundle = IncidentBundle.load(bundle)
        except (FileNotFoundError, ValueError) as exc:
            raise StageError(Stage.S1, f"cannot load incident bundle: {exc}") from exc
    arts = {}
    for stage in STAGES:
        arts[stage] = run_stage(executor, stage, arts, bundle.store, bundle.topology, seed)
    return RcaTrace(arts[Stage.S1], arts[Stage.S2], arts[Stage.S3], arts[Stage.S4],
                    incident_id=bundle.incident_id, executor_id=executor.executor_id, seed=seed)


# --- reasoning-fault injection --------------------------------------------


@dataclass(frozen=True)
class ReasoningFaultSpec:
    fault_type: str
    target_stage: Stage
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fault_type not in REASONING_FAULTS:
            raise ValueError(f"unknown reasoning fault {self.fault_type!r}")
        stage = Stage.parse(self.target_stage)
        object.__setattr__(self, "target_stage", stage)
        if REASONING_FAULTS[self.fault_type] != stage:
            raise ValueError(
                f"{self.fault_type} belongs to {REASONING_FAULTS[self.fault_type].name}, not {stage.name}"
            )

    @classmethod
    def of(cls, fault_type: str, **params) -> "ReasoningFaultSpec":
        if fault_type not in REASONING_FAULTS:
            raise ValueError(f"unknown reasoning fault {fault_type!r}")
        return cls(fault_type, REASONING_FAULTS[fault_type], params)


class FaultNotApplicable(ValueError):
    pass


class FaultyExecutor:
    """Wraps an executor and corrupts one stage's output every time that stage runs.

    Keeping the corruption active through replays models a persistent
    reasoning defect: only a patch at (or before) the faulty stage that
    routes around it can remove its effect.
    """

    def __init__(self, base, spec: ReasoningFaultSpec):
        self.base = base
        self.spec = spec
        self.executor_id = base.executor_id

    def run(self, stage, upstream, store, topo, seed: int = 0):
        out = self.base.run(stage, upstream, store, topo, seed)
        if Stage.parse(stage) == self.spec.target_stage:
            out = corrupt(self.spec, out, upstream, store, topo, self.base)
        return out


def inject_reasoning_fault(executor, bundle, spec: ReasoningFaultSpec, seed: int = 0):
    """Run the pipeline with ``spec`` active; returns (tagged trace, faulty executor)."""
    faulty = FaultyExecutor(executor, spec)
    trace = run_pipeline(faulty, bundle, seed)
    meta = dict(trace.meta)
    meta.update({"injected_fault": spec.fault_type, "target_stage": spec.target_stage.name})
    return replace(trace, meta=meta), faulty


def _root_of(ep: EvidencePackage) -> str:
    r = earliest_entity(ep)
    if r is None:
        raise FaultNotApplicable("evidence package has no metric evidence to corrupt")
    return r


def corrupt(spec: ReasoningFaultSpec, out, upstream, store, topo: SystemTopology, base=None):
    ft = spec.fault_type
    ep = out if spec.target_stage is Stage.S1 else upstream[Stage.S1]
    r = _root_of(ep)
    alert = store.alert[0]

    if ft == "fabricated_evidence":
        pool = [e for e in sorted(set(topo.causes(r)) | set(topo.neighbors(r))) if store.onset(e) is None]
        pool = pool or [e for e in sorted(topo.entities) if store.onset(e) is None and e != r]
        if not pool:
            raise FaultNotApplicable("no quiet entity to fabricate evidence on")
        fake = pool[0]
        onset = claimed_onsets(ep)[r] - 60_000
        item = EvidenceItem(f"ev:metric:{fake}:cpu", "metric", fake, (onset, ep.incident_window[1]),
                            f"cpu z-peak on {fake}", 0.9, "cpu")
        items = tuple(sorted(ep.items + (item,), key=lambda it: it.id))
        scope = tuple(sorted(set(ep.entity_scope) | {fake}))
        return EvidencePackage(ep.incident_window, scope, items)

    if ft == "evidence_misreading":
        items = tuple(
            replace(it, anomaly_score=0.05, summary=f"{it.signal} within baseline on {it.target}")
            if it.target == r else it
            for it in ep.items
        )
        return replace(ep, items=items)

    if ft == "source_confusion":
        effects = sorted(topo.effects(r))
        if not effects:
            raise FaultNotApplicable(f"{r} has no effect-side neighbor")
        g = effects[0]
        moved = {}
        for it in ep.items:
            if it.target == r:
                it = replace(it, id=f"ev:{it.modality}:{g}:{it.signal}", target=g,
                             summary=it.summary.replace(r, g))
            if it.id not in moved or it.target == g and moved[it.id].target != g:
                moved.setdefault(it.id, it)
        scope = tuple(sorted(set(ep.entity_scope) | {g}))
        return EvidencePackage(ep.incident_window, scope, tuple(sorted(moved.values(), key=lambda it: it.id)))

    if ft == "biased_evidence_selection":
        true_onset = store.onset(r)
        if true_onset is None:
            raise FaultNotApplicable(f"{r} has no detectable onset")
        shift = spec.params.get("shift_ms", 45_000)
        window = (true_onset + shift, ep.incident_window[1])
        return EvidencePackage(window, ep.entity_scope, collect_evidence(store, ep.entity_scope, window))

    if ft == "premature_anchoring":
        if len(out.hypotheses) < 2:
            raise FaultNotApplicable("hypothesis set already has a single hypothesis")
        return HypothesisSet(out.hypotheses[:1])

    if ft == "over_specific_hypothesis":
        return _over_specific(out, ep, r, topo)

    if ft == "missing_hypotheses":
        kept = tuple(h for h in out.hypotheses if h.candidate_entity != r)
        if len(kept) == len(out.hypotheses):
            raise FaultNotApplicable(f"{r} was not hypothesized")
        return HypothesisSet(kept)

    if ft in ("temporal_causal_mismatch", "unsupported_causal_leap", "insufficient_verification",
              "belief_update_failure"):
        return _corrupt_analysis(ft, out, ep, r, topo, alert)

    if ft == "unstable_conclusion":
        if len(out.ranking) < 2:
            raise FaultNotApplicable("ranking has fewer than two candidates")
        a, b = out.ranking[0], out.ranking[1]
        swapped = (
            replace(a, entity=b.entity, fault_class=b.fault_class, derived_from=b.derived_from),
            replace(b, entity=a.entity, fault_class=a.fault_class, derived_from=a.derived_from),
        ) + out.ranking[2:]
        return replace(out, ranking=swapped)

    if ft == "non_convergent_reporting":
        if not out.ranking:
            raise FaultNotApplicable("empty ranking")
        n = len(out.ranking)
        flat = tuple(replace(c, confidence=1.0 / n) for c in sorted(out.ranking, key=lambda c: c.entity))
        generic = VerificationTest(alert, "check the service again", "none")
        return DecisionReport(flat, (generic, generic), False)

    raise FaultNotApplicable(ft)


def _over_specific(hs: HypothesisSet, ep, r, topo):
    idx = next((i for i, h in enumerate(hs.hypotheses) if h.candidate_entity == r), None)
    if idx is None:
        raise FaultNotApplicable(f"{r} was not hypothesized")
    h = hs.hypotheses[idx]
    kind = entity_kind(r)
    fault_class = h.fault_class
    if kind == "svc" and topo.pods_of(r):
        entity = topo.pods_of(r)[0]
    elif kind == "node" and topo.pods_on(r):
        entity = topo.pods_on(r)[0]
    else:
        entity = r
        fault_class = "disk_exhaustion" if h.fault_class != "disk_exhaustion" else "cpu_hog"
    items = {it.id: it for it in ep.items}
    strongest = max((items[i] for i in h.support if i in items), key=lambda it: (it.anomaly_score, it.id))
    narrowed = Hypothesis(f"h:{entity}:{fault_class}", entity, fault_class, (strongest.id,),
                          rationale=f"{fault_class} localized to {entity}")
    hyps = list(hs.hypotheses)
    hyps[idx] = narrowed
    seen, out = set(), []
    for x in hyps:
        if x.id not in seen:
            seen.add(x.id)
            out.append(x)
    return HypothesisSet(tuple(out))


def _corrupt_analysis(ft, as_: AnalysisStructure, ep, r, topo, alert):
    if as_.insufficient_evidence or not as_.paths:
        raise FaultNotApplicable("analysis structure has no paths")
    best = best_path(as_, ep)
    paths = list(as_.paths)
    i = paths.index(best)

    if ft == "temporal_causal_mismatch":
        if len(best.steps) < 2:
            raise FaultNotApplicable("best path has a single step")
        steps = tuple(reversed(best.steps))
        support = {link_key(u, v): best.link_support(v, u) for u, v in zip(steps, steps[1:])}
        paths[i] = replace(best, steps=steps, support=support, direction="call")
        return replace(as_, paths=tuple(paths))

    if ft == "unsupported_causal_leap":
        if len(best.steps) >= 3:
            steps = (best.steps[0], best.steps[-1])
            merged = tuple(sorted(best.support_ids()))
            paths[i] = replace(best, steps=steps, onsets=(best.onsets[0], best.onsets[-1]),
                               support={link_key(*steps): merged})
        elif len(best.steps) == 2:
            u, v = best.steps
            near = set(topo.neighbors(u)) | set(topo.neighbors(v)) | {u, v}
            pool = [s for s in topo.services if s not in near]
            if not pool:
                raise FaultNotApplicable("no non-adjacent service to hallucinate")
            x = pool[0]
            ids = best.link_support(u, v)
            paths[i] = replace(best, steps=(u, x, v), onsets=(best.onsets[0], best.onsets[0], best.onsets[1]),
                               support={link_key(u, x): ids, link_key(x, v): ids})
        else:
            raise FaultNotApplicable("best path has a single step")
        return replace(as_, paths=tuple(paths))

    if ft == "insufficient_verification":
        targets = [j for j, p in enumerate(paths) if p.steps[0] == r] or [i]
        for j in targets:
            p = paths[j]
            paths[j] = replace(p, support={k: () for k in p.support})
        if all(len(paths[j].steps) < 2 for j in targets):
            raise FaultNotApplicable("no links to strip")
        return replace(as_, paths=tuple(paths))

    if ft == "belief_update_failure":
        rest = [p for p in paths if p.steps[0] != r]
        if not rest or len(rest) == len(paths):
            raise FaultNotApplicable("no competing path to anchor on")
        runner = best_path(AnalysisStructure(tuple(rest)), ep)
        r_onset = claimed_onsets(ep)[r]
        new_onsets = (min(r_onset, runner.onsets[0]),) + tuple(runner.onsets[1:])
        rest[rest.index(runner)] = replace(runner, onsets=new_onsets)
        return replace(as_, paths=tuple(rest))

    raise FaultNotApplicable(ft)


