"""Stage artifacts, the composite RCA trace, the system topology and their codecs.

All artifacts are frozen dataclasses holding tuples and plain dicts, so a
trace can be shared read-only between worker threads.  ``dumps`` is the
canonical, byte-stable encoding; ``loads`` inverts it.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

from .taxonomy import MODALITIES, Stage, entity_kind


def edge_id(caller: str, callee: str) -> str:
    return f"{caller}->{callee}"


def split_edge(target: str) -> tuple[str, str] | None:
    if "->" not in target:
        return None
    caller, callee = target.split("->", 1)
    return caller, callee


def link_key(u: str, v: str) -> str:
    return f"{u}|{v}"


def split_link(key: str) -> tuple[str, str]:
    u, v = key.split("|", 1)
    return u, v


@dataclass(frozen=True)
class SystemTopology:
    services: tuple[str, ...]
    pods: tuple[str, ...]
    nodes: tuple[str, ...]
    call_edges: tuple[tuple[str, str], ...]
    placement: dict[str, str]
    ownership: dict[str, str]

    @property
    def entry(self) -> str:
        callees = {b for _, b in self.call_edges}
        roots = [s for s in self.services if s not in callees]
        return roots[0] if roots else self.services[0]

    @cached_property
    def entities(self) -> frozenset[str]:
        return frozenset(self.services) | frozenset(self.pods) | frozenset(self.nodes)

    @cached_property
    def _edge_set(self) -> frozenset[tuple[str, str]]:
        return frozenset(self.call_edges)

    @cached_property
    def _callers(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {s: [] for s in self.services}
        for a, b in self.call_edges:
            out[b].append(a)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def _callees(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {s: [] for s in self.services}
        for a, b in self.call_edges:
            out[a].append(b)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def _pods_of(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {s: [] for s in self.services}
        for pod, svc in self.ownership.items():
            out[svc].append(pod)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def _pods_on(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for pod, node in self.placement.items():
            out[node].append(pod)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    def has_edge(self, caller: str, callee: str) -> bool:
        return (caller, callee) in self._edge_set

    def callers(self, svc: str) -> tuple[str, ...]:
        return self._callers.get(svc, ())

    def callees(self, svc: str) -> tuple[str, ...]:
        return self._callees.get(svc, ())

    def pods_of(self, svc: str) -> tuple[str, ...]:
        return self._pods_of.get(svc, ())

    def pods_on(self, node: str) -> tuple[str, ...]:
        return self._pods_on.get(node, ())

    def effects(self, entity: str) -> tuple[str, ...]:
        """Entities a fault at ``entity`` propagates to (cause -> effect)."""
        kind = entity_kind(entity)
        if kind == "svc":
            return self.callers(entity)
        if kind == "pod":
            svc = self.ownership.get(entity)
            return (svc,) if svc else ()
        if kind == "node":
            return self.pods_on(entity)
        return ()

    def causes(self, entity: str) -> tuple[str, ...]:
        kind = entity_kind(entity)
        if kind == "svc":
            return tuple(sorted(self.callees(entity) + self.pods_of(entity)))
        if kind == "pod":
            node = self.placement.get(entity)
            return (node,) if node else ()
        return ()

    @cached_property
    def _neighbors(self) -> dict[str, tuple[str, ...]]:
        out = {}
        for e in self.entities:
            out[e] = tuple(sorted(set(self.effects(e)) | set(self.causes(e))))
        return out

    def neighbors(self, entity: str) -> tuple[str, ...]:
        return self._neighbors.get(entity, ())

    def is_link(self, u: str, v: str, direction: str = "reverse") -> bool:
        """True when ``u -> v`` is a topology relation in the given path direction.

        ``reverse`` follows fault propagation (callee to caller, node to pod,
        pod to service); ``call`` follows request direction.
        """
        if direction == "reverse":
            return v in self.effects(u)
        if direction == "call":
            return u in self.effects(v)
        raise ValueError(f"unknown path direction {direction!r}")

    def ancestors_of_effects(self, entity: str) -> dict[str, int]:
        """Hop distance from ``entity`` to every entity its fault reaches."""
        dist = {entity: 0}
        frontier = [entity]
        while frontier:
            nxt = []
            for e in frontier:
                for f in self.effects(e):
                    if f not in dist:
                        dist[f] = dist[e] + 1
                        nxt.append(f)
            frontier = sorted(nxt)
        return dist

    def relation_distance(self, source: str) -> dict[str, int]:
        dist = {source: 0}
        frontier = [source]
        while frontier:
            nxt = []
            for e in frontier:
                for f in self.neighbors(e):
                    if f not in dist:
                        dist[f] = dist[e] + 1
                        nxt.append(f)
            frontier = sorted(nxt)
        return dist


@dataclass(frozen=True)
class EvidenceItem:
    id: str
    modality: str
    target: str
    window: tuple[int, int]
    summary: str
    anomaly_score: float
    signal: str = ""


@dataclass(frozen=True)
class EvidencePackage:
    incident_window: tuple[int, int]
    entity_scope: tuple[str, ...]
    items: tuple[EvidenceItem, ...]

    @cached_property
    def by_id(self) -> dict[str, EvidenceItem]:
        return {it.id: it for it in self.items}


@dataclass(frozen=True)
class Hypothesis:
    id: str
    candidate_entity: str
    fault_class: str
    support: tuple[str, ...]
    rationale: str = ""


@dataclass(frozen=True)
class HypothesisSet:
    hypotheses: tuple[Hypothesis, ...] = ()


@dataclass(frozen=True)
class PropagationPath:
    id: str
    steps: tuple[str, ...]
    onsets: tuple[int | None, ...]
    support: dict[str, tuple[str, ...]]
    rationale: str = ""
    direction: str = "reverse"

    def links(self) -> list[tuple[str, str]]:
        return list(zip(self.steps, self.steps[1:]))

    def link_support(self, u: str, v: str) -> tuple[str, ...]:
        return self.support.get(link_key(u, v), ())

    def support_ids(self) -> set[str]:
        out: set[str] = set()
        for ids in self.support.values():
            out.update(ids)
        return out


@dataclass(frozen=True)
class AnalysisStructure:
    paths: tuple[PropagationPath, ...] = ()
    insufficient_evidence: bool = False


@dataclass(frozen=True)
class RankedCandidate:
    entity: str
    fault_class: str
    confidence: float
    derived_from: tuple[str, ...] = ()


@dataclass(frozen=True)
class VerificationTest:
    target: str
    description: str
    signal: str


@dataclass(frozen=True)
class DecisionReport:
    ranking: tuple[RankedCandidate, ...] = ()
    verification_tests: tuple[VerificationTest, ...] = ()
    verification_first: bool = False

    @property
    def top(self) -> RankedCandidate | None:
        return self.ranking[0] if self.ranking else None


STAGE_TYPES = {
    Stage.S1: EvidencePackage,
    Stage.S2: HypothesisSet,
    Stage.S3: AnalysisStructure,
    Stage.S4: DecisionReport,
}
STAGE_FIELDS = {Stage.S1: "ep", Stage.S2: "hs", Stage.S3: "as_", Stage.S4: "dr"}


@dataclass(frozen=True)
class RcaTrace:
    ep: EvidencePackage
    hs: HypothesisSet
    as_: AnalysisStructure
    dr: DecisionReport
    incident_id: str
    executor_id: str
    seed: int
    lineage: tuple[dict[str, Any], ...] = ()
    meta: dict[str, str] = field(default_factory=dict)

    def artifact(self, stage: Stage):
        return getattr(self, STAGE_FIELDS[Stage.parse(stage)])

    def upstream(self, stage: Stage) -> dict[Stage, Any]:
        """Artifacts strictly before ``stage``."""
        return {s: self.artifact(s) for s in Stage if s < stage}

    def with_artifact(self, stage: Stage, artifact) -> "RcaTrace":
        return dataclasses.replace(self, **{STAGE_FIELDS[Stage.parse(stage)]: artifact})


def sort_ranking(ranking) -> tuple[RankedCandidate, ...]:
    return tuple(sorted(ranking, key=lambda c: (-c.confidence, c.entity)))


# --- codec -----------------------------------------------------------------


def encode(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: encode(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Stage):
        return obj.name
    if isinstance(obj, (tuple, list)):
        return [encode(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): encode(v) for k, v in obj.items()}
    return obj


def dumps(obj, indent: int | None = None) -> str:
    if indent is None:
        return json.dumps(encode(obj), sort_keys=True, separators=(",", ":"))
    return json.dumps(encode(obj), sort_keys=True, indent=indent)


_HINTS: dict[type, dict[str, Any]] = {}


def _hints(cls) -> dict[str, Any]:
    if cls not in _HINTS:
        _HINTS[cls] = typing.get_type_hints(cls)
    return _HINTS[cls]


def _decode(tp, value):
    if tp is Any:
        return value
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _decode(inner[0], value)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_decode(args[0], v) for v in value)
        return tuple(_decode(a, v) for a, v in zip(args, value))
    if origin is dict:
        return {k: _decode(args[1], v) for k, v in value.items()}
    if origin is frozenset:
        return frozenset(_decode(args[0], v) for v in value)
    if isinstance(tp, type) and issubclass(tp, Stage):
        return Stage.parse(value)
    if dataclasses.is_dataclass(tp):
        return decode(tp, value)
    if tp is float:
        return float(value)
    if tp is int:
        return int(value)
    return value


def decode(cls, data: dict):
    if not isinstance(data, dict):
        raise TypeError(f"{cls.__name__}: expected object, got {type(data).__name__}")
    hints = _hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _decode(hints[f.name], data[f.name])
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise TypeError(f"{cls.__name__}: missing field {f.name!r}")
    return cls(**kwargs)


def loads(cls, text: str):
    return decode(cls, json.loads(text))


# --- validation --------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Violation:
    stage: str
    path: str
    rule: str
    detail: str = ""


def _target_exists(target: str, topo: SystemTopology) -> bool:
    edge = split_edge(target)
    if edge is None:
        return target in topo.entities
    return topo.has_edge(*edge)


def validate_topology(topo: SystemTopology) -> list[Violation]:
    out = []
    services = set(topo.services)
    for pod in topo.pods:
        if topo.ownership.get(pod) not in services:
            out.append(Violation("topology", f"ownership.{pod}", "pod_owner"))
        if topo.placement.get(pod) not in set(topo.nodes):
            out.append(Violation("topology", f"placement.{pod}", "pod_node"))
    for a, b in topo.call_edges:
        if a not in services or b not in services:
            out.append(Violation("topology", f"call_edges.{a}->{b}", "edge_endpoints"))
        if a == b:
            out.append(Violation("topology", f"call_edges.{a}->{b}", "self_loop"))
    universe = list(topo.services) + list(topo.pods) + list(topo.nodes)
    if len(universe) != len(set(universe)):
        out.append(Violation("topology", "entities", "unique_ids"))
    return sorted(out)


def validate_trace(trace: RcaTrace, topo: SystemTopology) -> list[Violation]:
    """Every broken artifact invariant as ``(stage, field path, rule id)``, canonically sorted."""
    out: list[Violation] = []
    ep, hs, as_, dr = trace.ep, trace.hs, trace.as_, trace.dr

    ids = [it.id for it in ep.items]
    scope = set(ep.entity_scope)
    if ep.incident_window[0] >= ep.incident_window[1]:
        out.append(Violation("S1", "incident_window", "window_order"))
    if len(ids) != len(set(ids)):
        out.append(Violation("S1", "items", "unique_ids"))
    for i, it in enumerate(ep.items):
        p = f"items[{i}]"
        if it.modality not in MODALITIES:
            out.append(Violation("S1", f"{p}.modality", "modality"))
        if it.window[0] >= it.window[1]:
            out.append(Violation("S1", f"{p}.window", "window_order"))
        if not 0.0 <= it.anomaly_score <= 1.0:
            out.append(Violation("S1", f"{p}.anomaly_score", "unit_interval"))
        if not _target_exists(it.target, topo):
            out.append(Violation("S1", f"{p}.target", "target_exists"))
            continue
        edge = split_edge(it.target)
        if edge is None:
            in_scope = it.target in scope
        else:
            in_scope = edge[0] in scope and edge[1] in scope
        if not in_scope:
            out.append(Violation("S1", f"{p}.target", "item_in_scope"))
    ep_ids = set(ids)

    hids = [h.id for h in hs.hypotheses]
    if len(hids) != len(set(hids)):
        out.append(Violation("S2", "hypotheses", "unique_ids"))
    if not hs.hypotheses and not as_.insufficient_evidence:
        out.append(Violation("S2", "hypotheses", "nonempty"))
    for i, h in enumerate(hs.hypotheses):
        p = f"hypotheses[{i}]"
        if not h.support:
            out.append(Violation("S2", f"{p}.support", "support_nonempty"))
        if not set(h.support) <= ep_ids:
            out.append(Violation("S2", f"{p}.support", "evidence_binding"))
        if h.candidate_entity not in topo.entities:
            out.append(Violation("S2", f"{p}.candidate_entity", "entity_exists"))

    pids = [p.id for p in as_.paths]
    if len(pids) != len(set(pids)):
        out.append(Violation("S3", "paths", "unique_ids"))
    if as_.insufficient_evidence and as_.paths:
        out.append(Violation("S3", "paths", "insufficient_implies_empty"))
    for i, path in enumerate(as_.paths):
        p = f"paths[{i}]"
        if len(path.onsets) != len(path.steps):
            out.append(Violation("S3", f"{p}.onsets", "onsets_length"))
        if len(set(path.steps)) != len(path.steps):
            out.append(Violation("S3", f"{p}.steps", "simple_path"))
        for u, v in path.links():
            if not topo.is_link(u, v, path.direction):
                out.append(Violation("S3", f"{p}.steps.{u}->{v}", "reachability"))
        for key, sup in sorted(path.support.items()):
            if not set(sup) <= ep_ids:
                out.append(Violation("S3", f"{p}.support.{key}", "evidence_binding"))
        for e in path.steps:
            if e not in topo.entities:
                out.append(Violation("S3", f"{p}.steps", "entity_exists"))

    confs = [c.confidence for c in dr.ranking]
    if tuple(dr.ranking) != sort_ranking(dr.ranking):
        out.append(Violation("S4", "ranking", "sorted"))
    path_ids = set(pids)
    for i, c in enumerate(dr.ranking):
        p = f"ranking[{i}]"
        if not 0.0 <= confs[i] <= 1.0:
            out.append(Violation("S4", f"{p}.confidence", "unit_interval"))
        if not set(c.derived_from) <= path_ids:
            out.append(Violation("S4", f"{p}.derived_from", "derived_from"))
    if dr.verification_first and not dr.verification_tests:
        out.append(Violation("S4", "verification_tests", "verification_first_tests"))
    return sorted(out)


def replace_stage(trace: RcaTrace, stage, artifact, ref: dict | None = None) -> RcaTrace:
    """Swap one stage artifact; downstream artifacts are carried over untouched."""
    stage = Stage.parse(stage)
    expected = STAGE_TYPES[stage]
    if not isinstance(artifact, expected):
        raise TypeError(
            f"stage {stage.name} expects {expected.__name__}, got {type(artifact).__name__}"
        )
    entry = ref if ref is not None else {"stage": stage.name, "operator": "replace"}
    new = trace.with_artifact(stage, artifact)
    return dataclasses.replace(new, lineage=trace.lineage + (entry,))
