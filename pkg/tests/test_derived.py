"""Worked examples whose expected values come from independent oracles."""

import dataclasses
import random

import numpy as np

from stagefix.agent import ReasoningFaultSpec, inject_reasoning_fault
from stagefix.audit import audit_trace, item_backed
from stagefix.evaluation import acc_at_k, baseline_attribution, run_ablation, run_experiment, stage_localization_suite
from stagefix.model import HypothesisSet, PropagationPath, link_key, replace_stage, validate_trace
from stagefix.patches import apply_patch, auto_params, StagePatch
from stagefix.repair import ReplayStats, RepairConfig, RepairMemory, exhaustive_minimal_stage, localize_decisive_stage, repair
from stagefix.sim import query_telemetry, simulate_incident
from stagefix.taxonomy import REASONING_FAULTS, Stage

from helpers import STRONG, bundle, clean_trace, faulty


def _two_hop(topo):
    edges = set(topo.call_edges)
    for a, b in topo.call_edges:
        for b2, c in topo.call_edges:
            if b2 == b and (a, c) not in edges and a != c:
                return a, b, c
    raise AssertionError("topology has no two-hop chain")


def test_skip_edge_path_gives_one_reachability_violation():
    b = bundle()
    tr = clean_trace()
    a, _, c = _two_hop(b.topology)
    path = PropagationPath("p:skip", (a, c), (None, None), {link_key(a, c): ()}, direction="call")
    as_ = dataclasses.replace(tr.as_, paths=(path,))
    got = [v for v in validate_trace(replace_stage(tr, Stage.S3, as_), b.topology)
           if v.stage == "S3" and v.rule == "reachability"]
    assert len(got) == 1


def _dangling_dr_refs(trace):
    pids = {p.id for p in trace.as_.paths}
    return [i for i, c in enumerate(trace.dr.ranking) if any(d not in pids for d in c.derived_from)]


def test_replace_then_validate_reports_dangling_dr_refs():
    b = bundle()
    tr = clean_trace()

    def reported(t):
        return sorted(int(v.path[8:v.path.index("]")]) for v in validate_trace(t, b.topology)
                      if v.rule == "derived_from")

    after_s2 = replace_stage(tr, Stage.S2, HypothesisSet(tr.hs.hypotheses[-1:]))
    assert reported(after_s2) == _dangling_dr_refs(after_s2) == []
    top_path = tr.dr.ranking[0].derived_from[0]
    as_ = dataclasses.replace(tr.as_, paths=tuple(p for p in tr.as_.paths if p.id != top_path))
    after_s3 = replace_stage(tr, Stage.S3, as_)
    assert reported(after_s3) == _dangling_dr_refs(after_s3) != []


def test_identity_and_window_replacements():
    tr = clean_trace()
    same = replace_stage(tr, Stage.S4, tr.dr)
    assert dataclasses.replace(same, lineage=tr.lineage) == tr and len(same.lineage) == len(tr.lineage) + 1
    a, z = tr.ep.incident_window
    wide = replace_stage(tr, Stage.S1, dataclasses.replace(tr.ep, incident_window=(a - 60_000, z)))
    assert wide.ep != tr.ep and (wide.hs, wide.as_, wide.dr) == (tr.hs, tr.as_, tr.dr)


def test_pre_onset_z_scores_stay_below_three():
    for seed, fc in ((0, "cpu_hog"), (4, "memory_leak"), (7, "disk_exhaustion")):
        b = simulate_incident(seed, fc)
        st = b.store
        k0 = int(np.searchsorted(st.timestamps, b.truth.onset))
        for key, series in st.metrics.items():
            mean, sd = st.baseline_stats[key]
            assert np.all(np.abs(series[:k0] - mean) / sd < 3.0), key


def test_window_over_root_onset_has_anomalous_item():
    b = simulate_incident(3, "cpu_hog")
    st, root = b.store, b.truth.root_entity
    got = query_telemetry(st, "metric", [root], (b.truth.onset - 60_000, b.truth.onset + 120_000))
    mean, sd = st.baseline_stats[(root, "cpu")]
    ts, vals = got[(root, "cpu")]
    assert any(abs(v - mean) / sd >= 3.0 for v in vals)


def test_clean_s1_window_and_scope():
    for seed, fc in ((1, "cpu_hog"), (2, "packet_loss"), (5, "network_delay")):
        b = bundle(seed, fc)
        ep = clean_trace(seed, fc).ep
        root = b.truth.root_entity
        assert ep.incident_window[0] <= b.truth.onset < ep.incident_window[1]
        assert {root, *b.topology.neighbors(root)} <= set(ep.entity_scope)


def test_fabricated_evidence_fails_exactly_one_item():
    b, tr, _ = faulty("fabricated_evidence")
    # oracle: re-query the store for every EP item
    bad = [it.id for it in tr.ep.items if not item_backed(b.store, it, tr.ep.incident_window)]
    assert len(bad) == 1
    clean = clean_trace()
    assert all(item_backed(b.store, it, clean.ep.incident_window) for it in clean.ep.items)


def _anomalous_ep_entities(trace):
    return {it.target for it in trace.ep.items if ":" in it.target and "->" not in it.target
            and it.anomaly_score >= 0.5}


def test_single_hypothesis_with_many_anomalous_entities_fails_anchoring():
    b = bundle()
    tr = clean_trace()
    assert len(_anomalous_ep_entities(tr)) >= 2
    one = replace_stage(tr, Stage.S2, HypothesisSet(tr.hs.hypotheses[:1]))
    assert audit_trace(one, b.store, b.topology).check("hs.anchoring").score == 0.0


def test_add_alternatives_carries_the_missing_entities():
    b = bundle()
    tr = clean_trace()
    anomalous = _anomalous_ep_entities(tr)
    keep = next(h for h in tr.hs.hypotheses if h.candidate_entity in anomalous)
    one = replace_stage(tr, Stage.S2, HypothesisSet((keep,)))
    params = auto_params("add_alternatives", one, b.store, b.topology)
    assert set(params["entities"]) == anomalous - {keep.candidate_entity}
    hs = apply_patch(one, StagePatch(Stage.S2, "add_alternatives", params), b.store, b.topology)
    assert anomalous <= {h.candidate_entity for h in hs.hypotheses}


def test_prune_leaves_only_topology_links():
    b, tr, _ = faulty("unsupported_causal_leap", 2)
    topo = b.topology
    bad = [p for p in tr.as_.paths if any(not topo.is_link(u, v, p.direction) for u, v in p.links())]
    assert bad
    params = auto_params("prune_hallucinated_edges", tr, b.store, topo)
    as_ = apply_patch(tr, StagePatch(Stage.S3, "prune_hallucinated_edges", params), b.store, topo)
    for p in as_.paths:
        assert all(topo.is_link(u, v, p.direction) for u, v in p.links())


def test_decisive_stage_examples():
    b, tr, ex = faulty("fabricated_evidence")
    rep = audit_trace(tr, b.store, b.topology)
    oracle, per_stage = exhaustive_minimal_stage(tr, rep, ex, b.store, b.topology, 1)
    assert oracle is Stage.S1 and per_stage[Stage.S1] >= 0.05
    loc = localize_decisive_stage(tr, rep, RepairConfig(), ex, b.store, b.topology, 1)
    assert loc.stage is Stage.S1

    b, tr, ex = faulty("unstable_conclusion")
    rep = audit_trace(tr, b.store, b.topology)
    stats = ReplayStats()
    loc = localize_decisive_stage(tr, rep, RepairConfig(), ex, b.store, b.topology, 1, stats=stats)
    assert loc.stage is Stage.S4 and loc.best.replay_cost == 0
    assert exhaustive_minimal_stage(tr, rep, ex, b.store, b.topology, 1)[0] is Stage.S4


def test_s4_fault_in_fast_band_repairs_in_one_round():
    b, tr, ex = faulty("unstable_conclusion")
    S = audit_trace(tr, b.store, b.topology).S
    assert 0.85 <= S < 0.95
    res = repair(tr, b, ex)
    assert res.outcome == "fast_repaired" and res.rounds_used == 1 and res.decisive_stage is Stage.S4


def test_memory_lowers_candidates_within_one_fault_class():
    faults = sorted(REASONING_FAULTS)
    rng = random.Random(4)
    cases = []
    seed = 0
    while len(cases) < 50:
        ft = rng.choice(faults)
        b = bundle(seed % 25, "memory_leak")
        try:
            tr, ex = inject_reasoning_fault(STRONG, b, ReasoningFaultSpec.of(ft), seed % 25)
        except ValueError:
            seed += 1
            continue
        cases.append((b, tr, ex))
        seed += 1
    means = {}
    for on in (False, True):
        mem = RepairMemory() if on else None
        n = [repair(tr, b, ex, memory=mem).candidates_evaluated for b, tr, ex in cases]
        means[on] = sum(n) / len(n)
    assert means[True] < means[False]


def test_acc_on_random_twenty_case_set():
    rng = random.Random(20)
    ents = [f"svc:{c}" for c in "abcdefg"]
    cases = [(rng.choice(ents), rng.sample(ents, 4)) for _ in range(20)]
    for k in (1, 3, 5):
        hand = 0
        for truth, ranking in cases:
            hand += truth in ranking[:k]
        assert acc_at_k(cases, k) == hand / 20


def test_binary_search_on_s1_hard_violation():
    b, tr, _ = faulty("fabricated_evidence")
    rep = audit_trace(tr, b.store, b.topology)
    assert rep.stage(Stage.S1).stage_severity == "hard_violation"
    got = baseline_attribution(tr, rep, "binary_search")
    assert got.stage is Stage.S1 and got.probes <= 2


def test_single_s4_case_localization_matches_oracle():
    cfg = {"topology_seeds": [0], "fault_classes": ["cpu_hog"], "oracle": True}
    rep = run_experiment(dict(cfg, reasoning_faults=["unstable_conclusion"], repeats=1))
    acc = stage_localization_suite(["unstable_conclusion"], 1, configs={"topology_seeds": [0],
                                                                        "fault_classes": ["cpu_hog"]})
    assert acc["per_stage"]["S4"] in (0.0, 1.0)
    assert rep["oracle_agreement"] == 1.0
    assert acc["per_stage"]["S4"] == (1.0 if rep["oracle_agreement"] == 1.0 else 0.0)


def test_no_cce_on_s1_fault_suite():
    s1 = [ft for ft, s in REASONING_FAULTS.items() if s is Stage.S1]
    base = {"topology_seeds": [0, 1], "reasoning_faults": s1, "repeats": 2}
    full, nocce = run_experiment(base), run_ablation(base, "no_cce")
    loc = lambda r: r["stage_localization_accuracy"]["overall"]  # noqa: E731
    assert loc(nocce) <= loc(full)
