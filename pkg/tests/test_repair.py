import random
from dataclasses import replace as dc_replace

import pytest

from stagefix.agent import RuleExecutor
from stagefix.audit import audit_trace
from stagefix.patches import PatchError, StagePatch, all_operator_patches, apply_patch
from stagefix.repair import (
    MemoryEntry,
    RepairConfig,
    RepairMemory,
    ReplayStats,
    exhaustive_minimal_stage,
    incident_signature,
    localize_decisive_stage,
    repair,
    replay,
)
from stagefix.router import RouterConfig
from stagefix.sim import redact_evidence
from stagefix.taxonomy import REASONING_FAULTS, Stage

from helpers import STRONG, bundle, clean_trace, faulty


def _some_patches(tr, b):
    out = []
    for s in Stage:
        out.extend(all_operator_patches(tr, s, b.store, b.topology))
    return out


@pytest.mark.parametrize("ft", ["source_confusion", "missing_hypotheses", "unsupported_causal_leap",
                                "unstable_conclusion"])
def test_replay_counts_and_upstream_identity(ft):
    b, tr, ex = faulty(ft)
    for p in _some_patches(tr, b):
        stats = ReplayStats()
        try:
            out = replay(tr, p.stage, p, ex, b.store, b.topology, 1, stats)
        except PatchError:
            continue
        assert stats.executions == 4 - int(p.stage)
        assert set(stats.per_stage) == {s.name for s in Stage if s > p.stage}
        for s in Stage:
            if s < p.stage:
                assert out.artifact(s) is tr.artifact(s)
        assert out.artifact(p.stage) == apply_patch(tr, p, b.store, b.topology)
        assert out.lineage[-1]["operator"] == p.operator


def test_replay_stage_mismatch():
    b, tr, ex = faulty("missing_hypotheses")
    with pytest.raises(ValueError):
        replay(tr, Stage.S1, StagePatch(Stage.S2, "add_alternatives"), ex, b.store, b.topology)


def test_repair_config_validation():
    for kw in ({"delta": 0}, {"K": 0}, {"I": 0}, {"topk_fallback": 0}):
        with pytest.raises(ValueError):
            RepairConfig(**kw)


def test_clean_trace_passes_untouched():
    res = repair(clean_trace(), bundle(), STRONG)
    assert res.outcome == "passed" and res.rounds_used == 0 and res.final_trace is clean_trace()


@pytest.mark.parametrize("ft", sorted(REASONING_FAULTS))
@pytest.mark.parametrize("seed", [1, 3])
def test_repair_fixes_each_fault_at_its_stage(ft, seed):
    b, tr, ex = faulty(ft, seed)
    res = repair(tr, b, ex)
    assert res.outcome in ("fast_repaired", "slow_repaired")
    assert res.final_S >= RouterConfig().tau
    assert res.localized_stage is REASONING_FAULTS[ft]
    top = res.final_trace.dr.top
    assert (top.entity, top.fault_class) == (b.truth.root_entity, b.truth.fault_class)
    assert 1 <= res.rounds_used <= 3
    # committed slow repairs clear the improvement threshold
    for c, kind in zip(res.committed, res.committed_kinds):
        if kind == "slow":
            assert c.delta_S >= 0.05


@pytest.mark.parametrize("ft", sorted(REASONING_FAULTS))
def test_localization_matches_exhaustive_oracle(ft):
    b, tr, ex = faulty(ft, 2)
    rep = audit_trace(tr, b.store, b.topology)
    loc = localize_decisive_stage(tr, rep, RepairConfig(), ex, b.store, b.topology, 2)
    oracle, _ = exhaustive_minimal_stage(tr, rep, ex, b.store, b.topology, 2)
    assert loc.stage is oracle


def test_iteration_budget_is_respected():
    b, tr, ex = faulty("source_confusion")
    res = repair(tr, b, ex, repair_cfg=RepairConfig(I=1), router_cfg=RouterConfig(1.0, 0.1))
    assert res.rounds_used <= 1


def test_fallback_on_rollback_failure():
    b = bundle()
    tr = clean_trace()
    gone = [e for e, _ in b.truth.propagation_order if e != b.truth.root_entity]
    b2 = dc_replace(b, store=redact_evidence(b.store, gone))
    res = repair(tr, b2, STRONG)
    assert res.rollbacks == 1
    assert res.outcome == "verification_first_fallback"
    assert res.final_trace.dr.verification_first
    assert 1 <= len(res.final_trace.dr.ranking) <= 3
    assert res.final_trace.dr.verification_tests
    assert res.final_trace.meta["fallback"] == "no score claim"
    last = res.history[-1]
    assert last["path"] == "rollback-failed" and last["stage"] == "S1"
    assert set(last["rollback_operators"]) <= {"shift_expand_window", "requery_modality", "expand_scope_neighbors"}


def test_variants():
    b, tr, ex = faulty("fabricated_evidence")
    with pytest.raises(ValueError):
        repair(tr, b, ex, variant="nope")
    full = repair(tr, b, ex)
    nfs = repair(tr, b, ex, variant="no_fast_slow")
    assert "fast" not in nfs.committed_kinds
    assert full.outcome.endswith("repaired") and nfs.outcome.endswith("repaired")
    nc = repair(tr, b, ex, variant="no_cce")
    assert set(nc.committed_kinds) <= {"fast", "hinted"}


# --- memory -------------------------------------------------------------------

def test_memory_records_only_improvements(tmp_path):
    mem = RepairMemory(delta=0.05)
    sig = {"modality": "metric", "fault_class": "cpu_hog", "degree": "1", "sparsity": "dense"}
    assert not mem.record(MemoryEntry(sig, Stage.S2, {"operator": "add_alternatives"}, 0.049))
    assert mem.record(MemoryEntry(sig, Stage.S2, {"operator": "add_alternatives"}, 0.05))
    assert mem.record(MemoryEntry(sig, Stage.S3, {"operator": "attach_link_support"}, 0.2))
    assert mem.record(MemoryEntry(sig, Stage.S2, {"operator": "add_alternatives"}, 0.1))
    got = mem.lookup(sig)
    assert [(g["stage"], g["operator"]) for g in got] == [("S3", "attach_link_support"), ("S2", "add_alternatives")]
    assert mem.lookup(dict(sig, degree="0")) == []
    path = tmp_path / "mem.json"
    mem.save(path)
    back = RepairMemory.load(path)
    assert back.lookup(sig) == got and len(back) == 3
    assert len(RepairMemory.load(tmp_path / "absent.json")) == 0


def test_signature_is_discrete():
    b, tr, _ = faulty("premature_anchoring")
    sig = incident_signature(tr, b.topology)
    assert set(sig) == {"modality", "fault_class", "degree", "sparsity"}
    assert all(isinstance(v, str) for v in sig.values())


def test_memory_reduces_candidates_over_fifty_incidents():
    rng = random.Random(11)
    faults = sorted(REASONING_FAULTS)
    cases = [(seed, rng.choice(faults)) for seed in range(50)]
    totals, repaired = {}, {}
    for use_memory in (False, True):
        mem = RepairMemory() if use_memory else None
        n = ok = 0
        for seed, ft in cases:
            b, tr, ex = faulty(ft, seed % 10, ("cpu_hog", "packet_loss")[seed % 2])
            res = repair(tr, b, ex, memory=mem)
            n += res.candidates_evaluated
            ok += res.outcome.endswith("repaired")
        totals[use_memory], repaired[use_memory] = n, ok
    assert totals[True] < totals[False]
    assert repaired[True] >= repaired[False]
