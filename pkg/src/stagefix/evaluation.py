"""Metrics, attribution baselines and batch experiments."""

from __future__ import annotations

import csv
import io
import json
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import model
from .agent import (
    FaultNotApplicable,
    ReasoningFaultSpec,
    RuleExecutor,
    inject_reasoning_fault,
    run_pipeline,
)
from .audit import audit_trace
from .config import ExperimentConfig, make_config
from .repair import (
    MemoryEntry,
    RepairConfig,
    RepairMemory,
    exhaustive_minimal_stage,
    repair,
)
from .router import RouterConfig
from .sim import simulate_incident
from .taxonomy import FAULT_CLASSES, REASONING_FAULTS, SEVERITY_RANK, STAGES, Stage

BASELINE_METHODS = ("all_at_once", "step_by_step", "binary_search", "hybrid")
ACC_KS = (1, 3, 5)
HIST_KEYS = ("1", "2", "3", "unresolved")


# --- metrics -----------------------------------------------------------------


def acc_at_k(cases, k: int) -> float:
    """Fraction of cases whose true root is among the first k predictions.

    ``cases`` yields (true_root, ranked_entities) pairs.
    """
    cases = list(cases)
    if k < 1:
        raise ValueError("k must be at least 1")
    if not cases:
        raise ValueError("acc_at_k needs at least one case")
    hits = sum(1 for truth, ranking in cases if truth in list(ranking)[:k])
    return hits / len(cases)


def _safe(num, den):
    return num / den if den else 0.0


def classification_metrics(pairs) -> dict[str, float]:
    """Micro/macro precision, recall and F1 over (true, predicted) class pairs."""
    pairs = list(pairs)
    classes = sorted({t for t, _ in pairs} | {p for _, p in pairs if p is not None})
    tp = {c: 0 for c in classes}
    fp = dict(tp)
    fn = dict(tp)
    for t, p in pairs:
        if p == t:
            tp[t] += 1
        else:
            fn[t] += 1
            if p is not None:
                fp[p] += 1
    per = {}
    for c in classes:
        pr = _safe(tp[c], tp[c] + fp[c])
        re_ = _safe(tp[c], tp[c] + fn[c])
        per[c] = (pr, re_, _safe(2 * pr * re_, pr + re_))
    n = len(classes)
    TP, FP, FN = sum(tp.values()), sum(fp.values()), sum(fn.values())
    mi_p, mi_r = _safe(TP, TP + FP), _safe(TP, TP + FN)
    return {
        "MiPr": mi_p,
        "MaPr": _safe(sum(v[0] for v in per.values()), n),
        "MiRe": mi_r,
        "MaRe": _safe(sum(v[1] for v in per.values()), n),
        "MiF1": _safe(2 * mi_p * mi_r, mi_p + mi_r),
        "MaF1": _safe(sum(v[2] for v in per.values()), n),
    }


# --- attribution baselines ----------------------------------------------------


@dataclass(frozen=True)
class Attribution:
    stage: Stage
    low_confidence: bool
    probes: int


def _deficit(diag) -> float:
    return math.fsum(1.0 - c.score for c in diag.checks)


def _dirty(diag) -> bool:
    return any(SEVERITY_RANK[c.severity] >= SEVERITY_RANK["major"] for c in diag.checks)


def baseline_attribution(trace, report, method: str) -> Attribution:
    """Search-shaped stand-ins for whole-trace, stepwise and bisection attribution."""
    if method not in BASELINE_METHODS:
        raise ValueError(f"unknown attribution method {method!r}")
    diags = report.diagnostics
    if method == "all_at_once":
        best = max(diags, key=lambda d: (_deficit(d), -int(d.stage)))
        if _deficit(best) == 0:
            return Attribution(Stage.S4, True, 1)
        return Attribution(best.stage, False, 1)
    if method == "step_by_step":
        for i, d in enumerate(diags, 1):
            if _dirty(d):
                return Attribution(d.stage, False, i)
        return Attribution(Stage.S4, True, len(diags))
    if method == "binary_search":
        # smallest s whose prefix S1..s is not clean; prefix dirtiness is monotone in s
        lo, hi, probes = 1, len(diags), 0
        if not any(_dirty(d) for d in diags):
            return Attribution(Stage.S4, True, 1)
        while lo < hi:
            mid = (lo + hi) // 2
            probes += 1
            if any(_dirty(d) for d in diags[:mid]):
                hi = mid
            else:
                lo = mid + 1
        return Attribution(Stage(lo), False, max(1, probes))
    shortlist = sorted(diags, key=lambda d: (-_deficit(d), int(d.stage)))[:2]
    if all(_deficit(d) == 0 for d in shortlist):
        return Attribution(Stage.S4, True, 1)
    probes = 1
    for d in sorted(shortlist, key=lambda d: d.stage):
        probes += 1
        if _dirty(d):
            return Attribution(d.stage, False, probes)
    return Attribution(shortlist[0].stage, False, probes)


# --- experiment orchestration ----------------------------------------------


@dataclass(frozen=True)
class CaseSpec:
    case_id: str
    topology_seed: int
    fault_class: str
    reasoning_fault: str | None
    repeat: int
    incident_seed: int


def enumerate_cases(cfg: ExperimentConfig) -> list[CaseSpec]:
    out = []
    faults = list(cfg["reasoning_faults"]) if cfg["inject_faults"] else [None]
    for t in cfg["topology_seeds"]:
        for ci, fc in enumerate(cfg["fault_classes"]):
            for rep in range(int(cfg["repeats"])):
                inc_seed = int(cfg["seed"]) * 1_000_003 + int(t) * 10_007 + FAULT_CLASSES.index(fc) * 101 + rep
                for ft in faults:
                    cid = f"t{t}-{fc}-{ft or 'clean'}-r{rep}"
                    out.append(CaseSpec(cid, int(t), fc, ft, rep, inc_seed))
    return out


def _bundle_with_fault(spec: CaseSpec, values: dict, executor):
    from .sim import generate_topology

    topo = generate_topology(spec.topology_seed, values["n_services"], values["replicas"], values["n_nodes"])
    roots = [s for s in topo.services if s != topo.entry]
    random.Random(spec.incident_seed).shuffle(roots)
    last = None
    for root in roots:
        bundle = simulate_incident(spec.incident_seed, spec.fault_class, root, values["n_services"],
                                   values["replicas"], values["n_nodes"], topology_seed=spec.topology_seed)
        if spec.reasoning_fault is None:
            return bundle, run_pipeline(executor, bundle, spec.incident_seed), executor, None
        fspec = ReasoningFaultSpec.of(spec.reasoning_fault)
        try:
            trace, faulty = inject_reasoning_fault(executor, bundle, fspec, spec.incident_seed)
            return bundle, trace, faulty, fspec
        except FaultNotApplicable as exc:
            last = exc
    raise FaultNotApplicable(f"{spec.case_id}: {last}")


def _upstream_identical(before, after, stage) -> bool:
    return all(model.dumps(before.artifact(s)) == model.dumps(after.artifact(s)) for s in STAGES if s < stage)


def run_case(spec: CaseSpec, values: dict, memory_entries=()):
    """Process one case; returns (record, new memory entries)."""
    cfg = make_config(values)
    executor = RuleExecutor(values["executor"])
    try:
        bundle, trace, run_exec, fspec = _bundle_with_fault(spec, values, executor)
    except FaultNotApplicable as exc:
        return {"case_id": spec.case_id, "skipped": True, "reason": str(exc)}, []
    router_cfg = RouterConfig(values["router.tau"], values["router.epsilon"])
    repair_cfg = RepairConfig(values["repair.delta"], int(values["repair.K"]), int(values["repair.I"]),
                              int(values["repair.topk_fallback"]))
    weights = cfg.weights()
    memory = RepairMemory(list(memory_entries), repair_cfg.delta) if values["memory"] else None
    before = len(memory) if memory is not None else 0
    report = audit_trace(trace, bundle.store, bundle.topology, weights)
    result = repair(trace, bundle, run_exec, router_cfg, repair_cfg, memory, spec.incident_seed, weights,
                    variant=values["variant"])
    truth = bundle.truth
    final = result.final_trace
    ranking = [c.entity for c in final.dr.ranking]
    prev = trace
    monotone, upstream_ok = True, True
    for c in result.committed:
        upstream_ok &= _upstream_identical(prev, c.replayed_trace, c.stage)
        prev = c.replayed_trace
    slow_deltas = [o.delta_S for o, k in zip(result.committed, result.committed_kinds) if k == "slow"]
    if result.outcome != "verification_first_fallback":
        monotone = result.final_S >= result.initial_S - 1e-12
    initial_top = trace.dr.top.entity if trace.dr.top else None
    rec = {
        "case_id": spec.case_id,
        "skipped": False,
        "topology_seed": spec.topology_seed,
        "incident_seed": spec.incident_seed,
        "fault_class": spec.fault_class,
        "reasoning_fault": spec.reasoning_fault,
        "target_stage": fspec.target_stage.name if fspec else None,
        "truth_root": truth.root_entity,
        "initial_top1": initial_top,
        "initial_correct": initial_top == truth.root_entity,
        "initial_S": result.initial_S,
        "outcome": result.outcome,
        "decisive_stage": result.decisive_stage.name if result.decisive_stage else None,
        "localized_stage": result.localized_stage.name if result.localized_stage else None,
        "rounds_used": result.rounds_used,
        "final_S": result.final_S,
        "final_ranking": ranking,
        "predicted_class": final.dr.top.fault_class if final.dr.top else None,
        "corrected": result.outcome in ("fast_repaired", "slow_repaired") and bool(ranking)
                     and ranking[0] == truth.root_entity,
        "slow_deltas": slow_deltas,
        "upstream_identical": upstream_ok,
        "score_monotone": monotone,
        "candidates_evaluated": result.candidates_evaluated,
        "executions": result.executions,
        "rollbacks": result.rollbacks,
        "history": list(result.history),
        "replay_log": [o.summary() for o in result.replay_log],
    }
    if values["baselines"]:
        rec["baselines"] = {m: baseline_attribution(trace, report, m).stage.name for m in BASELINE_METHODS}
    if values["oracle"]:
        st, _ = exhaustive_minimal_stage(trace, report, run_exec, bundle.store, bundle.topology,
                                         spec.incident_seed, repair_cfg.delta, weights)
        rec["oracle_stage"] = st.name if st else None
    new = memory.entries[before:] if memory is not None else []
    return rec, new


def _run_case_args(args):
    return run_case(*args)


def _mean(xs):
    xs = list(xs)
    return math.fsum(xs) / len(xs) if xs else 0.0


def aggregate(records, cfg: ExperimentConfig) -> dict:
    """Pure fold of per-case records into the report."""
    live = [r for r in records if not r.get("skipped")]
    out: dict = {"n_cases": len(live), "n_skipped": len(records) - len(live)}
    if live:
        pairs = [(r["truth_root"], r["final_ranking"]) for r in live]
        out["acc_at"] = {str(k): acc_at_k(pairs, k) for k in ACC_KS}
        out["classification"] = classification_metrics((r["fault_class"], r["predicted_class"]) for r in live)
    else:
        out["acc_at"] = {str(k): 0.0 for k in ACC_KS}
        out["classification"] = classification_metrics([])

    faulty = [r for r in live if r["target_stage"]]
    per_stage = {}
    for s in STAGES:
        rs = [r for r in faulty if r["target_stage"] == s.name]
        if rs:
            per_stage[s.name] = _mean(1.0 if r["localized_stage"] == s.name else 0.0 for r in rs)
    per_class = {}
    for fc in FAULT_CLASSES:
        rs = [r for r in faulty if r["fault_class"] == fc]
        if rs:
            per_class[fc] = _mean(1.0 if r["localized_stage"] == r["target_stage"] else 0.0 for r in rs)
    out["stage_localization_accuracy"] = {
        "overall": _mean(1.0 if r["localized_stage"] == r["target_stage"] else 0.0 for r in faulty),
        "per_stage": per_stage,
        "per_fault_class": per_class,
        "per_reasoning_fault": {
            ft: _mean(1.0 if r["localized_stage"] == r["target_stage"] else 0.0
                      for r in faulty if r["reasoning_fault"] == ft)
            for ft in REASONING_FAULTS if any(r["reasoning_fault"] == ft for r in faulty)
        },
    }
    wrong = [r for r in live if not r["initial_correct"]]
    hist = {k: 0 for k in HIST_KEYS}
    for r in wrong:
        if r["corrected"] and 1 <= r["rounds_used"] <= 3:
            hist[str(r["rounds_used"])] += 1
        else:
            hist["unresolved"] += 1
    out["iteration_histogram"] = {k: (v / len(wrong) if wrong else 0.0) for k, v in hist.items()}
    out["initially_incorrect"] = len(wrong)
    out["repair_efficacy"] = _mean(1.0 if r["corrected"] else 0.0 for r in wrong)
    routed = [r for r in live if r["outcome"] != "passed"]
    out["mean_iterations"] = _mean(r["rounds_used"] for r in routed)
    out["mean_candidates_evaluated"] = _mean(r["candidates_evaluated"] for r in routed)
    outcomes = {}
    for r in live:
        outcomes[r["outcome"]] = outcomes.get(r["outcome"], 0) + 1
    out["outcomes"] = dict(sorted(outcomes.items()))
    slow = [d for r in live for d in r["slow_deltas"]]
    out["min_committed_slow_delta"] = min(slow) if slow else None
    out["upstream_identical_rate"] = _mean(1.0 if r["upstream_identical"] else 0.0 for r in live)
    if any("baselines" in r for r in faulty):
        out["baseline_stage_accuracy"] = {
            m: _mean(1.0 if r["baselines"][m] == r["target_stage"] else 0.0 for r in faulty)
            for m in BASELINE_METHODS
        }
    if any("oracle_stage" in r for r in faulty):
        with_oracle = [r for r in faulty if r.get("oracle_stage")]
        out["oracle_agreement"] = _mean(1.0 if r["localized_stage"] == r["oracle_stage"] else 0.0
                                        for r in with_oracle)
    out["config"] = cfg.echo()
    return out


def run_cases(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    specs = enumerate_cases(cfg)
    values = cfg.values
    workers = int(values["workers"] if workers is None else workers)
    wave = max(1, int(values["memory_wave"]))
    memory = RepairMemory(delta=values["repair.delta"])
    records = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for i in range(0, len(specs), wave):
            chunk = specs[i:i + wave]
            snap = tuple(memory.entries)
            args = [(s, values, snap) for s in chunk]
            results = list(pool.map(_run_case_args, args)) if pool else [run_case(*a) for a in args]
            for rec, new in results:
                records.append(rec)
                for e in new:
                    memory.record(e)
    finally:
        if pool:
            pool.shutdown()
    return records


def report_csv(report: dict) -> str:
    rows = []

    def walk(prefix, v):
        if isinstance(v, dict):
            for k in sorted(v):
                walk(f"{prefix}.{k}" if prefix else str(k), v[k])
        elif isinstance(v, (list, tuple)):
            rows.append((prefix, json.dumps(v)))
        else:
            rows.append((prefix, "" if v is None else repr(v) if isinstance(v, float) else str(v)))

    walk("", {k: v for k, v in report.items() if k != "config"})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    w.writerows(rows)
    return buf.getvalue()


def write_outputs(records, report, out_dir) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cases.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (d / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    (d / "report.csv").write_text(report_csv(report))
    return d


def run_experiment(config, out_dir=None, workers: int | None = None) -> dict:
    cfg = config if isinstance(config, ExperimentConfig) else make_config(config)
    records = run_cases(cfg, workers)
    report = aggregate(records, cfg)
    if out_dir is not None:
        write_outputs(records, report, out_dir)
    return report


def run_ablation(config, variant: str, out_dir=None, workers: int | None = None) -> dict:
    cfg = config if isinstance(config, ExperimentConfig) else make_config(config)
    values = dict(cfg.values)
    values["variant"] = variant
    return run_experiment(make_config(values), out_dir, workers)


def stage_localization_suite(faults, n: int, executor: str = "strong", configs: dict | None = None,
                             workers: int | None = None) -> dict:
    """Per-stage and per-class decisive-stage accuracy over ``faults`` x ``n`` repeats."""
    faults = list(faults or ())
    if not faults:
        raise ValueError("stage localization needs at least one injected reasoning fault")
    if n < 1:
        raise ValueError("n must be at least 1")
    values = dict(configs or {})
    if values.get("inject_faults") is False:
        raise ValueError("fault injection disabled: nothing to localize")
    values.update({"reasoning_faults": faults, "repeats": n, "executor": executor, "inject_faults": True})
    report = run_experiment(make_config(values), workers=workers)
    return report["stage_localization_accuracy"]


