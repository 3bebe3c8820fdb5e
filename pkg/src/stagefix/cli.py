"""Command-line entry point: ``stagefix simulate|run|audit|patch|repair|eval|ablate``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import model
from .agent import FaultyExecutor, ReasoningFaultSpec, StageError, inject_reasoning_fault, make_executor, run_pipeline
from .audit import audit_trace
from .config import ConfigError, load_config, load_flat
from .patches import PatchError, StagePatch, apply_patch
from .repair import RepairConfig, RepairMemory, repair, replay
from .router import RouterConfig
from .sim import IncidentBundle, simulate_incident
from .taxonomy import FAULT_CLASSES, OPERATOR_STAGE, REASONING_FAULTS, Stage


def _write(text: str, out):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_trace(path) -> model.RcaTrace:
    return model.loads(model.RcaTrace, Path(path).read_text())


def _executor_for(name, trace=None):
    ex = make_executor(name)
    if trace is not None and trace.meta.get("injected_fault"):
        # replays keep the injected defect active, as in the evaluation harness
        ex = FaultyExecutor(ex, ReasoningFaultSpec.of(trace.meta["injected_fault"]))
    return ex


def cmd_simulate(args):
    bundle = simulate_incident(args.seed, args.fault_class, args.root, args.services, args.replicas, args.nodes,
                               topology_seed=args.topology_seed, magnitude=args.magnitude)
    bundle.save(args.out)
    print(f"{bundle.incident_id}: root={bundle.truth.root_entity} class={bundle.truth.fault_class} -> {args.out}")


def cmd_run(args):
    executor = make_executor(args.executor)
    if args.inject:
        bundle = IncidentBundle.load(args.bundle)
        trace, _ = inject_reasoning_fault(executor, bundle, ReasoningFaultSpec.of(args.inject), args.seed)
    else:
        trace = run_pipeline(executor, args.bundle, args.seed)
    _write(model.dumps(trace, indent=2) + "\n", args.out)


def _weights(path):
    if not path:
        return None
    text = Path(path).read_text()
    return json.loads(text) if path.endswith(".json") else load_flat(path)


def cmd_audit(args):
    bundle = IncidentBundle.load(args.bundle)
    report = audit_trace(_load_trace(args.trace), bundle.store, bundle.topology, _weights(args.weights))
    _write(model.dumps(report, indent=2) + "\n", args.out)


def cmd_patch(args):
    bundle = IncidentBundle.load(args.bundle)
    trace = _load_trace(args.trace)
    stage = Stage.parse(args.stage)
    params = json.loads(args.params) if args.params else None
    if params is None:
        from .patches import auto_params

        params = auto_params(args.operator, trace, bundle.store, bundle.topology)
    patch = StagePatch(stage, args.operator, params, "manual", "command line")
    if args.replay:
        out = replay(trace, stage, patch, _executor_for(args.executor, trace), bundle.store, bundle.topology, trace.seed)
        _write(model.dumps(out, indent=2) + "\n", args.out)
    else:
        art = apply_patch(trace, patch, bundle.store, bundle.topology)
        _write(model.dumps(art, indent=2) + "\n", args.out)


def _router_repair_cfg(args):
    flat = load_flat(args.config) if getattr(args, "config", None) else {}
    tau = args.tau if args.tau is not None else flat.get("router.tau", RouterConfig().tau)
    eps = args.epsilon if args.epsilon is not None else flat.get("router.epsilon", RouterConfig().epsilon)
    rc = RepairConfig(flat.get("repair.delta", 0.05), int(flat.get("repair.K", 3)), int(flat.get("repair.I", 3)),
                      int(flat.get("repair.topk_fallback", 3)))
    weights = {k[8:]: v for k, v in flat.items() if k.startswith("weights.")} or None
    return RouterConfig(tau, eps), rc, weights


def cmd_repair(args):
    bundle = IncidentBundle.load(args.bundle)
    trace = _load_trace(args.trace)
    router_cfg, repair_cfg, weights = _router_repair_cfg(args)
    memory = RepairMemory.load(args.memory) if args.memory else None
    if memory is not None:
        memory.delta = repair_cfg.delta
    result = repair(trace, bundle, _executor_for(args.executor, trace), router_cfg, repair_cfg, memory,
                    weights=weights, variant=args.variant)
    if memory is not None:
        memory.save(args.memory)
    _write(json.dumps(result.to_dict(full_log=True), sort_keys=True, indent=2) + "\n", args.out)
    print(f"{result.outcome} rounds={result.rounds_used} S {result.initial_S:.3f} -> {result.final_S:.3f}",
          file=sys.stderr)


def _experiment_overrides(args):
    over = {}
    if args.tau is not None:
        over["router.tau"] = args.tau
    if args.epsilon is not None:
        over["router.epsilon"] = args.epsilon
    if args.workers is not None:
        over["workers"] = args.workers
    return over


def cmd_eval(args):
    from .evaluation import run_experiment

    cfg = load_config(args.config, _experiment_overrides(args))
    report = run_experiment(cfg, args.out)
    _summary(report, args.out)


def cmd_ablate(args):
    from .evaluation import run_ablation

    cfg = load_config(args.config, _experiment_overrides(args))
    report = run_ablation(cfg, args.variant, args.out)
    _summary(report, args.out)


def _summary(report, out):
    loc = report["stage_localization_accuracy"]["overall"]
    print(f"cases={report['n_cases']} acc@1={report['acc_at']['1']:.3f} stage_acc={loc:.3f} "
          f"efficacy={report['repair_efficacy']:.3f} mean_iters={report['mean_iterations']:.3f} -> {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stagefix", description="Audit and repair stage-structured RCA traces.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic incident bundle")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fault-class", choices=FAULT_CLASSES, default="cpu_hog")
    s.add_argument("--root", default=None, help="root entity id (default: random non-entry service)")
    s.add_argument("--services", type=int, default=10)
    s.add_argument("--replicas", type=int, default=4)
    s.add_argument("--nodes", type=int, default=6)
    s.add_argument("--topology-seed", type=int, default=None)
    s.add_argument("--magnitude", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("run", help="run the base agent on a bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--executor", choices=("strong", "weak", "external"), default="strong")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inject", choices=sorted(REASONING_FAULTS), default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("audit", help="audit a trace against its bundle")
    s.add_argument("--trace", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--weights", default=None, help="flat JSON map check_id -> weight")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_audit)

    s = sub.add_parser("patch", help="apply one patch operator")
    s.add_argument("--trace", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--stage", required=True)
    s.add_argument("--operator", required=True, choices=sorted(OPERATOR_STAGE))
    s.add_argument("--params", default=None, help="JSON params (default: automatic)")
    s.add_argument("--replay", action="store_true", help="replay downstream stages and emit the full trace")
    s.add_argument("--executor", choices=("strong", "weak", "external"), default="strong")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_patch)

    s = sub.add_parser("repair", help="audit, route and repair a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--executor", choices=("strong", "weak", "external"), default="strong")
    s.add_argument("--config", default=None)
    s.add_argument("--memory", default=None)
    s.add_argument("--variant", choices=("full", "no_fast_slow", "no_cce"), default="full")
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--epsilon", type=float, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_repair)

    for name, fn in (("eval", cmd_eval), ("ablate", cmd_ablate)):
        s = sub.add_parser(name, help="run a batch experiment" if name == "eval" else "run an ablation variant")
        s.add_argument("--config", default=None)
        s.add_argument("--out", required=True)
        s.add_argument("--workers", type=int, default=None)
        s.add_argument("--tau", type=float, default=None)
        s.add_argument("--epsilon", type=float, default=None)
        if name == "ablate":
            s.add_argument("--variant", choices=("full", "no_fast_slow", "no_cce"), required=True)
        s.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (StageError, PatchError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"stagefix: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
