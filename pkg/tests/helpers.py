import functools

from stagefix.agent import ReasoningFaultSpec, RuleExecutor, inject_reasoning_fault, run_pipeline
from stagefix.sim import simulate_incident

STRONG = RuleExecutor("strong")


@functools.lru_cache(maxsize=None)
def bundle(seed=1, fault_class="cpu_hog"):
    return simulate_incident(seed, fault_class)


@functools.lru_cache(maxsize=None)
def clean_trace(seed=1, fault_class="cpu_hog"):
    return run_pipeline(STRONG, bundle(seed, fault_class), seed)


@functools.lru_cache(maxsize=None)
def faulty(fault_type, seed=1, fault_class="cpu_hog"):
    """(bundle, injected trace, faulty executor)"""
    b = bundle(seed, fault_class)
    trace, ex = inject_reasoning_fault(STRONG, b, ReasoningFaultSpec.of(fault_type), seed)
    return b, trace, ex
