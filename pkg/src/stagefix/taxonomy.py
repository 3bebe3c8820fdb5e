"""Fixed vocabularies shared by the simulator, the base agent and the auditor."""

from __future__ import annotations

from enum import IntEnum


class Stage(IntEnum):
    S1 = 1
    S2 = 2
    S3 = 3
    S4 = 4

    @classmethod
    def parse(cls, value) -> "Stage":
        if isinstance(value, Stage):
            return value
        if isinstance(value, int):
            return cls(value)
        text = str(value).strip().upper()
        aliases = {"EP": "S1", "HS": "S2", "AS": "S3", "DR": "S4"}
        text = aliases.get(text, text)
        try:
            return cls[text]
        except KeyError:
            raise ValueError(f"unknown stage {value!r}") from None


STAGES = tuple(Stage)

MODALITIES = ("metric", "log", "trace")

FAULT_CLASSES = ("cpu_hog", "memory_leak", "network_delay", "packet_loss", "disk_exhaustion")

METRICS = ("cpu", "memory", "disk", "latency_ms", "error_rate")

BASELINE_MEAN = {"cpu": 40.0, "memory": 50.0, "disk": 30.0, "latency_ms": 100.0, "error_rate": 1.0}

# log templates
T_INFO = "T_INFO"
T_NET_ERR = "T_NET_ERR"
T_DISK_ERR = "T_DISK_ERR"
T_GC_WARN = "T_GC_WARN"

# span-derived evidence signals
SPAN_LATENCY = "span_latency"
SPAN_ERRORS = "span_errors"

# The signal a human would check first to confirm each fault class.
CHARACTERISTIC_SIGNAL = {
    "cpu_hog": "cpu",
    "memory_leak": "memory",
    "network_delay": "latency_ms",
    "packet_loss": "error_rate",
    "disk_exhaustion": "disk",
}

# Fault classes indistinguishable from the same dominant signal family.
COUNTER_CLASS = {
    "network_delay": "cpu_hog",
    "cpu_hog": "network_delay",
    "packet_loss": "network_delay",
}


def classify_signals(signals) -> str | None:
    """Map a bag of evidence signals on one entity to its fault-class template."""
    sig = set(signals)
    if "cpu" in sig:
        return "cpu_hog"
    if "memory" in sig or T_GC_WARN in sig:
        return "memory_leak"
    if "disk" in sig or T_DISK_ERR in sig:
        return "disk_exhaustion"
    if sig & {"error_rate", T_NET_ERR, SPAN_ERRORS}:
        return "packet_loss"
    if sig & {"latency_ms", SPAN_LATENCY}:
        return "network_delay"
    return None


def compatible_classes(signals) -> set[str]:
    primary = classify_signals(signals)
    if primary is None:
        return set()
    out = {primary}
    if primary in COUNTER_CLASS:
        out.add(COUNTER_CLASS[primary])
    return out


def expected_modalities(fault_class: str, kind: str) -> tuple[str, ...]:
    """Modalities an evidence package should carry for an incident type."""
    if fault_class == "packet_loss":
        return ("metric", "log", "trace") if kind == "svc" else ("metric", "log")
    if fault_class == "network_delay":
        return ("metric", "trace") if kind == "svc" else ("metric",)
    if fault_class == "disk_exhaustion":
        return ("metric", "log")
    return ("metric",)


REASONING_FAULTS = {
    "fabricated_evidence": Stage.S1,
    "evidence_misreading": Stage.S1,
    "source_confusion": Stage.S1,
    "biased_evidence_selection": Stage.S1,
    "premature_anchoring": Stage.S2,
    "over_specific_hypothesis": Stage.S2,
    "missing_hypotheses": Stage.S2,
    "temporal_causal_mismatch": Stage.S3,
    "unsupported_causal_leap": Stage.S3,
    "insufficient_verification": Stage.S3,
    "belief_update_failure": Stage.S3,
    "unstable_conclusion": Stage.S4,
    "non_convergent_reporting": Stage.S4,
}

PATCH_OPERATORS = {
    Stage.S1: ("shift_expand_window", "requery_modality", "expand_scope_neighbors", "realign_timestamps"),
    Stage.S2: ("remove_unsupported", "add_alternatives", "add_counter_hypotheses", "add_cross_layer"),
    Stage.S3: ("rebuild_reachable_chain", "prune_hallucinated_edges", "restore_temporal_order",
               "attach_link_support"),
    Stage.S4: ("recalibrate_confidence", "align_ranking_with_analysis", "replace_verification_tests",
               "match_actions_to_mechanism"),
}

OPERATOR_STAGE = {op: stage for stage, ops in PATCH_OPERATORS.items() for op in ops}

SEVERITIES = ("info", "minor", "major", "hard_violation")
SEVERITY_RANK = {name: i for i, name in enumerate(SEVERITIES)}


def entity_kind(entity: str) -> str:
    return entity.split(":", 1)[0]
