"""Three-way Pass / Fast / Slow routing on the audit score."""

from __future__ import annotations

from dataclasses import dataclass

from .taxonomy import SEVERITY_RANK, Stage

DEFAULT_TAU = 0.95
DEFAULT_EPSILON = 0.10


@dataclass(frozen=True)
class RouterConfig:
    tau: float = DEFAULT_TAU
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not (0.0 < self.tau <= 1.0):
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not (0.0 < self.epsilon < self.tau):
            raise ValueError(f"epsilon must lie in (0, tau), got {self.epsilon}")


@dataclass(frozen=True)
class RoutingDecision:
    kind: str
    S: float
    blamed_stage_hint: Stage | None = None


def severity_hint(report) -> Stage:
    """Stage with the highest diagnostic severity; the earliest stage wins ties."""
    return min(report.diagnostics, key=lambda d: (-SEVERITY_RANK[d.stage_severity], int(d.stage))).stage


def route(report, cfg: RouterConfig) -> RoutingDecision:
    S = report.S
    if S >= cfg.tau:
        return RoutingDecision("pass", S)
    if S >= cfg.tau - cfg.epsilon:
        return RoutingDecision("fast", S, severity_hint(report))
    return RoutingDecision("slow", S)


def route_score(S: float, cfg: RouterConfig) -> str:
    """Case split on a bare score, for callers without a report."""
    if S >= cfg.tau:
        return "pass"
    if S >= cfg.tau - cfg.epsilon:
        return "fast"
    return "slow"
