import random

import pytest

from stagefix.audit import AuditCheck, AuditReport, StageDiagnostics
from stagefix.router import RouterConfig, route, route_score, severity_hint
from stagefix.taxonomy import Stage


def _report(S, severities):
    diags = tuple(StageDiagnostics(s, (AuditCheck("x", s, 0.5, sev),), sev, 0.5)
                  for s, sev in zip(Stage, severities))
    return AuditReport(S, diags)


def _oracle(S, tau, eps):
    if S >= tau:
        return "pass"
    return "fast" if S >= tau - eps else "slow"


def test_defaults():
    cfg = RouterConfig()
    assert (cfg.tau, cfg.epsilon) == (0.95, 0.10)


@pytest.mark.parametrize("tau,eps", [(0.0, 0.1), (1.2, 0.1), (0.8, 0.0), (0.8, 0.8), (0.5, -0.1)])
def test_invalid_configs(tau, eps):
    with pytest.raises(ValueError):
        RouterConfig(tau, eps)


def test_random_triples_match_case_split():
    rng = random.Random(7)
    for _ in range(2000):
        tau = rng.uniform(0.05, 1.0)
        eps = rng.uniform(1e-6, tau * 0.999)
        S = rng.random()
        assert route_score(S, RouterConfig(tau, eps)) == _oracle(S, tau, eps)


def test_boundaries():
    cfg = RouterConfig(0.75, 0.25)
    assert route_score(0.75, cfg) == "pass"
    assert route_score(0.75 - 1e-12, cfg) == "fast"
    assert route_score(0.5, cfg) == "fast"
    assert route_score(0.5 - 1e-12, cfg) == "slow"
    assert route_score(1.0, RouterConfig(1.0, 0.5)) == "pass"


def test_fast_route_carries_hint():
    d = route(_report(0.9, ["minor", "major", "info", "major"]), RouterConfig())
    assert d.kind == "fast" and d.blamed_stage_hint is Stage.S2
    assert route(_report(0.97, ["info"] * 4), RouterConfig()).blamed_stage_hint is None
    assert route(_report(0.5, ["major"] * 4), RouterConfig()).kind == "slow"


def test_hint_takes_worst_then_earliest():
    assert severity_hint(_report(0.9, ["minor", "minor", "hard_violation", "major"])) is Stage.S3
    assert severity_hint(_report(0.9, ["info", "minor", "info", "minor"])) is Stage.S2


@pytest.mark.parametrize("S,kind", [(0.85, "pass"), (0.75, "fast"), (0.60, "slow")])
def test_worked_examples_at_080(S, kind):
    assert route_score(S, RouterConfig(0.80, 0.10)) == kind
