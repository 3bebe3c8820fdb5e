import json

import httpx
import pytest

from stagefix import model
from stagefix.agent import (
    ExternalExecutor,
    ReasoningFaultSpec,
    RuleExecutor,
    StageError,
    STAGE_PROMPTS,
    inject_reasoning_fault,
    make_executor,
    run_pipeline,
    run_stage,
)
from stagefix.audit import audit_trace
from stagefix.model import validate_trace
from stagefix.taxonomy import FAULT_CLASSES, REASONING_FAULTS, Stage

from helpers import STRONG, bundle, clean_trace, faulty


@pytest.mark.parametrize("fc", FAULT_CLASSES)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_strong_executor_finds_root(seed, fc):
    b = bundle(seed, fc)
    tr = clean_trace(seed, fc)
    top = tr.dr.ranking[0]
    assert (top.entity, top.fault_class) == (b.truth.root_entity, b.truth.fault_class)
    assert validate_trace(tr, b.topology) == []
    assert audit_trace(tr, b.store, b.topology).S == 1.0


def test_pipeline_is_deterministic():
    b = bundle(4, "network_delay")
    assert model.dumps(run_pipeline(STRONG, b, 4)) == model.dumps(run_pipeline(STRONG, b, 4))


def test_weak_executor_runs_and_validates():
    b = bundle(3, "cpu_hog")
    tr = run_pipeline(RuleExecutor("weak"), b, 3)
    assert validate_trace(tr, b.topology) == []


def test_missing_bundle_is_s1_error(tmp_path):
    with pytest.raises(StageError) as err:
        run_pipeline(STRONG, tmp_path / "missing", 0)
    assert err.value.stage is Stage.S1


def test_stage_needs_upstream():
    b = bundle()
    with pytest.raises(StageError):
        run_stage(STRONG, Stage.S3, {Stage.S1: clean_trace().ep}, b.store, b.topology)


def test_unknown_executor():
    with pytest.raises(ValueError):
        make_executor("oracle")
    with pytest.raises(ValueError):
        RuleExecutor("medium")


def test_fault_spec_checks_stage():
    with pytest.raises(ValueError):
        ReasoningFaultSpec("fabricated_evidence", Stage.S3)
    with pytest.raises(ValueError):
        ReasoningFaultSpec.of("typo")


@pytest.mark.parametrize("ft", sorted(REASONING_FAULTS))
def test_injected_fault_lowers_score_and_spares_upstream(ft):
    b, tr, _ = faulty(ft)
    clean = clean_trace()
    stage = REASONING_FAULTS[ft]
    assert tr.meta["injected_fault"] == ft and tr.meta["target_stage"] == stage.name
    for s in Stage:
        if s < stage:
            assert tr.artifact(s) == clean.artifact(s)
    assert tr.artifact(stage) != clean.artifact(stage)
    assert audit_trace(tr, b.store, b.topology).S < 1.0


# --- external executor against a mock transport ------------------------------

def _stage_of(prompt: str) -> Stage:
    for s, text in STAGE_PROMPTS.items():
        if prompt.startswith(text):
            return s
    raise AssertionError("unrecognised prompt")


def _fenced(artifact) -> str:
    return "Here you go\n```json\n" + model.dumps(artifact) + "\n```\n"


def _external(handler, **kw):
    return ExternalExecutor(url="http://gen.test/v1", token="t", transport=httpx.MockTransport(handler), **kw)


def test_external_executor_reproduces_fenced_artifacts():
    clean = clean_trace()
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append(request.headers["authorization"])
        s = _stage_of(body["messages"][1]["content"])
        return httpx.Response(200, json={"content": _fenced(clean.artifact(s))})

    tr = run_pipeline(_external(handler), bundle(), 1)
    assert [tr.artifact(s) for s in Stage] == [clean.artifact(s) for s in Stage]
    assert seen == ["Bearer t"] * 4


def test_external_executor_retries_once_then_fails_with_raw():
    clean = clean_trace()
    calls = {"n": 0}

    def flaky(request):
        calls["n"] += 1
        if calls["n"] == 1:
            return httpx.Response(200, json={"content": "no json here"})
        return httpx.Response(200, json={"content": _fenced(clean.ep)})

    b = bundle()
    ep = run_stage(_external(flaky), Stage.S1, {}, b.store, b.topology)
    assert ep == clean.ep and calls["n"] == 2

    def garbage(request):
        return httpx.Response(200, json={"content": "```json\n{\"nope\": 1}\n```"})

    with pytest.raises(StageError) as err:
        run_stage(_external(garbage), Stage.S1, {}, b.store, b.topology)
    assert err.value.raw and "nope" in err.value.raw


def test_external_executor_rejects_schema_invalid_artifact():
    clean = clean_trace()
    bad = model.encode(clean.hs)
    bad["hypotheses"][0]["support"] = ["ev:does-not-exist"]

    def handler(request):
        return httpx.Response(200, json={"content": "```json\n" + json.dumps(bad) + "\n```"})

    b = bundle()
    with pytest.raises(StageError):
        run_stage(_external(handler), Stage.S2, {Stage.S1: clean.ep}, b.store, b.topology)


def test_external_transport_error_is_stage_error():
    def down(request):
        return httpx.Response(503)

    b = bundle()
    with pytest.raises(StageError) as err:
        run_stage(_external(down), Stage.S1, {}, b.store, b.topology)
    assert "transport" in str(err.value)


def test_external_needs_url(monkeypatch):
    monkeypatch.delenv("STAGEFIX_GEN_URL", raising=False)
    with pytest.raises(ValueError):
        ExternalExecutor()
