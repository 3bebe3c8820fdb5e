import json
import subprocess
import sys

import pytest

from stagefix.cli import main


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--seed", "1", "--fault-class", "packet_loss", "--out", str(d / "b")]) == 0
    return d


def test_run_audit_repair_flow(work, capsys):
    b, tr = str(work / "b"), str(work / "tr.json")
    assert main(["run", "--bundle", b, "--seed", "1", "--inject", "missing_hypotheses", "--out", tr]) == 0
    assert json.loads(open(tr).read())["meta"]["injected_fault"] == "missing_hypotheses"
    assert main(["audit", "--trace", tr, "--bundle", b, "--out", str(work / "audit.json")]) == 0
    audit = json.loads((work / "audit.json").read_text())
    assert audit["S"] < 0.95
    mem = work / "mem.json"
    assert main(["repair", "--trace", tr, "--bundle", b, "--memory", str(mem), "--out", str(work / "rep.json")]) == 0
    rep = json.loads((work / "rep.json").read_text())
    assert rep["outcome"].endswith("repaired") and rep["localized_stage"] == "S2"
    assert json.loads(mem.read_text())["entries"]
    assert "repaired" in capsys.readouterr().err


def test_patch_command(work):
    b, tr = str(work / "b"), str(work / "tr2.json")
    assert main(["run", "--bundle", b, "--seed", "1", "--inject", "non_convergent_reporting", "--out", tr]) == 0
    out = work / "patched.json"
    assert main(["patch", "--trace", tr, "--bundle", b, "--stage", "S4",
                 "--operator", "align_ranking_with_analysis", "--replay", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["lineage"][-1]["operator"] == "align_ranking_with_analysis"
    assert main(["patch", "--trace", tr, "--bundle", b, "--stage", "S1",
                 "--operator", "align_ranking_with_analysis"]) == 2


def test_typed_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--bundle", str(tmp_path / "nope")]) == 2
    assert "error" in capsys.readouterr().err
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[router]\ntua = 0.5\n")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_eval_and_ablate(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('topology_seeds = [0]\nfault_classes = ["cpu_hog"]\nrepeats = 1\n')
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "report.json").exists()
    assert main(["ablate", "--config", str(cfg), "--variant", "no_cce", "--out", str(tmp_path / "a")]) == 0
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["config"]["variant"] == "no_cce"
    assert "cases=13" in capsys.readouterr().out


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "stagefix.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "repair" in out.stdout
