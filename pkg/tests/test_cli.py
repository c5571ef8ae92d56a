import json
import subprocess
import sys

import pytest

from owmm_bench import canonical
from owmm_bench.agent import group_trace_rows, parse_action
from owmm_bench.cli import main
from owmm_bench.mock_server import MockConfig, MockPolicyServer


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Two scenes plus a small synthesized dataset shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-scenes", "--count", "2", "--out", str(d / "scenes")]) == 0
    assert main(["synth-data", "--scenes", str(d / "scenes"), "--episodes-per-scene", "3",
                 "--out", str(d / "data")]) == 0
    return d


def test_gen_scenes_names_and_bytes(tmp_path):
    assert main(["gen-scenes", "--count", "3", "--seed", "5", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-scenes", "--count", "3", "--seed", "5", "--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["scene-000005.json", "scene-000006.json", "scene-000007.json"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


@pytest.mark.parametrize("argv", [["gen-scenes", "--count", "0"], ["gen-scenes", "--bogus"], ["fly"],
                                  ["eval-single", "--records", "x.jsonl"]])
def test_usage_errors(argv, tmp_path):
    assert main(argv + (["--out", str(tmp_path)] if argv[0] == "gen-scenes" else [])) == 1


def test_config_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("OWMM_SEED", raising=False)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 9, "gen-scenes": {"count": 2}}))
    assert main(["gen-scenes", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["scene-000009.json", "scene-000010.json"]
    # the flag beats the config file
    assert main(["gen-scenes", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "b")]) == 0
    assert sorted(p.name for p in (tmp_path / "b").iterdir()) == ["scene-000001.json", "scene-000002.json"]
    # the environment beats both
    monkeypatch.setenv("OWMM_SEED", "4")
    assert main(["gen-scenes", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "c")]) == 0
    assert sorted(p.name for p in (tmp_path / "c").iterdir()) == ["scene-000004.json", "scene-000005.json"]


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"colour": "red"}))
    assert main(["gen-scenes", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_remote_down_is_infrastructure_error(work, tmp_path):
    rc = main(["run-episodes", "--scenes", str(work / "scenes"), "--episodes-per-scene", "1",
               "--policy", "remote:http://127.0.0.1:9/", "--retries", "0", "--timeout", "1",
               "--out", str(tmp_path / "t.jsonl")])
    assert rc == 2


def test_leaked_split_is_validation_error(work, tmp_path):
    split = tmp_path / "split.json"
    split.write_text(json.dumps({"train_scenes": ["scene-000000", "scene-000001"], "test_scenes": ["scene-000001"],
                                 "test_objects": []}))
    rc = main(["synth-data", "--scenes", str(work / "scenes"), "--episodes-per-scene", "1",
               "--split-config", str(split), "--out", str(tmp_path / "d")])
    assert rc == 3


def test_synth_outputs(work):
    man = canonical.read_json(work / "data" / "manifest.json")
    assert man["train"]["leakage_check"] == "pass" and man["test"]["leakage_check"] == "pass"
    assert set(man["train"]["scenes"]).isdisjoint(man["test"]["scenes"])
    assert set(man["train"]["object_labels"]).isdisjoint(man["split_config"]["test_objects"])
    for split in ("train", "test"):
        rows = canonical.read_jsonl(work / "data" / f"{split}.jsonl")
        assert len(rows) == man["split_sizes"][split]


def test_waypoint_interval_monotone(work, tmp_path):
    counts = {}
    for k in (1, 5):
        out = tmp_path / f"d{k}"
        assert main(["synth-data", "--scenes", str(work / "scenes"), "--episodes-per-scene", "2",
                     "--waypoint-interval", str(k), "--out", str(out)]) == 0
        counts[k] = canonical.read_json(out / "manifest.json")["n_records_before_split"]
    assert counts[1] >= counts[5]


def _records(work):
    rows = canonical.read_jsonl(work / "data" / "train.jsonl") + canonical.read_jsonl(work / "data" / "test.jsonl")
    path = work / "all.jsonl"
    canonical.write_jsonl(path, rows)
    return path, rows


def test_oracle_predictions_score_perfect_decisions(work, tmp_path):
    recs, rows = _records(work)
    pred = tmp_path / "pred.jsonl"
    assert main(["predict", "--records", str(recs), "--scenes", str(work / "scenes"), "--out", str(pred)]) == 0
    assert main(["eval-single", "--records", str(recs), "--predictions", str(pred), "--no-figures",
                 "--out", str(tmp_path / "rep")]) == 0
    rep = canonical.read_json(tmp_path / "rep" / "report.json")
    assert rep["single_step"]["n_cases"] == len(rows)
    assert rep["single_step"]["decision_accuracy"] == 1.0


def test_malformed_prediction_line_counted(work, tmp_path):
    recs, rows = _records(work)
    pred = tmp_path / "pred.jsonl"
    lines = [json.dumps({"id": r["id"], "raw_text": r["answer"]}) for r in rows[1:]]
    pred.write_text("this is not json\n" + "\n".join(lines) + "\n")
    assert main(["eval-single", "--records", str(recs), "--predictions", str(pred), "--no-figures",
                 "--out", str(tmp_path / "rep")]) == 0
    rep = canonical.read_json(tmp_path / "rep" / "report.json")
    assert rep["meta"]["malformed_prediction_lines"] == 1
    assert rep["single_step"]["n_invalid"] == 1


def test_noisy_traces_and_strict_lenient(work, tmp_path):
    tr = tmp_path / "t.jsonl"
    assert main(["run-episodes", "--scenes", str(work / "scenes"), "--episodes-per-scene", "3",
                 "--policy", "noisy:50,0.1", "--out", str(tr)]) == 0
    traces = group_trace_rows(canonical.read_jsonl(tr))
    assert len(traces) == 6
    for t in traces:
        assert t.terminal in ("success", "failure", "dead_loop", "timeout")
        for s in t.steps:
            if s["parse_error"] is None:
                parse_action(s["raw_text"])
    rates = {}
    for mode in ("strict", "lenient"):
        out = tmp_path / mode
        assert main(["eval-episodic", "--traces", str(tr), "--scenes", str(work / "scenes"), f"--{mode}",
                     "--goal-threshold-from-scenes", "--no-figures", "--out", str(out)]) == 0
        rates[mode] = canonical.read_json(out / "report.json")["episodic"]["rates"]
    for k, v in rates["strict"].items():
        assert v <= rates["lenient"][k]


def test_echo_remote_matches_oracle(work, tmp_path):
    with MockPolicyServer(MockConfig("echo-oracle")) as srv:
        assert main(["run-episodes", "--scenes", str(work / "scenes"), "--episodes-per-scene", "2",
                     "--policy", f"remote:{srv.url}", "--include-ground-truth",
                     "--out", str(tmp_path / "remote.jsonl")]) == 0
    assert main(["run-episodes", "--scenes", str(work / "scenes"), "--episodes-per-scene", "2",
                 "--out", str(tmp_path / "oracle.jsonl")]) == 0
    a = canonical.read_jsonl(tmp_path / "remote.jsonl")
    b = canonical.read_jsonl(tmp_path / "oracle.jsonl")
    assert len(a) == len(b)
    assert [r.get("raw_text") for r in a] == [r.get("raw_text") for r in b]


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "owmm_bench.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-scenes", "run-episodes", "synth-data", "predict", "eval-single", "eval-episodic", "mock-policy"):
        assert cmd in out.stdout


def test_raster_payload_over_cli(work, tmp_path):
    with MockPolicyServer(MockConfig("echo-oracle")) as srv:
        assert main(["run-episodes", "--scenes", str(work / "scenes"), "--episodes-per-scene", "1",
                     "--policy", f"remote:{srv.url}", "--include-ground-truth", "--payload-mode", "structured+raster",
                     "--out", str(tmp_path / "t.jsonl")]) == 0
        assert srv.n_requests > 0
    assert main(["run-episodes", "--scenes", str(work / "scenes"), "--payload-mode", "jpeg",
                 "--out", str(tmp_path / "u.jsonl")]) == 1
