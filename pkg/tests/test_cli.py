import json
import shlex
import subprocess
import sys

import pytest

from cadloop.cli import main
from cadloop.dataset import read_taskset


@pytest.fixture(scope="module")
def tasks(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "tasks.v1"
    argv = ["gen-tasks", "--categories", "rect_plate,cantilever_beam", "--count", "4", "--seed", "7",
            "--resolution", "1", "--out", str(path)]
    assert main(argv) == 0
    return path


def test_gen_tasks_contract(tasks, capsys):
    recs = read_taskset(tasks)
    assert len(recs) == 4
    assert [r.task.category for r in recs] == ["rect_plate", "cantilever_beam"] * 2
    man = json.loads((tasks.parent / "tasks.v1.splits.json").read_text())
    assert man["schema"] == "splits/v1" and len(man["train"]) == 4


def test_pipeline_and_determinism(tasks, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        logs = tmp_path / name
        assert main(["run", "--tasks", str(tasks), "--agent", "greedy", "--seed", "3", "--out", str(logs)]) == 0
        assert main(["score", "--logs", str(logs), "--mode", "rollout"]) == 0
        assert main(["score", "--logs", str(logs), "--tasks", str(tasks), "--mode", "reverify"]) == 0
        assert main(["eval", "--logs", str(logs), "--tasks", str(tasks)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(logs.iterdir())})
    assert outs[0] == outs[1]
    files = outs[0]
    assert {"manifest.json", "rewards.rollout.jsonl", "rewards.reverify.jsonl", "report.json", "report.txt"} <= set(files)
    report = json.loads(files["report.json"])
    assert list(report["metrics"]) == ["FSR", "DSR", "SSR", "CSR", "MEO", "AS", "ATC"]
    roll = [json.loads(x) for x in files["rewards.rollout.jsonl"].decode().splitlines()]
    rev = [json.loads(x) for x in files["rewards.reverify.jsonl"].decode().splitlines()]
    assert len(roll) == len(rev) == 4
    assert all(r["mode"] == "rollout" and "r_stop" in r for r in roll)
    assert all(r["mode"] == "reverify" and r["total"] in (0, 0.2, 0.5, 1.0) for r in rev)
    assert "greedy" in capsys.readouterr().out


def test_seed_changes_episode_streams(tasks, tmp_path, monkeypatch):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    base = ["run", "--tasks", str(tasks), "--agent", "random", "--failure-prob", "0.3", "--max-rounds", "3"]
    assert main(base + ["--seed", "1", "--out", str(a)]) == 0
    monkeypatch.setenv("COSMO_SEED", "1")
    assert main(base + ["--out", str(b)]) == 0
    assert main(base + ["--seed", "2", "--out", str(c)]) == 0
    ma, mb, mc = (json.loads((d / "manifest.json").read_text()) for d in (a, b, c))
    assert ma == mb and ma["seed"] == 1
    assert ma != mc
    assert all(e["task"]["max_tool_calls"] == 12 for e in ma["episodes"])


def test_serve_agent_protocol(tasks, tmp_path):
    cmd = shlex.join([sys.executable, "-m", "cadloop.agents", "greedy"])
    ext, loc = tmp_path / "ext", tmp_path / "loc"
    assert main(["serve-agent-protocol", "--tasks", str(tasks), "--cmd", cmd, "--out", str(ext)]) == 0
    assert main(["run", "--tasks", str(tasks), "--agent", "greedy", "--out", str(loc)]) == 0
    for p in loc.glob("*.jsonl"):
        assert (ext / p.name).read_bytes() == p.read_bytes()


def test_parallel_run_matches_serial(tasks, tmp_path):
    assert main(["run", "--tasks", str(tasks), "--agent", "greedy", "--jobs", "2", "--out", str(tmp_path / "p")]) == 0
    assert main(["run", "--tasks", str(tasks), "--agent", "greedy", "--out", str(tmp_path / "s")]) == 0
    for p in (tmp_path / "s").iterdir():
        assert (tmp_path / "p" / p.name).read_bytes() == p.read_bytes()


@pytest.mark.parametrize(
    "argv, code",
    [
        ([], 1),
        (["bogus"], 1),
        (["run", "--tasks", "x"], 1),
        (["run", "--tasks", "x", "--out", "y"], 1),
        (["gen-tasks", "--count", "-1", "--out", "x"], 1),
        (["run", "--tasks", "missing.v1", "--agent", "greedy", "--out", "o", "--failure-prob", "2"], 1),
        (["run", "--tasks", "missing.v1", "--agent", "greedy", "--out", "o"], 2),
        (["eval", "--logs", "nowhere"], 2),
    ],
)
def test_exit_codes(argv, code, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
    if code == 1:
        assert "usage" in capsys.readouterr().err


def test_bad_cosmo_seed(monkeypatch, tmp_path):
    monkeypatch.setenv("COSMO_SEED", "abc")
    assert main(["gen-tasks", "--categories", "rect_plate", "--count", "1", "--out", str(tmp_path / "t")]) == 1


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "cadloop", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("gen-tasks", "run", "score", "eval", "serve-agent-protocol"):
        assert sub in res.stdout
