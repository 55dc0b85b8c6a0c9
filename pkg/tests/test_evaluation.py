import json

import pytest

from conftest import A105, SS304, make_task
from cadloop.agents import GreedyAgent, LazyAgent, RandomAgent, format_final
from cadloop.environment import AgentAction, DesignState, Episode, TrajectoryLog, run_episode
from cadloop.errors import MismatchedInputs
from cadloop.evaluation import COLUMNS, EvalReport, Failed, evaluate, reproduce_final
from cadloop.postproc import FeedbackTuple
from cadloop.agents import ScriptedAgent
from cadloop.environment import TOOLS

PLATE = DesignState("rect_plate", [100.0, 50.0, 5.0], A105)


def test_reproduce_matches_in_episode_run():
    task = make_task()
    ep = Episode(task)
    run_episode(task, GreedyAgent(), episode=ep)
    fb = reproduce_final(ep.records[-1].design, task)
    assert fb == ep.records[-1].feedback
    assert reproduce_final(DesignState("rect_plate", [100.0, 50.0, 50.0], A105), task) == Failed(
        "InvalidParams", "parameter T=50 outside [3, 10]"
    )
    assert reproduce_final(DesignState("rect_plate", [100.0, 50.0, 5.0], "Mithril"), task).cause == "UnknownMaterial"
    assert reproduce_final(DesignState("i_beam", [100.0, 50.0, 5.0], A105), task).cause == "CategoryMismatch"


def test_failure_injection_never_affects_reproduction():
    task = make_task(failure_prob=0.9, rng_seed=3)
    a = reproduce_final(PLATE, task)
    b = reproduce_final(PLATE, make_task())
    assert isinstance(a, FeedbackTuple) and a == b


def _final_only(task_id, text):
    log = TrajectoryLog(task_id)
    if text is not None:
        log.append("final_output", 0, payload={"text": text})
    return log


def test_counting_example_and_missing_finals():
    tasks = [make_task(task_id=f"c{i}") for i in range(4)]
    bad = DesignState("rect_plate", [100.0, 50.0, 3.0], SS304)  # too flexible
    logs = [_final_only("c0", format_final(PLATE)), _final_only("c1", format_final(PLATE)),
            _final_only("c2", format_final(PLATE)), _final_only("c3", format_final(bad))]
    rep = evaluate(zip(tasks, logs))
    assert rep.fsr == 0.75 and rep.meo == 1.0
    logs[3] = _final_only("c3", "I could not finish.")
    rep = evaluate(zip(tasks, logs))
    row = rep.rows[3]
    assert (row.meo, row.disp_ok, row.stress_ok, row.cost_ok, row.cause) == (False, False, False, False, "NoFinalOutput")
    assert rep.fsr == 0.75 and rep.meo == 0.75
    assert rep.dsr == rep.ssr == rep.csr == 0.75


def test_as_formula_and_atc():
    task = make_task(task_id="a")
    log, _ = run_episode(task, GreedyAgent())
    rep = evaluate([(task, log)])
    assert rep.atc == 4
    assert rep.as_score == pytest.approx(0.2 * 1 + 0.2 * 1 + 0.6 * 1)
    # one failed response out of four, wrong-material final satisfying two
    t2 = make_task(task_id="b", failure_prob=0.0)
    agent = ScriptedAgent([AgentAction.propose(PLATE), AgentAction.tool_call("cad_generate"),
                           AgentAction.tool_call("cae_solve", {"geometry_id": "nope"}),
                           AgentAction.tool_call("cae_solve"), AgentAction.tool_call("extract_results"),
                           AgentAction.final(format_final(DesignState("rect_plate", [100.0, 50.0, 5.0],
                                                                      "Chrome-Moly Alloy Steel")))])
    log2, _ = run_episode(t2, agent)
    row = evaluate([(t2, log2)]).rows[0]
    assert row.ok_fraction == 0.75 and row.n_satisfied == 2
    assert row.as_score == pytest.approx(0.2 * 0.75 + 0.2 + 0.6 * 2 / 3)
    assert row.tool_calls == 4


def test_report_invariants_and_determinism():
    pairs = []
    for i, scale in enumerate((0.7, 0.9, 1.2, 1.6)):
        task = make_task(task_id=f"r{i}", delta_scale=scale, kappa_scale=1.05)
        for agent in (GreedyAgent(), RandomAgent(i), LazyAgent()):
            pairs.append((task, run_episode(task, agent)[0]))
    a, b = evaluate(pairs), evaluate(pairs)
    assert a.to_json() == b.to_json()
    assert a.fsr <= min(a.dsr, a.ssr, a.csr)
    assert all(0 <= v <= 1 for k, v in a.metrics().items() if k not in ("AS", "ATC"))
    d = json.loads(a.to_json())
    assert d["schema"] == "eval-report/v1" and d["n"] == 12 and list(d["metrics"]) == list(COLUMNS)
    head, row = a.table("greedy").splitlines()
    assert head.split()[1:] == list(COLUMNS)
    assert row.split()[0] == "greedy" and len(row.split()) == 8


def test_mismatched_inputs():
    task = make_task(task_id="x")
    with pytest.raises(MismatchedInputs):
        evaluate([(task, TrajectoryLog("y"))])


def test_reproduction_consistency_with_last_triple():
    from cadloop.reward import parse_triples
    for scale in (0.75, 0.9, 1.3):
        task = make_task(task_id="k", delta_scale=scale, category="l_bracket", params=(60.0, 40.0, 30.0, 5.0),
                         pressure=0.75)
        log, _ = run_episode(task, GreedyAgent())
        last = parse_triples(log)[-1]
        fb = reproduce_final(last.design, task)
        for x, y in zip(fb.to_dict().values(), last.feedback.to_dict().values()):
            assert x == pytest.approx(y, rel=1e-9)


def test_empty_report():
    rep = evaluate([])
    assert isinstance(rep, EvalReport) and rep.n == 0 and rep.fsr == 0.0
