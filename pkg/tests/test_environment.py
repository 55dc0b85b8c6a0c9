import json

import numpy as np
import pytest

from conftest import A105, CAST, make_task
from cadloop.agents import GreedyAgent, IdleAgent, ScriptedAgent, format_final
from cadloop.environment import (
    TOOLS,
    AgentAction,
    DesignState,
    Episode,
    Observation,
    Outcome,
    TaskInstance,
    TrajectoryLog,
    check_feasibility,
    run_episode,
)
from cadloop.errors import BudgetExhausted, EpisodeClosed, ProtocolViolation
from cadloop.fem import SimSetting
from cadloop.materials import default_library, lookup_material
from cadloop.postproc import FeedbackTuple

PLATE = DesignState("rect_plate", [100.0, 50.0, 5.0], A105)


def chain():
    return [AgentAction.tool_call(t) for t in TOOLS]


def kinds(log):
    return [(e.kind, e.tool, e.round) for e in log.events]


# -- feasibility ------------------------------------------------------------


def test_feasibility_examples():
    task = make_task()
    m = lookup_material(task.library, A105)
    t = TaskInstance("x", "rect_plate", (100, 50, 5), SimSetting(0.4), delta=0.08021, kappa=40.0)
    assert check_feasibility(FeedbackTuple(0.08725, 100.0, 36.19), t, m) == (False, True, True)
    at = FeedbackTuple(task.delta, m.sigma_allow, task.kappa)
    assert check_feasibility(at, task, m) == (True, True, True)
    assert check_feasibility(FeedbackTuple(0, 0, 0), task, m) == (True, True, True)
    above = FeedbackTuple(np.nextafter(task.delta, 1e9), m.sigma_allow, task.kappa)
    assert check_feasibility(above, task, m) == (False, True, True)


def test_task_validation_and_round_trip():
    task = make_task(rng_seed=5, failure_prob=0.25)
    assert TaskInstance.from_dict(json.loads(json.dumps(task.to_dict()))) == task
    with pytest.raises(ValueError):
        make_task(delta_scale=0.0)
    with pytest.raises(ValueError):
        make_task(max_tool_calls=3)
    with pytest.raises(ValueError):
        make_task(failure_prob=1.5)
    assert task.max_rounds == 15 and TaskInstance("y", "rect_plate", (1, 1, 1), SimSetting(1), 1, 1).max_tool_calls == 60


# -- episode examples -------------------------------------------------------


def test_greedy_feasible_at_round_zero_with_four_calls():
    log, outcome = run_episode(make_task(), GreedyAgent())
    assert str(outcome) == "feasible(0)"
    assert log.n_tool_calls == 4
    assert [e.tool for e in log.events if e.kind == "tool_call"] == list(TOOLS)
    assert all(e.ok for e in log.events if e.kind == "tool_response")
    assert log.events[-1].kind == "final_output"
    cost = [e for e in log.events if e.tool == "compute_cost" and e.kind == "tool_response"][0]
    assert cost.payload["feasible"] is True


def test_idle_agent_stops_at_max_rounds():
    task = make_task(max_rounds=3)
    log, outcome = run_episode(task, IdleAgent())
    assert outcome == Outcome("agent_stopped")
    assert log.count("assistant_message") == 3
    assert log.n_tool_calls == 0
    assert log.final_text is None


def test_budget_exhausted_exact_log():
    """max_tool_calls=4 with a design that needs a second round."""
    task = make_task(delta_scale=0.5, max_tool_calls=4)
    log, outcome = run_episode(task, GreedyAgent())
    assert outcome == Outcome("budget_exhausted")
    expected = [("assistant_message", None, 0)]
    for t in TOOLS:
        expected += [("tool_call", t, 0), ("tool_response", t, 0)]
    expected += [("assistant_message", None, 1)]
    assert kinds(log) == expected
    assert [e.index for e in log.events] == list(range(10))
    grown = log.events[-1].payload["design"]
    assert grown["parameters"][2] == pytest.approx(5.0 * 1.15)


def test_degenerate_plate_is_recoverable():
    task = make_task()
    bad = DesignState("rect_plate", [100.0, 50.0, 0.0], A105)
    agent = ScriptedAgent([AgentAction.propose(bad), AgentAction.tool_call("cad_generate"),
                           AgentAction.propose(PLATE)] + chain() + [AgentAction.final(format_final(PLATE))])
    log, outcome = run_episode(task, agent)
    first = log.events[2]
    assert first.kind == "tool_response" and first.ok is False
    assert first.payload["code"] == "DegenerateGeometry"
    assert str(outcome) == "feasible(1)"


def test_domain_errors_are_responses():
    task = make_task()
    ep = Episode(task)
    assert ep.invoke_tool("cae_solve").payload["code"] == "NoProposal"
    ep.propose(DesignState("rect_plate", [100.0, 50.0, 5.0], "Unobtainium"))
    assert ep.invoke_tool("cad_generate").ok
    assert ep.invoke_tool("cae_solve").payload["code"] == "UnknownMaterial"
    assert ep.invoke_tool("extract_results").payload["code"] == "MissingDependency"
    assert ep.invoke_tool("cae_solve", {"geometry_id": "nope"}).payload["code"] == "MissingDependency"
    assert ep.invoke_tool("cad_generate", [1, 2]).payload["code"] == "BadArguments"
    ep.propose(DesignState("rect_plate", [1e9, 50.0, 5.0], A105))
    assert ep.invoke_tool("cad_generate").payload["code"] == "InvalidParams"
    ep.propose(DesignState("no_such_part", [1.0], A105))
    assert not ep.invoke_tool("cad_generate").ok
    assert all(e.ok is False for e in ep.log.events if e.kind == "tool_response" and e.tool != "cad_generate")


def test_forced_injection():
    task = make_task(failure_prob=1.0, max_tool_calls=12)
    log, outcome = run_episode(task, GreedyAgent())
    responses = [e for e in log.events if e.kind == "tool_response"]
    assert len(responses) == 12
    assert all(not e.ok and e.payload["code"] == "InjectedFailure" for e in responses)
    assert outcome == Outcome("budget_exhausted")


def test_budget_and_closed_errors():
    ep = Episode(make_task(max_tool_calls=4))
    ep.propose(PLATE)
    for t in TOOLS:
        ep.invoke_tool(t)
    with pytest.raises(BudgetExhausted):
        ep.invoke_tool("cad_generate")
    assert ep.outcome == Outcome("budget_exhausted")
    assert ep.log.n_tool_calls == 4
    with pytest.raises(EpisodeClosed):
        ep.propose(PLATE)


def test_unknown_tool_and_bad_agents_end_as_protocol_violation():
    for agent in (
        ScriptedAgent([AgentAction.propose(PLATE), AgentAction.tool_call("rm_rf")]),
        ScriptedAgent([AgentAction.propose(PLATE)], fallback="not an action"),
        ScriptedAgent([], fallback=lambda obs: 1 / 0),
        ScriptedAgent([AgentAction("propose", design={"category": "rect_plate"})]),
    ):
        log, outcome = run_episode(make_task(), agent)
        assert outcome == Outcome("agent_stopped")
        assert log.events[-1].payload["error"] == "ProtocolViolation"


def test_early_stop_no_tool_calls_after_final():
    log, _ = run_episode(make_task(), GreedyAgent())
    i = next(e.index for e in log.events if e.kind == "final_output")
    assert i == len(log.events) - 1


def test_outcome_follows_last_record():
    # feasible at round 0 but the agent continues into an infeasible round
    task = make_task()
    worse = DesignState("rect_plate", [100.0, 50.0, 3.0], CAST)
    agent = ScriptedAgent([AgentAction.propose(PLATE)] + chain() + [AgentAction.propose(worse)] + chain()
                          + [AgentAction.final(format_final(worse))])
    _, outcome = run_episode(task, agent)
    assert outcome == Outcome("agent_stopped")


# -- determinism and files --------------------------------------------------


def test_replay_is_byte_identical(tmp_path):
    task = make_task(delta_scale=0.8, failure_prob=0.3, rng_seed=11, category="cantilever_beam",
                     params=(100.0, 10.0, 10.0), pressure=35.0)
    a, oa = run_episode(task, GreedyAgent())
    b, ob = run_episode(task, GreedyAgent())
    assert a.to_jsonl() == b.to_jsonl() and oa == ob
    other = TaskInstance.from_dict({**task.to_dict(), "rng_seed": 12})
    c, _ = run_episode(other, GreedyAgent())
    assert c.to_jsonl() != a.to_jsonl()
    path = a.write(tmp_path / "log.jsonl")
    assert TrajectoryLog.read(path).to_jsonl() == a.to_jsonl()


def test_jsonl_layout():
    log, outcome = run_episode(make_task(), GreedyAgent())
    lines = log.to_jsonl().splitlines()
    head = json.loads(lines[0])
    assert head == {"schema": "trajectory/v1", "task_id": "t", "outcome": "feasible(0)"}
    assert list(json.loads(lines[1])) == ["index", "round", "kind", "tool", "ok", "payload"]
    with pytest.raises(ValueError):
        TrajectoryLog.from_jsonl(json.dumps({"schema": "trajectory/v0", "task_id": "t"}))


def test_artifacts_written_on_export(tmp_path):
    ep = Episode(make_task(), artifact_dir=tmp_path)
    ep.propose(PLATE)
    g = ep.invoke_tool("cad_generate", {"export": True})
    s = ep.invoke_tool("cae_solve", {"geometry_id": g.payload["geometry_id"], "export": True})
    assert (tmp_path / "t.geom-0-1.mesh").exists()
    assert s.payload["file"].endswith(".res")


def test_at_most_one_final():
    log = TrajectoryLog("x")
    log.append("final_output", 0, payload={"text": "a"})
    with pytest.raises(ValueError):
        log.append("final_output", 0, payload={"text": "b"})


# -- protocol messages ------------------------------------------------------


def test_action_messages_round_trip():
    for a in (AgentAction.tool_call("cae_solve", {"geometry_id": "geom-0-1"}),
              AgentAction.propose(PLATE), AgentAction.final("done")):
        assert AgentAction.from_message(json.loads(json.dumps(a.to_message()))) == a
    for bad in ([], {"type": "dance"}, {"type": "tool_call"}, {"type": "final"},
                {"type": "propose", "design": {"category": "x"}}):
        with pytest.raises(ProtocolViolation):
            AgentAction.from_message(bad)


def test_observation_round_trip():
    ep = Episode(make_task())
    ep.propose(PLATE)
    ep.invoke_tool("cad_generate")
    obs = ep.observe("hello")
    back = Observation.from_message(json.loads(json.dumps(obs.to_message())))
    assert back == obs
    assert obs.remaining_tool_calls == 59 and obs.remaining_rounds == 14
    assert obs.task["materials"][0]["name"] == list(default_library())[0].name


def test_many_episodes_share_nothing():
    tasks = [make_task(task_id=f"t{i}", failure_prob=0.5, rng_seed=i) for i in range(3)]
    solo = [run_episode(t, GreedyAgent())[0].to_jsonl() for t in tasks]
    eps = [Episode(t) for t in tasks]
    interleaved = [run_episode(t, GreedyAgent(), episode=e)[0].to_jsonl() for t, e in zip(tasks, eps)]
    assert solo == interleaved
