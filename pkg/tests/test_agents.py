import json
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import A105, CAST, CHROME, SS304, make_task
from cadloop.agents import (
    GROW,
    SHRINK,
    ExternalAgent,
    GreedyAgent,
    LazyAgent,
    RandomAgent,
    extract_final_output,
    final_candidates,
    find_json_objects,
    format_final,
    make_agent,
)
from cadloop.environment import (
    TOOLS,
    AgentAction,
    DesignState,
    Observation,
    Outcome,
    run_episode,
)
from cadloop.errors import ProtocolViolation

TASK = make_task(task_id="g")
PLATE = DesignState("rect_plate", [100.0, 50.0, 5.0], A105)


def obs_after_chain(design, disp_ok, stress_ok, cost_ok, remaining_rounds=10, u=1.0, s=100.0, c=1.0):
    task = TASK.public_dict()
    responses = [
        {"index": 2, "tool": "cad_generate", "ok": True, "payload": {"geometry_id": "geom-0-1"}},
        {"index": 4, "tool": "cae_solve", "ok": True, "payload": {"result_id": "result-0-2"}},
        {"index": 6, "tool": "extract_results", "ok": True,
         "payload": {"u_max": u, "sigma_max": s, "disp_ok": disp_ok, "stress_ok": stress_ok}},
        {"index": 8, "tool": "compute_cost", "ok": True, "payload": {"cost": c, "cost_ok": cost_ok}},
    ]
    return Observation(None, 0, responses, remaining_rounds, 50, design.to_dict(), task)


def step(design, *ok, **kw):
    return GreedyAgent().act(obs_after_chain(design, *ok, **kw))


# -- greedy rule table ------------------------------------------------------


def test_round_zero_uses_p0_and_cheapest_material():
    a = GreedyAgent().act(Observation("hi", 0, [], 15, 60, None, TASK.public_dict()))
    assert a.kind == "propose"
    assert a.design.params == list(TASK.p0)
    assert a.design.material == A105  # lowest rho * price in the default library


def test_displacement_violated_grows_thickness():
    a = step(PLATE, False, True, True)
    assert a.kind == "propose"
    assert a.design.material == A105
    assert a.design.params == [100.0, 50.0, 5.0 * GROW]


def test_all_satisfied_emits_matching_final():
    a = step(PLATE, True, True, True)
    assert a.kind == "final"
    assert extract_final_output(a.text) == PLATE


def test_stress_violated_moves_to_next_stronger_material():
    assert step(PLATE, True, False, True).design.material == CAST
    d = DesignState("rect_plate", [100.0, 50.0, 5.0], SS304)
    assert step(d, True, False, True).design.material == "ASTM A333 Gr.6"
    d = DesignState("rect_plate", [100.0, 50.0, 5.0], CHROME)
    top = step(d, True, False, True)
    assert top.design.material == CHROME and top.design.params[2] == pytest.approx(5.0 * GROW)


def test_cost_only_prefers_cheaper_admissible_material_then_shrinks():
    d = DesignState("rect_plate", [100.0, 50.0, 5.0], CHROME)
    # plenty of slack on displacement: A105 predicted fine
    a = step(d, True, True, False, u=0.1, s=100.0, c=TASK.kappa * 1.2)
    assert a.design.material == A105 and a.design.params == d.params
    # cheapest already: shrink the width
    a = step(PLATE, True, True, False, c=TASK.kappa * 1.2)
    assert a.design.material == A105
    assert a.design.params == [100.0, 50.0 * SHRINK, 5.0]


def test_final_when_no_rounds_left():
    a = step(PLATE, False, True, True, remaining_rounds=0)
    assert a.kind == "final" and extract_final_output(a.text) == PLATE


def test_clamped_growth_ends_with_final():
    d = DesignState("rect_plate", [100.0, 50.0, 10.0], A105)
    a = step(d, False, True, True)
    assert a.kind == "final"


def test_transient_failure_is_retried_and_hard_failure_finishes():
    o = obs_after_chain(PLATE, True, True, True)
    o.last_responses[1] = {"index": 4, "tool": "cae_solve", "ok": False, "payload": {"code": "InjectedFailure"}}
    del o.last_responses[2:]
    a = GreedyAgent().act(o)
    assert a == AgentAction.tool_call("cae_solve", {"geometry_id": "geom-0-1"})
    o.last_responses[1]["payload"]["code"] = "SingularSystem"
    assert GreedyAgent().act(o).kind == "final"


def test_greedy_is_deterministic_and_stress_monotone():
    task = make_task(task_id="m", material=CHROME, category="cantilever_beam", params=(100.0, 10.0, 10.0),
                     pressure=35.0, delta_scale=3.0, kappa_scale=3.0)
    a, _ = run_episode(task, GreedyAgent())
    b, _ = run_episode(task, GreedyAgent())
    assert a.to_jsonl() == b.to_jsonl()
    lib = {m.name: m.sigma_allow for m in task.library}
    seq, stress_bad = [], True
    for e in a.events:
        if e.kind == "assistant_message" and "design" in e.payload:
            seq.append(lib[e.payload["design"]["material"]])
        if e.kind == "tool_response" and e.tool == "extract_results" and e.ok:
            if e.payload["stress_ok"]:
                break
    assert seq == sorted(seq)


# -- other baselines --------------------------------------------------------


def test_random_agent_is_seeded_and_stops():
    task = make_task(task_id="r", max_rounds=4)
    a, oa = run_episode(task, RandomAgent(3))
    b, ob = run_episode(task, RandomAgent(3))
    c, _ = run_episode(task, RandomAgent(4))
    assert a.to_jsonl() == b.to_jsonl() and oa == ob
    assert a.to_jsonl() != c.to_jsonl()
    assert a.final_text is not None
    assert a.count("assistant_message") <= 4


def test_lazy_agent_skips_tools():
    log, outcome = run_episode(TASK, LazyAgent())
    assert log.n_tool_calls == 0 and outcome == Outcome("agent_stopped")
    assert extract_final_output(log.final_text).material == CHROME


def test_make_agent():
    assert isinstance(make_agent("greedy"), GreedyAgent)
    with pytest.raises(ValueError):
        make_agent("oracle")


# -- final output extraction ------------------------------------------------

FIXTURE = (
    "Round 3 summary {not json}.\n"
    '```json\n{"category": "rect_plate", "material": "Gray Cast Iron", "parameters": [100, 50, 6]}\n```\n'
    'and a partial one {"category": "rect_plate", "parameters": [1, 2, 3]} plus {"note": 1}'
)


def test_extractor_examples():
    text = "Done.\n" + format_final(PLATE)
    assert extract_final_output(text) == PLATE
    assert extract_final_output("no braces at all") is None
    # candidate objects by hand: the fenced design (complete), the partial design
    # (no material), the note -> only the first qualifies
    assert len(find_json_objects(FIXTURE)) == 3
    got = extract_final_output(FIXTURE)
    assert got == DesignState("rect_plate", [100.0, 50.0, 6.0], CAST)
    two = format_final(PLATE) + format_final(DesignState("rect_plate", [90.0, 50.0, 5.0], A105))
    assert extract_final_output(two).params == [90.0, 50.0, 5.0]
    assert len(final_candidates(two)) == 2


@pytest.mark.parametrize("params", [[], [1, "x"], "abc", [True, 1.0], {"T": None}, [float("nan")]])
def test_extractor_rejects_bad_parameters(params):
    text = json.dumps({"category": "rect_plate", "material": A105, "parameters": params})
    assert extract_final_output(text) is None


def test_extractor_accepts_parameter_maps():
    text = json.dumps({"category": "rect_plate", "material": A105, "parameters": {"L": 100, "W": 50, "T": 5}})
    assert extract_final_output(text).params == {"L": 100.0, "W": 50.0, "T": 5.0}


@settings(max_examples=300, deadline=None)
@given(st.one_of(st.binary(max_size=200), st.text(max_size=200),
                 st.text(alphabet='{}[]":,0123456789.e-abc ', max_size=200)))
def test_extractor_is_total(data):
    extract_final_output(data)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e300, max_value=1e300),
                min_size=1, max_size=6),
       st.text(max_size=20), st.sampled_from(TOOLS), st.dictionaries(st.text(max_size=5), st.integers(), max_size=3))
def test_protocol_round_trip(params, material, tool, args):
    for a in (AgentAction.propose(DesignState("rect_plate", params, material)),
              AgentAction.tool_call(tool, args), AgentAction.final(material)):
        assert AgentAction.from_message(json.loads(json.dumps(a.to_message()))) == a


# -- external process -------------------------------------------------------


def test_external_child_matches_in_process_greedy():
    task = make_task(task_id="x", delta_scale=0.85)
    agent = ExternalAgent([sys.executable, "-m", "cadloop.agents", "greedy"], timeout=60)
    try:
        ext, oe = run_episode(task, agent)
    finally:
        agent.close()
    local, ol = run_episode(task, GreedyAgent())
    assert ext.to_jsonl() == local.to_jsonl() and oe == ol


@pytest.mark.parametrize(
    "script, fragment",
    [
        ("import time; input(); time.sleep(30)", "did not answer"),
        ("input(); print('this is not json', flush=True); input()", "malformed JSON"),
        ("input()", "closed its output"),
        ("input(); print('{\"type\": \"dance\"}', flush=True); input()", "unknown action"),
    ],
)
def test_external_misbehaving_children(script, fragment):
    agent = ExternalAgent([sys.executable, "-c", script], timeout=1.0)
    try:
        log, outcome = run_episode(make_task(task_id="bad"), agent)
    finally:
        agent.close()
    assert outcome == Outcome("agent_stopped")
    assert fragment in log.events[-1].payload["detail"]
    with pytest.raises(ProtocolViolation):
        AgentAction.from_message({"type": "dance"})
