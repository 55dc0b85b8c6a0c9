"""Rewards computed from trajectory logs.

:func:`score` composes three terms purely from the recorded events, with no
re-simulation:

* ``r_cons``: piecewise value of how many constraints the last complete
  (u_max, sigma_max, cost) triple satisfies;
* ``r_stop``: a penalty on tool events issued after the first fully
  feasible triple;
* ``r_fmt``: a bonus when the final output holds exactly one design object
  matching the design behind the last triple.

:func:`score_by_reverification` is the alternative scorer that ignores the
log and re-runs the toolchain once on the final design.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

from .agents import extract_final_output, final_candidates
from .environment import DesignState, TaskInstance, TrajectoryLog, check_feasibility
from .errors import ToolError
from .geometry import get_category, resolve_params
from .materials import lookup_material
from .postproc import FeedbackTuple

CONS_TABLE = {0: 0.0, 1: 0.20, 2: 0.50, 3: 1.00}
STOP_LAMBDA = 0.02
STOP_MAX = 0.10
FORMAT_BONUS = 0.10
PARAM_RTOL = 1e-9
TOOL_EVENT_KINDS = ("tool_call", "tool_response")

REWARD_SCHEMA = "reward/v1"

# Reward terms are sums of a few decimal constants; rounding to this many
# places removes binary representation noise such as 1.0 - 0.1 + 0.1.
_DIGITS = 10


@dataclass(frozen=True)
class Triple:
    feedback: FeedbackTuple
    design: DesignState
    completion_index: int
    round: int


@dataclass(frozen=True)
class RewardBreakdown:
    r_cons: float
    r_stop: float
    r_fmt: float
    total: float
    n_satisfied: int
    t_feas: int | None
    k_after: int

    def to_dict(self) -> dict:
        return asdict(self)


def parse_triples(log: TrajectoryLog) -> list[Triple]:
    """One triple per round in which both extract_results and compute_cost succeeded.

    The latest successful response of each kind in a round is used; the
    design is the round's proposal.
    """
    triples = []
    design = None
    cur_round = None
    extract = cost = None

    def flush():
        if design is not None and extract is not None and cost is not None:
            (i_e, u, s), (i_c, c) = extract, cost
            try:
                fb = FeedbackTuple(float(u), float(s), float(c))
            except (TypeError, ValueError):
                return
            triples.append(Triple(fb, design, max(i_e, i_c), cur_round))

    for ev in log.events:
        payload = ev.payload if isinstance(ev.payload, dict) else {}
        if ev.kind == "assistant_message" and payload.get("action") == "propose":
            flush()
            try:
                design = DesignState.from_dict(payload["design"])
            except (KeyError, TypeError):
                design = None
            cur_round, extract, cost = ev.round, None, None
        elif ev.kind == "tool_response" and ev.ok and ev.round == cur_round:
            if ev.tool == "extract_results" and "u_max" in payload and "sigma_max" in payload:
                extract = (ev.index, payload["u_max"], payload["sigma_max"])
            elif ev.tool == "compute_cost" and "cost" in payload:
                cost = (ev.index, payload["cost"])
    flush()
    return triples


def satisfied(triple: Triple, task: TaskInstance):
    try:
        material = lookup_material(task.library, triple.design.material)
    except ToolError:
        return (triple.feedback.u_max <= task.delta, False, triple.feedback.cost <= task.kappa)
    return check_feasibility(triple.feedback, task, material)


def constraint_reward(triples: list[Triple], task: TaskInstance) -> tuple[float, int]:
    if not triples:
        return 0.0, 0
    n = sum(bool(x) for x in satisfied(triples[-1], task))
    return CONS_TABLE[n], n


def stop_penalty(log: TrajectoryLog, task: TaskInstance, triples: list[Triple] | None = None):
    """(r_stop, t_feas, K) with K the tool calls and responses after t_feas."""
    if triples is None:
        triples = parse_triples(log)
    t_feas = next((t.completion_index for t in triples if all(satisfied(t, task))), None)
    if t_feas is None:
        return 0.0, None, 0
    k = sum(1 for e in log.events if e.kind in TOOL_EVENT_KINDS and e.index > t_feas)
    return round(-min(STOP_LAMBDA * k, STOP_MAX), _DIGITS) + 0.0, t_feas, k  # + 0.0 turns -0.0 into 0.0


def _same_params(category: str, a, b) -> bool:
    try:
        cat = get_category(category)
        va, vb = resolve_params(cat, a), resolve_params(cat, b)
    except (ToolError, TypeError, ValueError):
        return False
    for x, y in zip(va, vb):
        if not (math.isfinite(x) and math.isfinite(y)):
            return False
        if abs(x - y) > PARAM_RTOL * max(abs(x), abs(y)):
            return False
    return True


def designs_match(final: DesignState, executed: DesignState) -> bool:
    return (
        final.category == executed.category
        and final.material.strip() == executed.material.strip()
        and _same_params(executed.category, final.params, executed.params)
    )


def format_reward(log: TrajectoryLog, triples: list[Triple] | None = None) -> float:
    text = log.final_text
    if text is None:
        return 0.0
    cands = final_candidates(text)
    if len(cands) != 1:
        return 0.0
    if triples is None:
        triples = parse_triples(log)
    if not triples:
        return 0.0
    return FORMAT_BONUS if designs_match(cands[0], triples[-1].design) else 0.0


def score(log: TrajectoryLog, task: TaskInstance) -> RewardBreakdown:
    """Rollout-log reward; reads the log only and never runs a tool."""
    triples = parse_triples(log)
    r_cons, n = constraint_reward(triples, task)
    r_stop, t_feas, k = stop_penalty(log, task, triples)
    r_fmt = format_reward(log, triples)
    total = round(r_cons + r_stop + r_fmt, _DIGITS)
    return RewardBreakdown(r_cons, r_stop, r_fmt, total, n, t_feas, k)


def score_by_reverification(log: TrajectoryLog, task: TaskInstance, toolchain) -> float:
    """Re-run the chain once on the final design and map the result through the piecewise table."""
    final = extract_final_output(log.final_text) if log.final_text is not None else None
    if final is None or final.category != task.category:
        return 0.0
    try:
        material = lookup_material(task.library, final.material)
        fb = toolchain.evaluate(task.category, final.params, material, task.setting, eps=task.eps)
    except ToolError:
        return 0.0
    return CONS_TABLE[sum(bool(x) for x in check_feasibility(fb, task, material))]


def reward_record(task_id: str, breakdown: RewardBreakdown | None = None, reverify: float | None = None) -> str:
    rec = {"schema": REWARD_SCHEMA, "task_id": task_id}
    if breakdown is not None:
        rec.update(mode="rollout", **breakdown.to_dict())
    if reverify is not None:
        rec.update(mode="reverify", total=reverify)
    return json.dumps(rec)
