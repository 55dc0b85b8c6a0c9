"""Episode loop: task instances, tool dispatch, event logging and budgets.

A round starts with a design proposal from the agent and is followed by
tool calls that act on that proposal. Four tools form the natural chain:

    cad_generate -> cae_solve -> extract_results -> compute_cost

Every call and every response is appended to the episode's
:class:`TrajectoryLog`. Tool failures (including injected ones) become
``ok=false`` responses carrying an error code, so the loop never crashes on
agent input.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import (
    BadArguments,
    BudgetExhausted,
    EpisodeClosed,
    InjectedFailure,
    MissingDependency,
    NoProposal,
    ProtocolViolation,
    ToolError,
)
from .fem import SimSetting, solve_linear_static, write_results
from .geometry import build_part, get_category, resolve_params, write_mesh
from .materials import Material, MaterialLibrary, default_library, lookup_material
from .postproc import FeedbackTuple, compute_cost, compute_mass, max_displacement, max_von_mises

TOOLS = ("cad_generate", "cae_solve", "extract_results", "compute_cost")
EVENT_KINDS = ("tool_call", "tool_response", "assistant_message", "final_output")

TRAJECTORY_SCHEMA = "trajectory/v1"
TASK_SCHEMA = "task/v1"
PROTOCOL_SCHEMA = "agent-protocol/v1"

DEFAULT_MAX_ROUNDS = 15
DEFAULT_MAX_TOOL_CALLS = 60


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=False)


def _jsonable(obj):
    """Round-trip through JSON, falling back to repr for foreign objects."""
    try:
        return json.loads(json.dumps(obj))
    except (TypeError, ValueError):
        return repr(obj)


# ---------------------------------------------------------------------------
# Task and design
# ---------------------------------------------------------------------------


@dataclass
class DesignState:
    """One design x_t = (category, parameters, material).

    Parameters may be a schema-ordered list or a name->value map. Nothing is
    validated here; invalid designs must be expressible so tools can reject
    them.
    """

    category: str
    params: Any
    material: str

    def to_dict(self) -> dict:
        params = self.params
        if isinstance(params, Mapping):
            params = {str(k): v for k, v in params.items()}
        elif isinstance(params, (list, tuple, np.ndarray)):
            params = list(params)
        return {"category": self.category, "material": self.material, "parameters": _jsonable(params)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DesignState":
        return cls(category=d["category"], params=d["parameters"], material=d["material"])

    def param_list(self) -> list[float]:
        return resolve_params(get_category(self.category), self.params)


@dataclass
class TaskInstance:
    """Everything an episode needs: the part, the load case and the targets.

    ``m0`` is the material of the seed design from which the thresholds were
    derived; ``eps=None`` means the mesh-relative default face tolerance.
    """

    id: str
    category: str
    p0: tuple[float, ...]
    setting: SimSetting
    delta: float
    kappa: float
    library: MaterialLibrary = field(default_factory=default_library)
    m0: str | None = None
    max_rounds: int = DEFAULT_MAX_ROUNDS
    max_tool_calls: int = DEFAULT_MAX_TOOL_CALLS
    eps: float | None = None
    failure_prob: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        self.p0 = tuple(float(v) for v in self.p0)
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ValueError("delta must be positive")
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise ValueError("kappa must be positive")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.max_tool_calls < 4:
            raise ValueError("max_tool_calls must be at least 4")
        if not 0.0 <= self.failure_prob <= 1.0:
            raise ValueError("failure_prob must lie in [0, 1]")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")
        get_category(self.category)

    def initial_design(self) -> DesignState:
        material = self.m0 if self.m0 is not None else self.library.by_volume_cost()[0].name
        return DesignState(self.category, list(self.p0), material)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "p0": list(self.p0),
            "m0": self.m0,
            "setting": self.setting.to_dict(),
            "delta": self.delta,
            "kappa": self.kappa,
            "library": self.library.to_list(),
            "max_rounds": self.max_rounds,
            "max_tool_calls": self.max_tool_calls,
            "eps": self.eps,
            "failure_prob": self.failure_prob,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskInstance":
        return cls(
            id=str(d["id"]),
            category=d["category"],
            p0=tuple(d["p0"]),
            m0=d.get("m0"),
            setting=SimSetting.from_dict(d["setting"]),
            delta=float(d["delta"]),
            kappa=float(d["kappa"]),
            library=MaterialLibrary.from_list(d["library"]) if "library" in d else default_library(),
            max_rounds=int(d.get("max_rounds", DEFAULT_MAX_ROUNDS)),
            max_tool_calls=int(d.get("max_tool_calls", DEFAULT_MAX_TOOL_CALLS)),
            eps=d.get("eps"),
            failure_prob=float(d.get("failure_prob", 0.0)),
            rng_seed=int(d.get("rng_seed", 0)),
        )

    def public_dict(self) -> dict:
        """The part of the task an agent is allowed to see."""
        cat = get_category(self.category)
        return {
            "id": self.id,
            "category": self.category,
            "schema": cat.schema(),
            "p0": list(self.p0),
            "m0": self.m0,
            "delta": self.delta,
            "kappa": self.kappa,
            "pressure": self.setting.pressure,
            "materials": self.library.to_list(),
            "max_rounds": self.max_rounds,
            "max_tool_calls": self.max_tool_calls,
        }


def check_feasibility(feedback: FeedbackTuple, task: TaskInstance, material: Material):
    """(disp_ok, stress_ok, cost_ok); thresholds are inclusive."""
    return (
        feedback.u_max <= task.delta,
        feedback.sigma_max <= material.sigma_allow,
        feedback.cost <= task.kappa,
    )


# ---------------------------------------------------------------------------
# Events and logs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolEvent:
    index: int
    round: int
    kind: str
    tool: str | None = None
    ok: bool | None = None
    payload: Any = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "round": self.round,
            "kind": self.kind,
            "tool": self.tool,
            "ok": self.ok,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ToolEvent":
        return cls(int(d["index"]), int(d["round"]), d["kind"], d.get("tool"), d.get("ok"), d.get("payload"))


@dataclass(frozen=True)
class Outcome:
    kind: str  # feasible | budget_exhausted | agent_stopped
    round: int | None = None

    def __str__(self) -> str:
        return f"feasible({self.round})" if self.kind == "feasible" else self.kind

    @classmethod
    def parse(cls, text: str) -> "Outcome":
        if text.startswith("feasible(") and text.endswith(")"):
            return cls("feasible", int(text[9:-1]))
        if text in ("budget_exhausted", "agent_stopped"):
            return cls(text)
        raise ValueError(f"bad outcome {text!r}")


@dataclass
class TrajectoryLog:
    task_id: str
    events: list[ToolEvent] = field(default_factory=list)
    outcome: str | None = None

    @property
    def final_text(self) -> str | None:
        for ev in reversed(self.events):
            if ev.kind == "final_output":
                payload = ev.payload if isinstance(ev.payload, Mapping) else {}
                text = payload.get("text")
                return text if isinstance(text, str) else None
        return None

    def append(self, kind: str, round: int, tool=None, ok=None, payload=None) -> ToolEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        if kind == "final_output" and any(e.kind == "final_output" for e in self.events):
            raise ValueError("a log holds at most one final output")
        ev = ToolEvent(len(self.events), round, kind, tool, ok, payload)
        self.events.append(ev)
        return ev

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    @property
    def n_tool_calls(self) -> int:
        return self.count("tool_call")

    def to_jsonl(self) -> str:
        head = {"schema": TRAJECTORY_SCHEMA, "task_id": self.task_id, "outcome": self.outcome}
        lines = [_dumps(head)] + [_dumps(e.to_dict()) for e in self.events]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrajectoryLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty trajectory file")
        head = json.loads(lines[0])
        if head.get("schema") != TRAJECTORY_SCHEMA:
            raise ValueError(f"unsupported trajectory schema {head.get('schema')!r}")
        events = [ToolEvent.from_dict(json.loads(ln)) for ln in lines[1:]]
        for i, ev in enumerate(events):
            if ev.index != i:
                raise ValueError("event indices must be 0, 1, 2, ...")
        return cls(head["task_id"], events, head.get("outcome"))

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "TrajectoryLog":
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Agent protocol messages
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    prompt: str | None
    round: int
    last_responses: list[dict]
    remaining_rounds: int
    remaining_tool_calls: int
    design: dict | None = None
    task: dict | None = None

    def to_message(self) -> dict:
        return {
            "schema": PROTOCOL_SCHEMA,
            "type": "observation",
            "prompt": self.prompt,
            "round": self.round,
            "last_responses": self.last_responses,
            "remaining_rounds": self.remaining_rounds,
            "remaining_tool_calls": self.remaining_tool_calls,
            "design": self.design,
            "task": self.task,
        }

    @classmethod
    def from_message(cls, msg: Mapping) -> "Observation":
        if msg.get("type") != "observation":
            raise ProtocolViolation("message is not an observation")
        return cls(
            prompt=msg.get("prompt"),
            round=int(msg["round"]),
            last_responses=list(msg.get("last_responses") or []),
            remaining_rounds=int(msg["remaining_rounds"]),
            remaining_tool_calls=int(msg["remaining_tool_calls"]),
            design=msg.get("design"),
            task=msg.get("task"),
        )


@dataclass
class AgentAction:
    """Exactly one of tool_call(tool, arguments), propose(design) or final(text)."""

    kind: str
    tool: str | None = None
    arguments: dict | None = None
    design: DesignState | None = None
    text: str | None = None

    @classmethod
    def tool_call(cls, tool: str, arguments: dict | None = None) -> "AgentAction":
        return cls("tool_call", tool=tool, arguments=dict(arguments or {}))

    @classmethod
    def propose(cls, design: DesignState) -> "AgentAction":
        return cls("propose", design=design)

    @classmethod
    def final(cls, text: str) -> "AgentAction":
        return cls("final", text=text)

    def to_message(self) -> dict:
        msg = {"schema": PROTOCOL_SCHEMA, "type": self.kind}
        if self.kind == "tool_call":
            msg.update(tool=self.tool, arguments=self.arguments or {})
        elif self.kind == "propose":
            msg["design"] = self.design.to_dict()
        else:
            msg["text"] = self.text
        return msg

    @classmethod
    def from_message(cls, msg) -> "AgentAction":
        if not isinstance(msg, Mapping):
            raise ProtocolViolation("action must be an object")
        kind = msg.get("type")
        try:
            if kind == "tool_call":
                args = msg.get("arguments", {})
                if not isinstance(msg.get("tool"), str) or not isinstance(args, Mapping):
                    raise ProtocolViolation("tool_call needs a tool name and an arguments object")
                return cls.tool_call(msg["tool"], dict(args))
            if kind == "propose":
                d = msg["design"]
                if not isinstance(d, Mapping) or not isinstance(d.get("category"), str) or not isinstance(d.get("material"), str):
                    raise ProtocolViolation("propose needs a design with category, material, parameters")
                return cls.propose(DesignState.from_dict(d))
            if kind == "final":
                if not isinstance(msg.get("text"), str):
                    raise ProtocolViolation("final needs a text field")
                return cls.final(msg["text"])
        except KeyError as exc:
            raise ProtocolViolation(f"missing field {exc}") from None
        raise ProtocolViolation(f"unknown action type {kind!r}")


# ---------------------------------------------------------------------------
# Episode
# ---------------------------------------------------------------------------


@dataclass
class RoundRecord:
    """Feedback the environment itself observed for one round."""

    round: int
    design: DesignState
    feedback: FeedbackTuple
    completion_index: int
    feasible: bool


class Episode:
    """A live episode handle; owns its log, budgets and random generator."""

    def __init__(self, task: TaskInstance, artifact_dir: str | Path | None = None):
        self.task = task
        self.log = TrajectoryLog(task.id)
        self.artifact_dir = Path(artifact_dir) if artifact_dir is not None else None
        self.rounds_used = 0
        self.tool_calls = 0
        self.design: DesignState | None = None
        self.outcome: Outcome | None = None
        self.records: list[RoundRecord] = []
        self._rng = np.random.default_rng(task.rng_seed)
        self._proposal_index = -1
        self._reset_round()

    def _reset_round(self):
        self._meshes: dict[str, Any] = {}
        self._fields: dict[str, tuple[Any, Material]] = {}
        self._extract: tuple[int, float, float] | None = None
        self._cost: tuple[int, float] | None = None
        self._serial = 0

    # -- state ------------------------------------------------------------

    @property
    def round(self) -> int:
        return max(self.rounds_used - 1, 0)

    @property
    def closed(self) -> bool:
        return self.outcome is not None

    @property
    def remaining_rounds(self) -> int:
        return self.task.max_rounds - self.rounds_used

    @property
    def remaining_tool_calls(self) -> int:
        return self.task.max_tool_calls - self.tool_calls

    def _require_open(self):
        if self.closed:
            raise EpisodeClosed(f"episode {self.task.id} already ended ({self.outcome})")

    def _close(self, outcome: Outcome):
        self.outcome = outcome
        self.log.outcome = str(outcome)

    def observe(self, prompt: str | None = None) -> Observation:
        responses = [
            {"index": e.index, "tool": e.tool, "ok": e.ok, "payload": e.payload}
            for e in self.log.events[self._proposal_index + 1 :]
            if e.kind == "tool_response"
        ]
        return Observation(
            prompt=prompt,
            round=self.round,
            last_responses=responses if self.design is not None else [],
            remaining_rounds=max(self.remaining_rounds, 0),
            remaining_tool_calls=max(self.remaining_tool_calls, 0),
            design=self.design.to_dict() if self.design is not None else None,
            task=self.task.public_dict(),
        )

    # -- agent-facing operations ------------------------------------------

    def propose(self, design: DesignState) -> bool:
        """Start a new round; past the round cap the episode ends instead."""
        self._require_open()
        if self.rounds_used >= self.task.max_rounds:
            self._close(Outcome("agent_stopped"))
            return False
        self.rounds_used += 1
        self.design = design
        self._reset_round()
        ev = self.log.append(
            "assistant_message", self.round, payload={"action": "propose", "design": design.to_dict()}
        )
        self._proposal_index = ev.index
        return True

    def invoke_tool(self, tool: str, arguments=None) -> ToolEvent:
        """Run one tool against the current proposal and log call and response."""
        self._require_open()
        if tool not in TOOLS:
            raise ProtocolViolation(f"unknown tool {tool!r}")
        if self.tool_calls >= self.task.max_tool_calls:
            self._close(Outcome("budget_exhausted"))
            raise BudgetExhausted(f"tool budget of {self.task.max_tool_calls} calls used up")
        self.tool_calls += 1
        arguments = {} if arguments is None else arguments
        self.log.append("tool_call", self.round, tool, payload={"arguments": _jsonable(arguments)})
        draw = self._rng.random()  # one draw per call keeps streams aligned
        try:
            if draw < self.task.failure_prob:
                raise InjectedFailure(f"{tool} failed (injected)")
            if not isinstance(arguments, Mapping):
                raise BadArguments("arguments must be an object")
            if self.design is None:
                raise NoProposal("no design has been proposed yet")
            payload = getattr(self, "_tool_" + tool)(arguments)
            ok = True
        except ToolError as exc:
            ok, payload = False, {"code": exc.code, "message": exc.message}
        except Exception as exc:  # never let agent input crash the loop
            ok, payload = False, {"code": "InternalError", "message": f"{type(exc).__name__}: {exc}"}
        ev = self.log.append("tool_response", self.round, tool, ok, _jsonable(payload))
        if ok and tool == "extract_results":
            self._extract = (ev.index, payload["u_max"], payload["sigma_max"])
            self._update_record()
        elif ok and tool == "compute_cost":
            self._cost = (ev.index, payload["cost"])
            self._update_record()
        return ev

    def finish(self, text: str):
        """Record the final output and end the episode."""
        self._require_open()
        self.log.append("final_output", self.round, payload={"text": text})
        last = self.records[-1] if self.records else None
        if last is not None and last.feasible:
            self._close(Outcome("feasible", last.round))
        else:
            self._close(Outcome("agent_stopped"))

    def abort(self, detail: str):
        """End the episode after a protocol violation by the agent."""
        self._require_open()
        self.log.append(
            "assistant_message", self.round, payload={"error": "ProtocolViolation", "detail": detail}
        )
        self._close(Outcome("agent_stopped"))

    def apply(self, action: AgentAction):
        if action.kind == "tool_call":
            self.invoke_tool(action.tool, action.arguments)
        elif action.kind == "propose":
            if not isinstance(action.design, DesignState):
                raise ProtocolViolation("propose needs a DesignState")
            self.propose(action.design)
        elif action.kind == "final":
            if not isinstance(action.text, str):
                raise ProtocolViolation("final needs text")
            self.finish(action.text)
        else:
            raise ProtocolViolation(f"unknown action kind {action.kind!r}")

    # -- tools --------------------------------------------------------------

    def _material(self) -> Material:
        return lookup_material(self.task.library, self.design.material)

    def _next_id(self, prefix: str) -> str:
        self._serial += 1
        return f"{prefix}-{self.round}-{self._serial}"

    def _pick(self, store: dict, arguments: Mapping, key: str, what: str):
        ident = arguments.get(key)
        if ident is None:
            if not store:
                raise MissingDependency(f"no {what} produced in this round")
            ident = next(reversed(store))
        if ident not in store:
            raise MissingDependency(f"unknown {key} {ident!r} for this round")
        return ident, store[ident]

    def _export_path(self, name: str) -> Path | None:
        if self.artifact_dir is None:
            return None
        self.artifact_dir.mkdir(parents=True, exist_ok=True)
        return self.artifact_dir / f"{self.task.id}.{name}"

    def _tool_cad_generate(self, arguments):
        d = self.design
        mesh = build_part(d.category, d.params, self.task.setting.mesh_resolution)
        gid = self._next_id("geom")
        self._meshes[gid] = mesh
        path = self._export_path(f"{gid}.mesh") if arguments.get("export") else None
        if path is not None:
            write_mesh(mesh, path)
        return {
            "geometry_id": gid,
            "category": mesh.category,
            "params": list(mesh.params),
            "volume_mm3": mesh.volume_mm3,
            "n_nodes": mesh.n_nodes,
            "n_elements": mesh.n_elements,
            "anchors": [{"label": a.label, "face": a.face, "point": list(a.point)} for a in mesh.anchors],
            "file": str(path) if path is not None else None,
        }

    def _tool_cae_solve(self, arguments):
        gid, mesh = self._pick(self._meshes, arguments, "geometry_id", "geometry")
        material = self._material()
        fld = solve_linear_static(mesh, material, self.task.setting, self.task.eps)
        rid = self._next_id("result")
        self._fields[rid] = (fld, material)
        path = self._export_path(f"{rid}.res") if arguments.get("export") else None
        if path is not None:
            write_results(fld, path)
        return {
            "result_id": rid,
            "geometry_id": gid,
            "material": material.name,
            "iterations": fld.iterations,
            "residual": fld.residual,
            "log": list(fld.log),
            "file": str(path) if path is not None else None,
        }

    def _tool_extract_results(self, arguments):
        rid, (fld, material) = self._pick(self._fields, arguments, "result_id", "result")
        u, s = max_displacement(fld), max_von_mises(fld)
        return {
            "result_id": rid,
            "u_max": u,
            "sigma_max": s,
            "sigma_allow": material.sigma_allow,
            "delta": self.task.delta,
            "disp_ok": u <= self.task.delta,
            "stress_ok": s <= material.sigma_allow,
        }

    def _tool_compute_cost(self, arguments):
        gid, mesh = self._pick(self._meshes, arguments, "geometry_id", "geometry")
        material = self._material()
        cost = compute_cost(mesh.volume_mm3, material)
        out = {
            "geometry_id": gid,
            "material": material.name,
            "volume_mm3": mesh.volume_mm3,
            "mass_kg": compute_mass(mesh.volume_mm3, material),
            "cost": cost,
            "kappa": self.task.kappa,
            "cost_ok": cost <= self.task.kappa,
        }
        if self._extract is not None:
            _, u, s = self._extract
            out["feasible"] = bool(u <= self.task.delta and s <= material.sigma_allow and cost <= self.task.kappa)
        return out

    def _update_record(self):
        if self._extract is None or self._cost is None:
            return
        (i_e, u, s), (i_c, c) = self._extract, self._cost
        fb = FeedbackTuple(u, s, c)
        material = self._material()
        ok = check_feasibility(fb, self.task, material)
        rec = RoundRecord(self.round, self.design, fb, max(i_e, i_c), all(ok))
        if self.records and self.records[-1].round == self.round:
            self.records[-1] = rec
        else:
            self.records.append(rec)


def run_episode(
    task: TaskInstance,
    agent,
    prompt: str | None = None,
    artifact_dir: str | Path | None = None,
    episode: Episode | None = None,
) -> tuple[TrajectoryLog, Outcome]:
    """Drive ``agent`` (anything with ``act(observation) -> AgentAction``) to the end.

    The agent's optional ``reset(task)`` is called first. Exceptions raised
    by the agent, or values that are not actions, count as protocol
    violations and end the episode as agent_stopped.
    """
    ep = episode if episode is not None else Episode(task, artifact_dir)
    reset = getattr(agent, "reset", None)
    if callable(reset):
        reset(task)
    first = True
    while not ep.closed:
        obs = ep.observe(prompt if first else None)
        first = False
        try:
            action = agent.act(obs)
            if not isinstance(action, AgentAction):
                raise ProtocolViolation(f"agent returned {type(action).__name__}, not an action")
            ep.apply(action)
        except (BudgetExhausted, EpisodeClosed):
            break
        except ProtocolViolation as exc:
            if not ep.closed:
                ep.abort(str(exc))
        except Exception as exc:
            if not ep.closed:
                ep.abort(f"agent error: {type(exc).__name__}: {exc}")
    return ep.log, ep.outcome
