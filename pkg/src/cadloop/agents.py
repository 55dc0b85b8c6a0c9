"""Pluggable policies and the final-output extractor.

Agents expose ``act(observation) -> AgentAction`` and an optional
``reset(task)``. The built-in baselines are deterministic given their seed:

* :class:`GreedyAgent` applies a fixed rule table to the last round's
  feedback.
* :class:`RandomAgent` samples designs uniformly within bounds.
* :class:`LazyAgent` skips the tools and guesses a final design.
* :class:`ExternalAgent` talks to a child process over newline-delimited
  JSON on stdin/stdout.

Running ``python -m cadloop.agents greedy`` serves a built-in agent over the
same wire protocol, which is handy for testing external transports.
"""

from __future__ import annotations

import argparse
import json
import math
import queue
import shlex
import subprocess
import sys
import threading
import zlib
from typing import Iterable, Mapping, Sequence

import numpy as np

from .environment import TOOLS, AgentAction, DesignState, Observation
from .errors import ProtocolViolation, ToolError
from .geometry import get_category, validate_params

# Documented rule constants of the greedy baseline.
GROW = 1.15
SHRINK = 0.92

# Responses with these codes are worth retrying with the same call.
TRANSIENT_CODES = frozenset({"InjectedFailure", "NonConvergence", "InternalError"})

EXTERNAL_TIMEOUT_S = 120.0
FINAL_KEYS = ("category", "material", "parameters")


# ---------------------------------------------------------------------------
# Final output parsing
# ---------------------------------------------------------------------------


def find_json_objects(text) -> list[dict]:
    """Top-level JSON objects embedded anywhere in ``text`` (fenced or bare)."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    if not isinstance(text, str):
        return []
    decoder = json.JSONDecoder()
    found = []
    pos = text.find("{")
    while pos != -1:
        try:
            obj, end = decoder.raw_decode(text, pos)
        except (ValueError, RecursionError):
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            found.append(obj)
        pos = text.find("{", end)
    return found


def _numeric(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def design_from_object(obj) -> DesignState | None:
    """A DesignState if ``obj`` has the final-output keys with sane types."""
    if not isinstance(obj, Mapping) or not all(k in obj for k in FINAL_KEYS):
        return None
    category, material, params = obj["category"], obj["material"], obj["parameters"]
    if not isinstance(category, str) or not isinstance(material, str):
        return None
    if isinstance(params, Mapping):
        if not params or not all(isinstance(k, str) and _numeric(v) for k, v in params.items()):
            return None
        params = {k: float(v) for k, v in params.items()}
    elif isinstance(params, list):
        if not params or not all(_numeric(v) for v in params):
            return None
        params = [float(v) for v in params]
    else:
        return None
    return DesignState(category, params, material)


def final_candidates(text) -> list[DesignState]:
    out = []
    for obj in find_json_objects(text):
        d = design_from_object(obj)
        if d is not None:
            out.append(d)
    return out


def extract_final_output(text) -> DesignState | None:
    """The last complete final-design object in ``text``; None when absent.

    Never raises, whatever the input.
    """
    try:
        cands = final_candidates(text)
    except Exception:
        return None
    return cands[-1] if cands else None


def format_final(design: DesignState) -> str:
    body = json.dumps(design.to_dict(), ensure_ascii=False)
    return f"Final design:\n```json\n{body}\n```"


# ---------------------------------------------------------------------------
# Helpers shared by the baselines
# ---------------------------------------------------------------------------


def _round_view(obs: Observation) -> dict:
    """Latest response per tool in the current round."""
    latest = {}
    for r in obs.last_responses:
        latest[r["tool"]] = r
    return latest


def _next_tool(latest: dict):
    """(tool to call next, failed response or None); (None, None) when the chain is done."""
    for tool in TOOLS:
        r = latest.get(tool)
        if r is None:
            return tool, None
        if not r["ok"]:
            return tool, r
    return None, None


def _chain_args(tool: str, latest: dict) -> dict:
    if tool == "cae_solve":
        return {"geometry_id": latest["cad_generate"]["payload"]["geometry_id"]}
    if tool == "extract_results":
        return {"result_id": latest["cae_solve"]["payload"]["result_id"]}
    if tool == "compute_cost":
        return {"geometry_id": latest["cad_generate"]["payload"]["geometry_id"]}
    return {}


def _materials(obs: Observation) -> list[dict]:
    return list(obs.task["materials"])


def _cheapest(materials: Sequence[dict]) -> dict:
    return min(materials, key=lambda m: m["rho"] * m["price"])


class _Agent:
    name = "agent"

    def reset(self, task=None):
        pass

    def act(self, obs: Observation) -> AgentAction:  # pragma: no cover - interface
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Greedy
# ---------------------------------------------------------------------------


class GreedyAgent(_Agent):
    """Rule-table baseline.

    Round 0 proposes the initial parameters with the cheapest material.
    After each full chain:

    * stress violated -> next material up in allowable stress;
    * displacement violated -> stiffness parameters x1.15 (clamped);
    * only cost violated -> cheapest material predicted to stay admissible,
      otherwise bulk parameters x0.92;
    * all satisfied, or no rounds left -> final output of the executed design.

    Failed calls with transient codes are retried; any other tool error
    ends the episode with a final output of the last executed design.
    """

    name = "greedy"

    def __init__(self):
        self.reset()

    def reset(self, task=None):
        self.last_complete: DesignState | None = None

    def act(self, obs: Observation) -> AgentAction:
        if obs.design is None:
            p0 = list(obs.task["p0"])
            return AgentAction.propose(DesignState(obs.task["category"], p0, _cheapest(_materials(obs))["name"]))
        design = DesignState.from_dict(obs.design)
        latest = _round_view(obs)
        tool, failed = _next_tool(latest)
        if tool is not None:
            if failed is None or failed["payload"].get("code") in TRANSIENT_CODES:
                return AgentAction.tool_call(tool, _chain_args(tool, latest))
            return AgentAction.final(format_final(self.last_complete or design))
        self.last_complete = design
        extract = latest["extract_results"]["payload"]
        cost = latest["compute_cost"]["payload"]
        ok = (extract["disp_ok"], extract["stress_ok"], cost["cost_ok"])
        if all(ok) or obs.remaining_rounds <= 0:
            return AgentAction.final(format_final(design))
        nxt = self.next_design(design, ok, extract, cost, obs)
        if nxt is None:
            return AgentAction.final(format_final(design))
        return AgentAction.propose(nxt)

    def next_design(self, design, ok, extract, cost, obs) -> DesignState | None:
        disp_ok, stress_ok, cost_ok = ok
        cat = get_category(design.category)
        params = list(design.param_list())
        mats = _materials(obs)
        by_name = {m["name"]: m for m in mats}
        current = by_name[design.material]
        material = design.material
        changed = False
        if not stress_ok:
            stronger = sorted(
                (m for m in mats if m["sigma_allow"] > current["sigma_allow"]), key=lambda m: m["sigma_allow"]
            )
            if stronger:
                material = stronger[0]["name"]
                changed = True
        if not disp_ok or (not stress_ok and not changed):
            grown = self._scale(cat, params, cat.stiffness_params, GROW)
            if grown is not None:
                params, changed = grown, True
        elif stress_ok and not cost_ok:
            cheaper = self._cheaper_material(current, mats, extract, cost, obs)
            if cheaper is not None:
                material, changed = cheaper, True
            else:
                shrunk = self._scale(cat, params, cat.bulk_params, SHRINK)
                if shrunk is not None:
                    params, changed = shrunk, True
        if not changed:
            return None
        return DesignState(design.category, params, material)

    @staticmethod
    def _scale(cat, params, names, factor) -> list[float] | None:
        """Scale the named parameters, dropping any that would break validity."""
        idx = [cat.param_names.index(n) for n in names]
        for subset in [idx] + [[i] for i in idx]:
            cand = list(params)
            for i in subset:
                cand[i] = float(params[i] * factor)
            cand = cat.clamp(cand)
            if cand == list(params):
                continue
            try:
                validate_params(cat, cand)
            except ToolError:
                continue
            return cand
        return None

    @staticmethod
    def _cheaper_material(current, mats, extract, cost, obs) -> str | None:
        """Cheapest material predicted to satisfy all three constraints.

        Displacement scales as 1/E and cost with rho*price; stress is
        taken as unchanged.
        """
        delta, kappa = obs.task["delta"], obs.task["kappa"]
        best = None
        for m in sorted(mats, key=lambda m: m["rho"] * m["price"]):
            if m["rho"] * m["price"] >= current["rho"] * current["price"]:
                break
            u = extract["u_max"] * current["E"] / m["E"]
            c = cost["cost"] * (m["rho"] * m["price"]) / (current["rho"] * current["price"])
            if u <= delta and extract["sigma_max"] <= m["sigma_allow"] and c <= kappa:
                best = m["name"]
                break
        return best


# ---------------------------------------------------------------------------
# Random, lazy and scripted
# ---------------------------------------------------------------------------


def _agent_seed(seed: int, task_id: str) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(task_id.encode())]).generate_state(1)[0])


class RandomAgent(_Agent):
    """Uniform draws within bounds and a random material each round."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = None
        self.last_complete = None

    def reset(self, task=None):
        self.rng = None
        self.last_complete = None

    def _draw(self, obs: Observation) -> DesignState:
        cat = get_category(obs.task["category"])
        u = self.rng.random(len(cat.params))
        params = [float(lo + (hi - lo) * t) for lo, hi, t in zip(cat.lower, cat.upper, u)]
        mats = _materials(obs)
        material = mats[int(self.rng.integers(len(mats)))]["name"]
        return DesignState(cat.id, params, material)

    def act(self, obs: Observation) -> AgentAction:
        if self.rng is None:
            self.rng = np.random.default_rng(_agent_seed(self.seed, obs.task["id"]))
        if obs.design is None:
            return AgentAction.propose(self._draw(obs))
        design = DesignState.from_dict(obs.design)
        latest = _round_view(obs)
        tool, failed = _next_tool(latest)
        if tool is not None and failed is None:
            return AgentAction.tool_call(tool, _chain_args(tool, latest))
        if tool is None:
            self.last_complete = design
            ok = (
                latest["extract_results"]["payload"]["disp_ok"]
                and latest["extract_results"]["payload"]["stress_ok"]
                and latest["compute_cost"]["payload"]["cost_ok"]
            )
            if ok:
                return AgentAction.final(format_final(design))
        if obs.remaining_rounds <= 0 or obs.remaining_tool_calls < len(TOOLS):
            return AgentAction.final(format_final(self.last_complete or design))
        return AgentAction.propose(self._draw(obs))


class LazyAgent(_Agent):
    """Skips every tool and guesses: initial parameters with the strongest material."""

    name = "lazy"

    def act(self, obs: Observation) -> AgentAction:
        mats = _materials(obs)
        strongest = max(mats, key=lambda m: m["sigma_allow"])["name"]
        guess = DesignState(obs.task["category"], list(obs.task["p0"]), strongest)
        return AgentAction.final("No simulation needed.\n" + format_final(guess))


class ScriptedAgent(_Agent):
    """Replays a fixed action list, then ``fallback`` (if given) forever."""

    name = "scripted"

    def __init__(self, actions: Iterable[AgentAction], fallback=None):
        self.actions = list(actions)
        self.fallback = fallback
        self.reset()

    def reset(self, task=None):
        self._pos = 0

    def act(self, obs: Observation) -> AgentAction:
        if self._pos < len(self.actions):
            self._pos += 1
            return self.actions[self._pos - 1]
        if callable(self.fallback):
            return self.fallback(obs)
        if self.fallback is not None:
            return self.fallback
        raise ProtocolViolation("scripted agent ran out of actions")


class IdleAgent(_Agent):
    """Keeps re-proposing the initial design without ever calling a tool."""

    name = "idle"

    def act(self, obs: Observation) -> AgentAction:
        return AgentAction.propose(DesignState(obs.task["category"], list(obs.task["p0"]), obs.task["m0"] or ""))


BUILTIN_AGENTS = {
    "greedy": lambda seed: GreedyAgent(),
    "random": lambda seed: RandomAgent(seed),
    "lazy": lambda seed: LazyAgent(),
    "idle": lambda seed: IdleAgent(),
}


def make_agent(name: str, seed: int = 0):
    try:
        return BUILTIN_AGENTS[name](seed)
    except KeyError:
        raise ValueError(f"unknown agent {name!r}; choose from {sorted(BUILTIN_AGENTS)}") from None


# ---------------------------------------------------------------------------
# External process transport
# ---------------------------------------------------------------------------


class ExternalAgent(_Agent):
    """Child process speaking newline-delimited JSON in lockstep.

    One child is started per episode (in ``reset``). Each observation is
    written as one line; one action line is expected back within
    ``timeout`` seconds, otherwise the child is killed and the step is a
    protocol violation.
    """

    name = "external"

    def __init__(self, command: str | Sequence[str], timeout: float = EXTERNAL_TIMEOUT_S):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = float(timeout)
        self.proc: subprocess.Popen | None = None
        self._lines: queue.Queue | None = None

    def reset(self, task=None):
        self.close()
        self.proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self.proc.stdout, self._lines), daemon=True).start()

    @staticmethod
    def _pump(stream, lines: queue.Queue):
        for line in stream:
            lines.put(line)
        lines.put(None)

    def act(self, obs: Observation) -> AgentAction:
        if self.proc is None:
            self.reset()
        try:
            self.proc.stdin.write(json.dumps(obs.to_message()) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ProtocolViolation(f"agent process is gone: {exc}") from None
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self.close()
            raise ProtocolViolation(f"agent did not answer within {self.timeout:g} s") from None
        if line is None:
            raise ProtocolViolation("agent process closed its output")
        try:
            msg = json.loads(line)
        except ValueError:
            raise ProtocolViolation(f"agent sent malformed JSON: {line[:200]!r}") from None
        return AgentAction.from_message(msg)

    def close(self):
        if self.proc is not None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
            if self.proc.stdout is not None:
                self.proc.stdout.close()
            self.proc = None


def serve(agent, stdin=None, stdout=None) -> int:
    """Answer observation lines from ``stdin`` with action lines on ``stdout``."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    agent.reset()
    for line in stdin:
        if not line.strip():
            continue
        obs = Observation.from_message(json.loads(line))
        stdout.write(json.dumps(agent.act(obs).to_message()) + "\n")
        stdout.flush()
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m cadloop.agents", description="Serve a built-in agent over stdio.")
    ap.add_argument("agent", choices=sorted(BUILTIN_AGENTS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    return serve(make_agent(args.agent, args.seed))


if __name__ == "__main__":
    raise SystemExit(main())
