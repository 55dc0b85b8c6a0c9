"""Task-set metrics from final outputs reproduced with a fresh toolchain run.

Rates (FSR, DSR, SSR, CSR) use every instance as the denominator; an
instance whose final output cannot be extracted, or whose reproduction
fails, counts as unsatisfied on all of them.

The per-instance composite score is

    AS = 0.2 * (fraction of ok tool responses)
       + 0.2 * [final output extracted]
       + 0.6 * N / 3

with N the number of constraints the reproduced design satisfies.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable

from .agents import extract_final_output
from .environment import DesignState, TaskInstance, TrajectoryLog, check_feasibility
from .errors import MismatchedInputs, ToolError
from .materials import lookup_material
from .postproc import FeedbackTuple
from .reward import score
from .toolchain import Toolchain

REPORT_SCHEMA = "eval-report/v1"
COLUMNS = ("FSR", "DSR", "SSR", "CSR", "MEO", "AS", "ATC")
AS_WEIGHTS = (0.2, 0.2, 0.6)


@dataclass(frozen=True)
class Failed:
    cause: str  # error code, e.g. InvalidParams
    message: str = ""


def reproduce_final(proposal: DesignState, task: TaskInstance, toolchain: Toolchain | None = None):
    """Fresh build -> solve -> extract -> cost; failure injection never applies here."""
    toolchain = toolchain or Toolchain()
    if proposal.category != task.category:
        return Failed("CategoryMismatch", f"final design is a {proposal.category!r}, task is {task.category!r}")
    try:
        material = lookup_material(task.library, proposal.material)
        return toolchain.evaluate(task.category, proposal.params, material, task.setting, eps=task.eps)
    except ToolError as exc:
        return Failed(exc.code, exc.message)


@dataclass
class InstanceRow:
    task_id: str
    meo: bool
    feedback: dict | None
    cause: str | None
    disp_ok: bool
    stress_ok: bool
    cost_ok: bool
    n_satisfied: int
    tool_calls: int
    ok_fraction: float
    as_score: float
    reward: dict


@dataclass
class EvalReport:
    fsr: float
    dsr: float
    ssr: float
    csr: float
    meo: float
    as_score: float
    atc: float
    rows: list[InstanceRow] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.rows)

    def metrics(self) -> dict:
        return {
            "FSR": self.fsr,
            "DSR": self.dsr,
            "SSR": self.ssr,
            "CSR": self.csr,
            "MEO": self.meo,
            "AS": self.as_score,
            "ATC": self.atc,
        }

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "n": self.n,
            "metrics": self.metrics(),
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def table(self, label: str = "") -> str:
        m = self.metrics()
        head = ["Agent".ljust(12)] + [c.rjust(7) for c in COLUMNS]
        vals = [f"{m[c] * 100:6.1f}%" for c in COLUMNS[:5]] + [f"{m['AS']:7.3f}", f"{m['ATC']:7.2f}"]
        row = [(label or "-").ljust(12)] + vals
        return " ".join(head) + "\n" + " ".join(row) + "\n"


def _task_of(record) -> TaskInstance:
    return record.task if hasattr(record, "task") else record


def _mean(xs) -> float:
    xs = list(xs)
    return sum(xs) / len(xs) if xs else 0.0


def evaluate(pairs: Iterable[tuple], toolchain: Toolchain | None = None) -> EvalReport:
    """Metrics over (record or task, log) pairs."""
    toolchain = toolchain or Toolchain()
    rows = []
    for record, log in pairs:
        task = _task_of(record)
        if log.task_id != task.id:
            raise MismatchedInputs(f"log for {log.task_id!r} paired with task {task.id!r}")
        final = extract_final_output(log.final_text) if log.final_text is not None else None
        fb, cause = None, None
        ok3 = (False, False, False)
        if final is None:
            cause = "NoFinalOutput"
        else:
            res = reproduce_final(final, task, toolchain)
            if isinstance(res, Failed):
                cause = res.cause
            else:
                fb = res
                ok3 = check_feasibility(fb, task, lookup_material(task.library, final.material))
        n = sum(bool(x) for x in ok3)
        responses = [e for e in log.events if e.kind == "tool_response"]
        ok_frac = sum(1 for e in responses if e.ok) / len(responses) if responses else 0.0
        w_ok, w_meo, w_n = AS_WEIGHTS
        as_score = w_ok * ok_frac + w_meo * (final is not None) + w_n * n / 3
        rows.append(
            InstanceRow(
                task_id=task.id,
                meo=final is not None,
                feedback=fb.to_dict() if isinstance(fb, FeedbackTuple) else None,
                cause=cause,
                disp_ok=bool(ok3[0]),
                stress_ok=bool(ok3[1]),
                cost_ok=bool(ok3[2]),
                n_satisfied=n,
                tool_calls=log.n_tool_calls,
                ok_fraction=ok_frac,
                as_score=as_score,
                reward=score(log, task).to_dict(),
            )
        )
    return EvalReport(
        fsr=_mean(r.n_satisfied == 3 for r in rows),
        dsr=_mean(r.disp_ok for r in rows),
        ssr=_mean(r.stress_ok for r in rows),
        csr=_mean(r.cost_ok for r in rows),
        meo=_mean(r.meo for r in rows),
        as_score=_mean(r.as_score for r in rows),
        atc=_mean(r.tool_calls for r in rows),
        rows=rows,
    )
