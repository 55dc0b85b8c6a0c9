"""Task generation: seed designs, tightened thresholds, feasibility filter, prompts.

A record starts from a random design inside the category bounds. Its
simulated feedback becomes the ground truth; the displacement and cost
thresholds are then tightened by a drawn fraction and the stress
constraint, whose limit is fixed per material, is tightened by picking an
initial material that the seed design overstresses. A bounded grid search
over parameters and materials must find at least one feasible design
(the witness) or the record is rejected.
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .environment import TaskInstance, check_feasibility
from .errors import ToolError
from .fem import SimSetting, solve_linear_static
from .geometry import build_part, get_category, holdout_categories, training_categories, validate_params
from .materials import MaterialLibrary, default_library
from .postproc import FeedbackTuple, compute_cost, max_displacement, max_von_mises
from .toolchain import Toolchain

ITEMS = ("displacement", "stress", "cost")
SPLITS = ("train", "test", "generalization")
TASKSET_SCHEMA = "taskset/v1"
SPLITS_SCHEMA = "splits/v1"

DEFAULT_RESOLUTION = 2
GRID_POINTS = 5
MAX_ORACLE_EVALS = 500
SEED_SUITE_SIZE = 50
SEED_SUITE_SEED = 20240601


@dataclass(frozen=True)
class ReductionPolicy:
    standard_range: tuple[float, float] = (0.05, 0.10)
    extreme_fraction: float = 0.10
    extreme_value: float = 0.30
    items_to_reduce: int | None = None  # None: draw 1, 2 or 3

    def __post_init__(self):
        lo, hi = self.standard_range
        if not 0 < lo <= hi < 1:
            raise ValueError("standard_range must satisfy 0 < low <= high < 1")
        if not 0 < self.extreme_value < 1:
            raise ValueError("extreme_value must lie in (0, 1)")
        if not 0 <= self.extreme_fraction <= 1:
            raise ValueError("extreme_fraction must lie in [0, 1]")
        if self.items_to_reduce is not None and self.items_to_reduce not in (1, 2, 3):
            raise ValueError("items_to_reduce must be 1, 2 or 3")


@dataclass(frozen=True)
class ReductionPlan:
    items: tuple[str, ...]
    fractions: dict  # displacement / cost -> fraction; stress has none
    extreme: bool

    def fraction(self, item: str) -> float:
        return float(self.fractions.get(item, 0.0))

    def to_dict(self) -> dict:
        return {"items": list(self.items), "fractions": dict(self.fractions), "extreme": self.extreme}

    @classmethod
    def from_dict(cls, d) -> "ReductionPlan":
        return cls(tuple(d["items"]), {k: float(v) for k, v in d["fractions"].items()}, bool(d["extreme"]))


def draw_reduction_plan(policy: ReductionPolicy, rng: np.random.Generator) -> ReductionPlan:
    extreme = bool(rng.random() < policy.extreme_fraction)
    k = policy.items_to_reduce or int(rng.integers(1, 4))
    picked = sorted(int(i) for i in rng.choice(len(ITEMS), size=k, replace=False))
    items = tuple(ITEMS[i] for i in picked)
    lo, hi = policy.standard_range
    fractions = {}
    for item in items:
        if item != "stress":
            fractions[item] = policy.extreme_value if extreme else float(rng.uniform(lo, hi))
    return ReductionPlan(items, fractions, extreme)


@dataclass(frozen=True)
class Witness:
    params: tuple[float, ...]
    material: str
    feedback: FeedbackTuple

    def to_dict(self) -> dict:
        return {"params": list(self.params), "material": self.material, "feedback": self.feedback.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "Witness":
        return cls(tuple(d["params"]), d["material"], FeedbackTuple.from_dict(d["feedback"]))


@dataclass
class TaskRecord:
    task: TaskInstance
    ground_truth: FeedbackTuple
    plan: ReductionPlan
    split: str
    witness: Witness
    seed: int
    oracle_evaluations: int = 0
    prompt: str = ""

    @property
    def id(self) -> str:
        return self.task.id

    def to_dict(self) -> dict:
        return {
            "id": self.task.id,
            "split": self.split,
            "seed": self.seed,
            "task": self.task.to_dict(),
            "ground_truth": self.ground_truth.to_dict(),
            "plan": self.plan.to_dict(),
            "witness": self.witness.to_dict(),
            "oracle_evaluations": self.oracle_evaluations,
            "prompt": self.prompt,
        }

    @classmethod
    def from_dict(cls, d) -> "TaskRecord":
        return cls(
            task=TaskInstance.from_dict(d["task"]),
            ground_truth=FeedbackTuple.from_dict(d["ground_truth"]),
            plan=ReductionPlan.from_dict(d["plan"]),
            split=d["split"],
            witness=Witness.from_dict(d["witness"]),
            seed=int(d["seed"]),
            oracle_evaluations=int(d.get("oracle_evaluations", 0)),
            prompt=d.get("prompt", ""),
        )


@dataclass(frozen=True)
class Rejected:
    category: str
    seed: int
    cause: str
    plan: ReductionPlan | None = None
    evaluations: int = 0


def derive_seed(*parts: int) -> int:
    """Stable 31-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0] >> 1)


def default_setting(category: str, resolution: int = DEFAULT_RESOLUTION) -> SimSetting:
    return SimSetting(pressure=get_category(category).default_pressure, mesh_resolution=resolution)


# ---------------------------------------------------------------------------
# Feasibility oracle
# ---------------------------------------------------------------------------


def oracle_points(category: str, p0: Sequence[float], grid_points: int = GRID_POINTS) -> np.ndarray:
    """p0 followed by the full grid, nearest to p0 (in normalized units) first."""
    cat = get_category(category)
    lo, hi = cat.lower, cat.upper
    axes = [np.linspace(a, b, grid_points) for a, b in zip(lo, hi)]
    grid = np.array(list(itertools.product(*axes)), dtype=float)
    d = np.linalg.norm((grid - np.asarray(p0)) / (hi - lo), axis=1)
    order = np.argsort(d, kind="stable")
    return np.vstack([np.asarray(p0, dtype=float)[None, :], grid[order]])


def feasibility_oracle(
    task: TaskInstance,
    grid_points: int = GRID_POINTS,
    max_evals: int = MAX_ORACLE_EVALS,
) -> tuple[Witness | None, int]:
    """Search grid points x materials for a design meeting all three thresholds.

    Cost needs only the geometry, so it is checked before any solve. At most
    ``max_evals`` solves are run and at most ``max_evals`` points visited.
    Returns (witness or None, number of solves).
    """
    cat = get_category(task.category)
    materials = sorted(task.library, key=lambda m: m.cost_per_m3)
    solves = 0
    for visited, point in enumerate(oracle_points(task.category, task.p0, grid_points)):
        if visited >= max_evals or solves >= max_evals:
            break
        try:
            params = validate_params(cat, point.tolist())
            mesh = build_part(cat, params, task.setting.mesh_resolution)
        except ToolError:
            continue
        for m in materials:
            cost = compute_cost(mesh.volume_mm3, m)
            if cost > task.kappa:
                continue
            if solves >= max_evals:
                break
            solves += 1
            try:
                fld = solve_linear_static(mesh, m, task.setting, task.eps)
            except ToolError:
                continue
            fb = FeedbackTuple(max_displacement(fld), max_von_mises(fld), cost)
            if all(check_feasibility(fb, task, m)):
                return Witness(tuple(params), m.name, fb), solves
    return None, solves


# ---------------------------------------------------------------------------
# Record generation
# ---------------------------------------------------------------------------


def _sample_p0(cat, rng) -> list[float]:
    u = rng.random(len(cat.params))
    values = [round(float(lo + (hi - lo) * t), 2) for lo, hi, t in zip(cat.lower, cat.upper, u)]
    return cat.clamp(values)


def _initial_material(plan: ReductionPlan, library: MaterialLibrary, seed_name: str, sigma_gt: float) -> str:
    if "stress" not in plan.items:
        return seed_name
    below = [m for m in library.by_strength() if m.sigma_allow < sigma_gt]
    return below[-1].name if below else library.by_strength()[0].name


def generate_task(
    category: str,
    policy: ReductionPolicy | None = None,
    rng_seed: int = 0,
    *,
    library: MaterialLibrary | None = None,
    split: str | None = None,
    resolution: int = DEFAULT_RESOLUTION,
    plan: ReductionPlan | None = None,
    grid_points: int = GRID_POINTS,
    max_evals: int = MAX_ORACLE_EVALS,
    max_rounds: int | None = None,
    failure_prob: float = 0.0,
    variant_seed: int | None = None,
) -> TaskRecord | Rejected:
    """One task from one seed, or Rejected when the oracle finds no witness.

    ``plan`` overrides the drawn reduction plan (the draw still happens so
    the rest of the random stream is unchanged).
    """
    cat = get_category(category)
    policy = policy or ReductionPolicy()
    library = library or default_library()
    split = split or ("generalization" if cat.holdout else "train")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    rng = np.random.default_rng(rng_seed)
    drawn = draw_reduction_plan(policy, rng)
    plan = plan or drawn
    p0 = _sample_p0(cat, rng)
    seed_material = library.materials[int(rng.integers(len(library)))]
    env_seed = int(rng.integers(2**31))
    setting = default_setting(cat.id, resolution)
    chain = Toolchain()
    try:
        gt = chain.evaluate(cat.id, p0, seed_material, setting)
        m0 = _initial_material(plan, library, seed_material.name, gt.sigma_max)
        if m0 != seed_material.name:
            gt = chain.evaluate(cat.id, p0, m0, setting, library)
    except ToolError as exc:
        return Rejected(cat.id, rng_seed, f"{exc.code}: {exc.message}", plan)
    delta = (1.0 - plan.fraction("displacement")) * gt.u_max
    kappa = (1.0 - plan.fraction("cost")) * gt.cost
    if not (delta > 0 and kappa > 0):
        return Rejected(cat.id, rng_seed, "non-positive threshold", plan)
    task = TaskInstance(
        id=f"{cat.id}-{rng_seed}",
        category=cat.id,
        p0=tuple(p0),
        m0=m0,
        setting=setting,
        delta=delta,
        kappa=kappa,
        library=library,
        failure_prob=failure_prob,
        rng_seed=env_seed,
        **({"max_rounds": max_rounds} if max_rounds else {}),
    )
    witness, evals = feasibility_oracle(task, grid_points, max_evals)
    if witness is None:
        return Rejected(cat.id, rng_seed, f"no feasible design found in {evals} evaluations", plan, evals)
    rec = TaskRecord(task, gt, plan, split, witness, rng_seed, evals)
    rec.prompt = assemble_prompt(rec, rng_seed if variant_seed is None else variant_seed)
    return rec


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------

_PART1 = [
    "You are optimizing a {cat} for a structural application. Find a design whose maximum displacement is at most {delta} mm, whose maximum von Mises stress stays within the allowable stress of the chosen material, and whose cost is at most {kappa}.",
    "Goal: redesign the {cat} below. Accept only designs with peak deflection <= {delta} mm, peak von Mises stress <= the material's allowable stress, and cost <= {kappa}.",
    "Design brief. Part type: {cat}. Limits to meet together: displacement {delta} mm, cost {kappa}, and stress not exceeding the allowable value of the selected material.",
    "We need a {cat} that is stiff enough (max displacement no more than {delta} mm), strong enough (von Mises stress under the material limit) and cheap enough (no more than {kappa}).",
    "Task: iterate on a parametric {cat} until every check passes. Checks: u_max <= {delta} mm; sigma_max <= sigma_allow(material); cost <= {kappa}.",
    "Please act as a design engineer. The {cat} described below must satisfy a deflection cap of {delta} mm and a budget of {kappa} while its stress remains below the allowable stress of its material.",
    "Objective for this {cat}: satisfy all constraints at once. Deflection limit {delta} mm. Budget {kappa}. Stress limit set by the material you pick.",
    "The following {cat} is to be tuned. A design is acceptable when its largest displacement does not exceed {delta} mm, its largest von Mises stress does not exceed the material's allowable stress, and its price does not exceed {kappa}.",
    "Constraint satisfaction problem on a {cat}: keep max displacement within {delta} mm and total material cost within {kappa}; von Mises stress may not exceed what the material allows.",
    "Improve the {cat} design. Required: displacement at most {delta} mm. Required: cost at most {kappa}. Required: von Mises stress at most the allowable stress of the material.",
]

_PART3 = [
    "Materials available (E MPa, nu, density kg/m3, price per kg, allowable stress MPa):\n{materials}\nTools: cad_generate builds the geometry, cae_solve runs the static analysis, extract_results reports displacement and stress, compute_cost reports the cost. Call them in that order for every proposal. You have at most {rounds} rounds and {calls} tool calls; stop as soon as a design passes all checks.",
    "Material library:\n{materials}\nEach round: propose a design, then call cad_generate, cae_solve, extract_results and compute_cost. Budget: {rounds} rounds, {calls} tool calls. Finish immediately once every constraint holds.",
    "You may choose any of these materials:\n{materials}\nEvaluate a proposal with the four tools (geometry, solve, extract, cost). The episode allows {rounds} rounds and {calls} tool calls in total. Further tool use after a passing design is penalized.",
    "Choose a material from the list:\n{materials}\nWorkflow per iteration: cad_generate -> cae_solve -> extract_results -> compute_cost. Limits: {rounds} iterations, {calls} tool invocations. End the episode when the design is feasible.",
    "Library entries follow.\n{materials}\nTool rules: the geometry must be generated before it can be solved, and the solve must finish before results can be extracted; cost needs the geometry. Up to {rounds} design rounds and {calls} calls. Do not keep calling tools after success.",
    "Allowed materials:\n{materials}\nThe tools act on your latest proposal. Run the full chain of four tools to verify it. You get {rounds} rounds and {calls} tool calls; output the final design as soon as it is verified feasible.",
    "Candidate materials with their properties:\n{materials}\nVerification uses cad_generate, cae_solve, extract_results and compute_cost. Round limit {rounds}, call limit {calls}. Terminate right after the first verified feasible design.",
    "Here is the material catalogue:\n{materials}\nAfter each proposal, invoke the tool chain (build, solve, extract, cost) and read the responses. Stay within {rounds} rounds and {calls} tool calls, and stop once all limits are met.",
    "Pick materials only from this table:\n{materials}\nTools must be called in chain order for each proposal. The run ends after {rounds} rounds or {calls} tool calls, whichever comes first. Unneeded calls after a feasible result cost reward.",
    "Material options:\n{materials}\nFor every candidate design run: 1) cad_generate 2) cae_solve 3) extract_results 4) compute_cost. Maximum {rounds} rounds, {calls} calls. Once a candidate meets all constraints, stop and report it.",
]


def _material_table(library: MaterialLibrary) -> str:
    return "\n".join(
        f"- {m.name}: E={m.E:g}, nu={m.nu:g}, rho={m.rho:g}, price={m.price:g}, sigma_allow={m.sigma_allow:g}"
        for m in library
    )


def _part2(task: TaskInstance) -> str:
    cat = get_category(task.category)
    lines = [f"Part category: {cat.id} ({cat.description})", "Initial design:"]
    for spec, v in zip(cat.params, task.p0):
        lines.append(f"- {spec.name} = {v:g} {spec.unit} (bounds {spec.lower:g} to {spec.upper:g})")
    if task.m0 is not None:
        lines.append(f"- material = {task.m0}")
    lines.append(
        f"Loading: uniform pressure of {task.setting.pressure:g} MPa on the {cat.load_face} face; "
        f"the {cat.fixed_face} face is fully fixed."
    )
    return "\n".join(lines)


def _part4(task: TaskInstance) -> str:
    cat = get_category(task.category)
    example = {"category": cat.id, "material": "<material name>", "parameters": {n: "<mm>" for n in cat.param_names}}
    return (
        "Output requirement: end with exactly one JSON object of the form\n"
        + json.dumps(example)
        + "\nwhere parameters lists every dimension of the final verified design (a list in schema order is also accepted)."
    )


def prompt_parts(record: TaskRecord, variant_seed: int) -> list[str]:
    task = record.task
    cat = get_category(task.category)
    v1 = int(variant_seed) % len(_PART1)
    v3 = int(variant_seed) % len(_PART3)
    part1 = _PART1[v1].format(cat=cat.id.replace("_", " "), delta=f"{task.delta:.6g}", kappa=f"{task.kappa:.2f}")
    part3 = _PART3[v3].format(
        materials=_material_table(task.library), rounds=task.max_rounds, calls=task.max_tool_calls
    )
    return [part1, _part2(task), part3, _part4(task)]


def assemble_prompt(record: TaskRecord, variant_seed: int) -> str:
    return "\n\n".join(prompt_parts(record, variant_seed))


# ---------------------------------------------------------------------------
# Sets of records
# ---------------------------------------------------------------------------


def _slot_record(args) -> tuple[TaskRecord | None, int]:
    category, base_seed, slot, split, policy, resolution, max_attempts, kwargs = args
    for attempt in range(max_attempts):
        seed = derive_seed(base_seed, SPLITS.index(split), slot, attempt)
        rec = generate_task(category, policy, seed, split=split, resolution=resolution, **kwargs)
        if isinstance(rec, TaskRecord):
            return rec, attempt
    return None, max_attempts


def generate_records(
    categories: Sequence[str],
    count: int,
    seed: int,
    split: str | None = None,
    policy: ReductionPolicy | None = None,
    resolution: int = DEFAULT_RESOLUTION,
    jobs: int = 1,
    max_attempts: int = 20,
    **kwargs,
) -> list[TaskRecord]:
    """``count`` records cycling through ``categories``; each slot retries seeds until accepted."""
    if not categories:
        raise ValueError("need at least one category")
    for c in categories:
        get_category(c)
    work = []
    for slot in range(count):
        cat = get_category(categories[slot % len(categories)])
        sp = split or ("generalization" if cat.holdout else "train")
        work.append((cat.id, seed, slot, sp, policy, resolution, max_attempts, kwargs))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_slot_record, work))
    else:
        results = [_slot_record(w) for w in work]
    out = []
    for (rec, attempts), w in zip(results, work):
        if rec is None:
            raise RuntimeError(f"slot {w[2]} ({w[0]}): no feasible task after {attempts} seeds")
        out.append(rec)
    return out


def generate_dataset(
    n_train: int = 200,
    n_test: int = 50,
    n_generalization: int = 25,
    seed: int = 0,
    policy: ReductionPolicy | None = None,
    resolution: int = DEFAULT_RESOLUTION,
    jobs: int = 1,
) -> list[TaskRecord]:
    """Train and test draw from the training categories; generalization only from holdouts."""
    train_cats, gen_cats = training_categories(), holdout_categories()
    records = []
    records += generate_records(train_cats, n_train, seed, "train", policy, resolution, jobs)
    records += generate_records(train_cats, n_test, seed, "test", policy, resolution, jobs)
    records += generate_records(gen_cats, n_generalization, seed, "generalization", policy, resolution, jobs)
    return records


def taskset_to_jsonl(records: Iterable[TaskRecord]) -> str:
    records = list(records)
    lines = [json.dumps({"schema": TASKSET_SCHEMA, "count": len(records)})]
    lines += [json.dumps(r.to_dict(), ensure_ascii=False) for r in records]
    return "\n".join(lines) + "\n"


def taskset_from_jsonl(text: str) -> list[TaskRecord]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty task file")
    head = json.loads(lines[0])
    if head.get("schema") != TASKSET_SCHEMA:
        raise ValueError(f"unsupported task file schema {head.get('schema')!r}")
    records = [TaskRecord.from_dict(json.loads(ln)) for ln in lines[1:]]
    if "count" in head and head["count"] != len(records):
        raise ValueError(f"task file declares {head['count']} records but holds {len(records)}")
    return records


def write_taskset(records: Iterable[TaskRecord], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(taskset_to_jsonl(records), encoding="utf-8")
    return path


def read_taskset(path: str | Path) -> list[TaskRecord]:
    return taskset_from_jsonl(Path(path).read_text(encoding="utf-8"))


def split_manifest(records: Iterable[TaskRecord]) -> dict:
    records = list(records)
    manifest = {"schema": SPLITS_SCHEMA}
    for sp in SPLITS:
        manifest[sp] = [r.id for r in records if r.split == sp]
    return manifest


def build_seed_suite(jobs: int = 1) -> list[TaskRecord]:
    """The fixed 50-task evaluation suite (test split, training categories)."""
    return generate_records(training_categories(), SEED_SUITE_SIZE, SEED_SUITE_SEED, "test", jobs=jobs)


@lru_cache(maxsize=1)
def _seed_suite_text() -> str:
    return resources.files("cadloop").joinpath("data/seed_suite.v1.jsonl").read_text(encoding="utf-8")


def seed_suite() -> list[TaskRecord]:
    """The bundled copy of :func:`build_seed_suite`."""
    return taskset_from_jsonl(_seed_suite_text())
