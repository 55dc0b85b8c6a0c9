"""Command-line entry point.

    cadloop gen-tasks  --categories rect_plate --count 10 --seed 7 --out tasks.v1
    cadloop run        --tasks tasks.v1 --agent greedy --out logs/
    cadloop score      --logs logs/ --mode rollout
    cadloop eval       --tasks tasks.v1 --logs logs/
    cadloop serve-agent-protocol --tasks tasks.v1 --cmd "python agent.py" --out logs/

Exit status: 0 success, 1 usage error, 2 runtime failure. All randomness
derives from --seed (fallback: the COSMO_SEED environment variable, then 0).
Computation is plain IEEE-754 double precision with deterministic
single-threaded sparse factorizations, so identical inputs give identical
bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .agents import ExternalAgent, make_agent, BUILTIN_AGENTS
from .dataset import (
    ReductionPolicy,
    build_seed_suite,
    derive_seed,
    generate_dataset,
    generate_records,
    read_taskset,
    split_manifest,
    write_taskset,
)
from .environment import TaskInstance, TrajectoryLog, run_episode
from .evaluation import evaluate
from .reward import reward_record, score, score_by_reverification
from .toolchain import Toolchain

RUN_MANIFEST_SCHEMA = "run-manifest/v1"
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        sys.stderr.write(f"\n{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("COSMO_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"COSMO_SEED must be an integer, got {env!r}") from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# gen-tasks
# ---------------------------------------------------------------------------


def cmd_gen_tasks(args) -> int:
    seed = _seed(args)
    policy = ReductionPolicy()
    kwargs = {}
    if args.max_rounds:
        kwargs["max_rounds"] = args.max_rounds
    if args.failure_prob:
        kwargs["failure_prob"] = args.failure_prob
    if args.suite:
        records = build_seed_suite(jobs=args.jobs)
    elif args.categories:
        cats = [c for part in args.categories for c in part.split(",") if c]
        records = generate_records(cats, args.count, seed, args.split, policy, args.resolution, args.jobs, **kwargs)
    else:
        records = generate_dataset(args.train, args.test, args.generalization, seed, policy, args.resolution, args.jobs)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_taskset(records, out)
    Path(str(out) + ".splits.json").write_text(_dump(split_manifest(records)), encoding="utf-8")
    print(f"wrote {len(records)} records to {out}")
    return 0


# ---------------------------------------------------------------------------
# run / serve-agent-protocol
# ---------------------------------------------------------------------------


def _prepare_tasks(args, seed):
    records = read_taskset(args.tasks)
    prepared = []
    for rec in records:
        task = rec.task
        changes = {"rng_seed": derive_seed(seed, task.rng_seed)}
        if args.max_rounds:
            changes["max_rounds"] = args.max_rounds
            changes["max_tool_calls"] = 4 * args.max_rounds
        if args.max_tool_calls:
            changes["max_tool_calls"] = args.max_tool_calls
        if args.failure_prob is not None:
            changes["failure_prob"] = args.failure_prob
        if args.resolution:
            changes["setting"] = replace(task.setting, mesh_resolution=args.resolution)
        prepared.append((replace(task, **changes), rec.prompt))
    return prepared


def _episode_worker(job):
    task_dict, prompt, agent_spec, seed, timeout = job
    task = TaskInstance.from_dict(task_dict)
    kind, value = agent_spec
    agent = ExternalAgent(value, timeout=timeout) if kind == "external" else make_agent(value, seed)
    try:
        log, outcome = run_episode(task, agent, prompt=prompt or None)
    finally:
        close = getattr(agent, "close", None)
        if callable(close):
            close()
    return log.to_jsonl(), str(outcome)


def _run_episodes(args, agent_spec) -> int:
    seed = _seed(args)
    prepared = _prepare_tasks(args, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(t.to_dict(), p, agent_spec, seed, args.timeout) for t, p in prepared]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_episode_worker, jobs))
    else:
        results = [_episode_worker(j) for j in jobs]
    episodes = []
    for (task, _), (text, outcome) in zip(prepared, results):
        name = f"{task.id}.jsonl"
        (out / name).write_text(text, encoding="utf-8")
        episodes.append({"task_id": task.id, "log": name, "outcome": outcome, "task": task.to_dict()})
    manifest = {
        "schema": RUN_MANIFEST_SCHEMA,
        "agent": agent_spec[1] if agent_spec[0] == "builtin" else "external",
        "seed": seed,
        "episodes": episodes,
    }
    (out / MANIFEST_NAME).write_text(_dump(manifest), encoding="utf-8")
    print(f"ran {len(episodes)} episodes into {out}")
    return 0


def cmd_run(args) -> int:
    if args.agent_cmd:
        spec = ("external", args.agent_cmd)
    elif args.agent:
        spec = ("builtin", args.agent)
    else:
        raise UsageError("run needs --agent or --agent-cmd")
    return _run_episodes(args, spec)


def cmd_serve(args) -> int:
    return _run_episodes(args, ("external", args.cmd))


# ---------------------------------------------------------------------------
# score / eval
# ---------------------------------------------------------------------------


def _load_pairs(logs_dir, tasks_path=None):
    logs_dir = Path(logs_dir)
    manifest_path = logs_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found; produce it with 'run'")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("schema") != RUN_MANIFEST_SCHEMA:
        raise ValueError(f"unsupported run manifest schema {manifest.get('schema')!r}")
    by_id = {}
    if tasks_path is not None:
        by_id = {r.id: r for r in read_taskset(tasks_path)}
    pairs = []
    for ep in manifest["episodes"]:
        log = TrajectoryLog.read(logs_dir / ep["log"])
        task = TaskInstance.from_dict(ep["task"])
        if by_id:
            if ep["task_id"] not in by_id:
                raise ValueError(f"task {ep['task_id']!r} is not in {tasks_path}")
            # thresholds and library come from the task file; budgets from the run
            base = by_id[ep["task_id"]].task
            task = replace(base, max_rounds=task.max_rounds, max_tool_calls=task.max_tool_calls,
                           failure_prob=task.failure_prob, rng_seed=task.rng_seed, setting=task.setting)
        pairs.append((task, log))
    return pairs


def cmd_score(args) -> int:
    pairs = _load_pairs(args.logs, args.tasks)
    chain = Toolchain()
    lines = []
    for task, log in pairs:
        if args.mode == "rollout":
            lines.append(reward_record(task.id, breakdown=score(log, task)))
        else:
            lines.append(reward_record(task.id, reverify=score_by_reverification(log, task, chain)))
    out = Path(args.out) if args.out else Path(args.logs) / f"rewards.{args.mode}.jsonl"
    out.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    print(f"wrote {len(lines)} {args.mode} rewards to {out}")
    return 0


def cmd_eval(args) -> int:
    pairs = _load_pairs(args.logs, args.tasks)
    report = evaluate(pairs)
    label = args.label
    if not label:
        manifest = json.loads((Path(args.logs) / MANIFEST_NAME).read_text(encoding="utf-8"))
        label = manifest.get("agent", "")
    table = report.table(label)
    out = Path(args.out) if args.out else Path(args.logs) / "report.json"
    out.write_text(report.to_json(), encoding="utf-8")
    table_path = Path(args.table) if args.table else out.with_suffix(".txt")
    table_path.write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--tasks", required=True, help="task file written by gen-tasks")
    p.add_argument("--out", required=True, help="directory for per-task logs and manifest.json")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-rounds", type=int, default=None)
    p.add_argument("--max-tool-calls", type=int, default=None)
    p.add_argument("--failure-prob", type=float, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timeout", type=float, default=120.0, help="seconds per external agent step")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cadloop", description="Closed-loop CAD/FEM design optimization environment.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-tasks", help="generate a task file")
    g.add_argument("--categories", nargs="*", default=None, help="category ids (comma or space separated)")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--split", choices=("train", "test", "generalization"), default=None)
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--test", type=int, default=50)
    g.add_argument("--generalization", type=int, default=25)
    g.add_argument("--suite", action="store_true", help="emit the fixed 50-task seed suite")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--resolution", type=int, default=2)
    g.add_argument("--max-rounds", type=int, default=None)
    g.add_argument("--failure-prob", type=float, default=None)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_tasks)

    r = sub.add_parser("run", help="run episodes with a built-in or external agent")
    _add_run_flags(r)
    r.add_argument("--agent", choices=sorted(BUILTIN_AGENTS), default=None)
    r.add_argument("--agent-cmd", default=None, help="command line of an external agent process")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("score", help="score logs with the rollout or re-verification reward")
    s.add_argument("--logs", required=True)
    s.add_argument("--tasks", default=None)
    s.add_argument("--mode", choices=("rollout", "reverify"), default="rollout")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="reproduce final designs and report metrics")
    e.add_argument("--logs", required=True)
    e.add_argument("--tasks", default=None)
    e.add_argument("--out", default=None, help="JSON report path (default LOGS/report.json)")
    e.add_argument("--table", default=None, help="text table path (default next to the JSON report)")
    e.add_argument("--label", default=None)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("serve-agent-protocol", help="run episodes against an external agent process")
    _add_run_flags(v)
    v.add_argument("--cmd", required=True, help="agent command line")
    v.set_defaults(func=cmd_serve)
    return ap


def _check(args):
    for name in ("count", "jobs", "train", "test", "generalization"):
        v = getattr(args, name, None)
        if v is not None and v < (1 if name == "jobs" else 0):
            raise UsageError(f"--{name} must be non-negative" if name != "jobs" else "--jobs must be at least 1")
    fp = getattr(args, "failure_prob", None)
    if fp is not None and not 0 <= fp <= 1:
        raise UsageError("--failure-prob must lie in [0, 1]")
    for name in ("max_rounds", "resolution"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be at least 1")
    mtc = getattr(args, "max_tool_calls", None)
    if mtc is not None and mtc < 4:
        raise UsageError("--max-tool-calls must be at least 4")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _check(args)
        _seed(args)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"cadloop: error: {exc}\n")
        return 1
    except Exception as exc:
        sys.stderr.write(f"cadloop: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
