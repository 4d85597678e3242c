"""Command-line entry points: collect, discover, train, eval.

Every command accepts ``--config FILE`` with flat ``key = value`` lines
(keys are long flag names, dashes or underscores); flags on the command
line override the file. Exit status: 0 success, 1 usage or configuration
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from masd import env as E
from masd.dataset import DatasetError, check_compatible, collect_episodes, load_dataset, save_dataset
from masd.discovery import DivergenceError as DiscoveryDivergence
from masd.discovery import train as discover
from masd.nn import CheckpointError, checkpoint
from masd.runtime import (
    MANNERS, Assigner, CompatibilityError, DownstreamConfig, SkillSet, check_policy_task, load_policy,
    run_flat_episode, run_skill_episode, train_downstream, trajectory_lines,
)
from masd.runtime import DivergenceError as DownstreamDivergence
from masd.skillnet import DiscoveryConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config files

def read_config(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    path = pre.parse_known_args(argv)[0].config
    if path:
        values = read_config(path)
        actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
        unknown = sorted(set(values) - set(actions))
        if unknown:
            raise UsageError(f"{path}: unknown keys {', '.join(unknown)}")
        defaults = {}
        for key, value in values.items():
            action = actions[key]
            if isinstance(action, argparse._StoreTrueAction):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise UsageError(f"{path}: {key} expects true or false, got {value!r}")
                defaults[key] = value.lower() in ("true", "1", "yes")
            elif action.nargs == "+":
                defaults[key] = value.split()
            else:
                defaults[key] = value
            action.required = False  # supplied by the file
        parser.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- argument helpers

def _task(name: str, sparse: bool = False) -> E.TaskConfig:
    try:
        return E.get_task(name, sparse=sparse)
    except (KeyError, E.ConfigError) as exc:
        raise UsageError(f"unknown or invalid task {name!r} (known: {', '.join(sorted(E.TASKS))})") from exc


def parse_policy(text: str) -> float:
    """'expert' -> 0.0; 'noisy:EPS' -> EPS in [0, 1]."""
    if text == "expert":
        return 0.0
    if text.startswith("noisy:"):
        try:
            eps = float(text[6:])
        except ValueError:
            raise UsageError(f"bad noise level in policy {text!r}") from None
        if 0.0 <= eps <= 1.0:
            return eps
    raise UsageError(f"policy must be 'expert' or 'noisy:EPS' with EPS in [0, 1], got {text!r}")


def parse_sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(sorted({int(s) for s in text.split(",") if s.strip()}))
    except ValueError:
        raise UsageError(f"sizes must be comma-separated integers, got {text!r}") from None
    if not sizes or any(not 1 <= s <= E.N_MAX for s in sizes) or 1 not in sizes:
        raise UsageError(f"sizes must include 1 and lie in [1, {E.N_MAX}], got {text!r}")
    return sizes


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {path} does not exist")
    return p


def _out_path(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise UsageError(f"output directory {p.parent} does not exist")
    return p


def wilson_interval(wins: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = wins / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if wins == 0 else max(0.0, centre - half)
    hi = 1.0 if wins == n else min(1.0, centre + half)
    return lo, hi


# ---------------------------------------------------------------- commands

def _collect_chunk(args):
    task, count, eps, seed = args
    return collect_episodes(task, count, eps, seed)


def cmd_collect(a: argparse.Namespace) -> int:
    task = _task(a.task, a.sparse)
    eps = parse_policy(a.policy)
    if a.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    out = _out_path(a.out)
    if a.workers > 1:
        # each worker gets its own seed, so the bytes differ from a single-process run
        counts = [len(c) for c in np.array_split(np.arange(a.episodes), a.workers) if len(c)]
        with ProcessPoolExecutor(a.workers) as pool:
            parts = pool.map(_collect_chunk, [(task, c, eps, a.seed * 1000 + w) for w, c in enumerate(counts)])
        episodes = [ep for part in parts for ep in part]
    else:
        episodes = collect_episodes(task, a.episodes, eps, a.seed)
    save_dataset(episodes, out)
    wins = sum(ep.won for ep in episodes)
    print(f"episodes {len(episodes)}  win_rate {wins / len(episodes):.3f}  "
          f"mean_length {np.mean([len(ep) for ep in episodes]):.2f}  -> {out}")
    return 0


def cmd_discover(a: argparse.Namespace) -> int:
    paths = [_need_file(p, "dataset") for p in a.data]
    out = _out_path(a.out)
    loss_csv = _out_path(a.loss_csv) if a.loss_csv else out.with_suffix(".loss.csv")
    try:
        cfg = DiscoveryConfig(
            method=a.method, d=a.dim, k=a.codes, H=a.horizon, beta=a.beta, lr=a.lr, epochs=a.epochs,
            sizes=parse_sizes(a.sizes), grouper_mode=a.grouper_input, seed=a.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    datasets = [load_dataset(p) for p in paths]
    check_compatible(datasets)
    episodes = [ep for data in datasets for ep in data]
    if not episodes:
        raise UsageError("the datasets contain no episodes")
    try:
        result = discover(episodes, cfg, loss_csv=loss_csv)
    except DiscoveryDivergence as exc:
        checkpoint.save(out, exc.tensors, exc.meta)
        print(f"error: {exc}; last good checkpoint written to {out}", file=sys.stderr)
        return 2
    result.save(out)
    print(f"method {cfg.method}  loss {result.initial_loss:.4f} -> {result.final_loss:.4f}  "
          f"accuracy {result.final_accuracy:.4f}  -> {out}")
    return 0


def cmd_train(a: argparse.Namespace) -> int:
    task = _task(a.env, a.sparse)
    out = _out_path(a.out)
    metrics = _out_path(a.metrics) if a.metrics else out.with_suffix(".metrics.csv")
    skills = None
    if a.assign != "flat":
        if not a.skills:
            raise UsageError(f"--assign {a.assign} needs --skills")
        skills = SkillSet.load(_need_file(a.skills, "skills checkpoint"))
        skills.check(a.assign)
    try:
        cfg = DownstreamConfig(manner=a.assign, steps=a.steps, eval_interval=a.eval_interval,
                               eval_episodes=a.eval_episodes, target_win_rate=a.target_win_rate, seed=a.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        result = train_downstream(task, skills, cfg, metrics_csv=metrics)
    except DownstreamDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result.save(out)
    last = result.metrics[-1] if result.metrics else {}
    print(f"manner {a.assign}  env_steps {result.env_steps}  best_win_rate {result.best_win_rate:.3f}  "
          f"final_win_rate {last.get('win_rate', float('nan')):.3f}  -> {out}")
    return 0


def _eval_chunk(args):
    policy_path, task, seeds, dump = args
    return [_eval_one(policy_path, task, s, dump) for s in seeds]


def _eval_one(policy, task, ep_seed, dump):
    if policy == "expert":
        state, obs = E.reset(task, ep_seed)
        trace, done, total = [], False, 0.0
        t = 0
        while not done:
            act = E.scripted_expert(state, obs)
            if dump:
                trace.append({"t": t, "agents": state.agent_pos.tolist(), "enemies": state.enemy_pos.tolist(),
                              "actions": act.tolist(), "codes": None, "partition": None})
            r, state, obs, done = E.step(state, act)
            total += r
            t += 1
        return state.won, total, trace
    if isinstance(policy, (str, Path)):
        policy = load_policy(policy)
    if policy.manner == "flat":
        record, _, trace = run_flat_episode(task, ep_seed, policy.actor, None, greedy=True, trace=dump)
    else:
        ep = run_skill_episode(task, ep_seed, policy.actor, policy.skills, Assigner(policy.skills, policy.manner),
                               None, greedy=True, trace=dump)
        record, trace = ep.record, ep.trace
    return record.won, float(record.rewards.sum()), trace


def cmd_eval(a: argparse.Namespace) -> int:
    task = _task(a.env, a.sparse)
    if a.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    dump = _out_path(a.dump_traj) if a.dump_traj else None
    if a.policy == "expert":
        policy = "expert"
    else:
        policy = load_policy(_need_file(a.policy, "policy checkpoint"))
        check_policy_task(policy, task)
    seeds = [a.seed * 1_000_003 + k for k in range(a.episodes)]
    if a.workers > 1:
        chunks = [list(c) for c in np.array_split(seeds, a.workers) if len(c)]
        with ProcessPoolExecutor(a.workers) as pool:
            jobs = [(a.policy, task, c, bool(dump)) for c in chunks]
            results = [r for part in pool.map(_eval_chunk, jobs) for r in part]
    else:
        results = [_eval_one(policy, task, s, bool(dump)) for s in seeds]
    wins = sum(int(w) for w, _, _ in results)
    lo, hi = wilson_interval(wins, len(results))
    mean_ret = float(np.mean([r for _, r, _ in results]))
    print(f"episodes {len(results)}  win_rate {wins / len(results):.3f}  95% CI [{lo:.3f}, {hi:.3f}]  "
          f"mean_return {mean_ret:.3f}")
    if dump:
        with open(dump, "w") as fh:
            for k, (_, _, trace) in enumerate(results):
                for line in trajectory_lines(trace, k):
                    fh.write(line + "\n")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="masd", description="Multi-agent skill discovery toolkit")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("collect", help="roll out the scripted collector and save a dataset")
    common(p)
    p.add_argument("--task", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--policy", default="expert", help="expert or noisy:EPS")
    p.add_argument("--sparse", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("discover", help="train skills from datasets")
    common(p)
    p.add_argument("--method", choices=("3d", "hier", "single"), default="3d")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--horizon", type=int, default=5)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--codes", type=int, default=8)
    p.add_argument("--beta", type=float, default=0.25)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sizes", default=",".join(str(i) for i in range(1, E.N_MAX + 1)))
    p.add_argument("--grouper-input", choices=("state", "obs"), default="state")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("train", help="train a high-level policy over frozen skills")
    common(p)
    p.add_argument("--env", required=True)
    p.add_argument("--skills")
    p.add_argument("--assign", choices=MANNERS + ("flat",), default="mixed")
    p.add_argument("--steps", type=int, default=300_000)
    p.add_argument("--sparse", action="store_true")
    p.add_argument("--eval-interval", type=int, default=20_000)
    p.add_argument("--eval-episodes", type=int, default=32)
    p.add_argument("--target-win-rate", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a policy checkpoint (or 'expert')")
    common(p)
    p.add_argument("--env", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--sparse", action="store_true")
    p.add_argument("--dump-traj")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)
    return root


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv or argv[0] in ("-h", "--help"):
            parser.print_help()
            return 0 if argv else 1
        sub = parser._subparsers._group_actions[0].choices.get(argv[0])
        if sub is None:
            raise UsageError(f"unknown command {argv[0]!r}; choose collect, discover, train or eval")
        args = _apply_config(sub, argv[1:])
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be at least 1")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (CompatibilityError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help inside a subcommand
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
