"""Batch front door: config parsing, one subcommand per pipeline stage.

Exit codes partition outcomes:

* 0 - success, or verification found the policy safe on the grid
* 1 - usage or configuration errors (bad config, checkpoint mismatch, ...)
* 2 - baseline training could not produce an unsafe policy
* 3 - falsify/verify found counterexamples
* 4 - repair exhausted its budget with live counterexamples

All emitted JSON is deterministic for a fixed config and seed; wall-clock
timing is printed to the console only, never into metrics or report files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from .cmdp import Environment, HorizonConfig
from .envs import ENVIRONMENTS, EnvSpec, make_env
from .nets import CheckpointError, Network, load_checkpoint, save_checkpoint
from .repair import (
    BaselineTrainingFailed,
    PenaltyConfig,
    RepairReport,
    RepairSettings,
    critic_for_env,
    evaluate_policy,
    repair,
    train_unsafe_baseline,
)
from .search import SAFE_ON_GRID, GridCapExceeded, SearchConfig, falsify, verify_grid
from .cmdp import safety_value
from .util import atomic_write_text, derive_seed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_BASELINE_FAILED = 2
EXIT_COUNTEREXAMPLES = 3
EXIT_BUDGET_EXHAUSTED = 4


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class RunConfig:
    env: EnvSpec
    horizon: HorizonConfig | None
    policy_hidden: tuple[int, ...]
    critic_hidden: tuple[int, ...]
    penalty: PenaltyConfig
    search: SearchConfig
    settings: RepairSettings
    out_dir: str
    seed: int

    def build_env(self) -> Environment:
        return make_env(self.env)

    def horizon_for(self, env: Environment) -> HorizonConfig:
        return self.horizon if self.horizon is not None else env.default_horizon


_TOP_LEVEL_KEYS = {"env", "horizon", "policy", "critic", "penalty", "search", "repair", "out_dir", "seed"}


def _check_keys(block: dict, allowed, where: str) -> None:
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _build_block(cls, block: dict, where: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    _check_keys(block, fields, where)
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def _hidden_sizes(block: dict, where: str) -> tuple[int, ...]:
    _check_keys(block, {"hidden"}, where)
    hidden = block.get("hidden", None)
    if hidden is None:
        raise ConfigError(f"{where} must contain a 'hidden' list of layer sizes")
    if not isinstance(hidden, list) or not all(isinstance(n, int) and n >= 1 for n in hidden):
        raise ConfigError(f"{where}.hidden must be a list of positive integers")
    return tuple(hidden)


def load_config(path: str) -> RunConfig:
    """Parse and validate a run configuration; every block's preconditions
    are checked at load time."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(doc, _TOP_LEVEL_KEYS, "config")

    env_block = doc.get("env")
    if not isinstance(env_block, dict) or "name" not in env_block:
        raise ConfigError("config requires an 'env' object with a 'name'")
    _check_keys(env_block, {"name", "parameters"}, "env")
    name = env_block["name"]
    if name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {name!r} (known: {', '.join(sorted(ENVIRONMENTS))})")
    params = env_block.get("parameters", {})
    if not isinstance(params, dict):
        raise ConfigError("env.parameters must be an object")
    spec = EnvSpec(name, params)
    try:
        make_env(spec)
    except ValueError as exc:
        raise ConfigError(f"invalid env parameters: {exc}") from exc

    horizon = None
    if "horizon" in doc:
        block = dict(doc["horizon"])
        horizon = _build_block(HorizonConfig, block, "horizon")

    policy_hidden = _hidden_sizes(doc.get("policy", {"hidden": [32, 32]}), "policy")
    critic_hidden = _hidden_sizes(doc.get("critic", {"hidden": [64, 64]}), "critic")
    penalty = _build_block(PenaltyConfig, dict(doc.get("penalty", {})), "penalty")
    search = _build_block(SearchConfig, dict(doc.get("search", {})), "search")
    settings_block = dict(doc.get("repair", {}))
    if "policy_hidden" in settings_block or "critic_hidden" in settings_block:
        raise ConfigError("architectures belong in the 'policy'/'critic' blocks, not 'repair'")
    settings_block["policy_hidden"] = policy_hidden
    settings_block["critic_hidden"] = critic_hidden
    settings = _build_block(RepairSettings, settings_block, "repair")

    out_dir = doc.get("out_dir", "out")
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    return RunConfig(spec, horizon, policy_hidden, critic_hidden, penalty, search, settings, out_dir, seed)


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    out_dir = args.out if args.out else config.out_dir
    seed = args.seed if args.seed is not None else config.seed
    penalty = dataclasses.replace(config.penalty, seed=seed)
    return dataclasses.replace(config, out_dir=out_dir, seed=seed, penalty=penalty)


def _load_policy(path: str, env: Environment) -> Network:
    net = load_checkpoint(path)
    if net.in_dim != env.state_dim or net.out_dim != env.action_dim:
        raise ConfigError(
            f"checkpoint {path} maps {net.in_dim} -> {net.out_dim} but the environment "
            f"needs {env.state_dim} -> {env.action_dim}"
        )
    return net


def _load_critic(path: str, env: Environment) -> Network:
    net = load_checkpoint(path)
    expected = env.state_dim + env.action_dim
    if net.in_dim != expected or net.out_dim != 1:
        raise ConfigError(
            f"critic checkpoint {path} maps {net.in_dim} -> {net.out_dim} but the environment "
            f"needs {expected} -> 1"
        )
    return net


def _dump_json(doc) -> str:
    return json.dumps(doc, sort_keys=True)


def write_json(path: str, doc) -> None:
    atomic_write_text(path, _dump_json(doc) + "\n")


def write_json_lines(path: str, docs) -> None:
    atomic_write_text(path, "".join(_dump_json(doc) + "\n" for doc in docs))


def read_json(path: str):
    with open(path) as handle:
        return json.load(handle)


def read_json_lines(path: str) -> list:
    with open(path) as handle:
        return [json.loads(line) for line in handle if line.strip()]


def _counterexample_docs(env, policy, cfg, states) -> list[dict]:
    return [
        {"initial_state": [float(v) for v in s0], "min_c": safety_value(env, policy, s0, cfg)}
        for s0 in states
    ]


def _verdict_doc(outcome) -> dict:
    return {
        "verdict": outcome.verdict,
        "counterexamples": [[float(v) for v in s0] for s0 in outcome.counterexamples],
        "grid_resolution": outcome.grid_resolution,
        "states_checked": outcome.states_checked,
    }


def report_to_dict(report: RepairReport) -> dict:
    """Deterministic report document; wall-clock timing is deliberately not
    part of the file so reruns with one seed are byte-identical."""
    return {
        "outer_iterations": report.outer_iterations,
        "counterexample_counts": list(report.counterexample_counts),
        "mean_return_before": report.mean_return_before,
        "mean_return_after": report.mean_return_after,
        "final_verdict": _verdict_doc(report.final_verdict),
        "retained_total": report.retained_total,
    }


def metrics_docs(report: RepairReport) -> list[dict]:
    return [
        {
            "iteration": rec.iteration,
            "live_counterexamples": rec.live_before,
            "retained": rec.retained,
            "new_found": rec.new_found,
            "mean_return": rec.mean_return,
            "min_critic_value": rec.min_critic_value,
            "penalty_weight": rec.penalty_weight,
            "inner_converged": rec.inner_converged,
            "inner_iterations": rec.inner_iterations,
        }
        for rec in report.iterations
    ]


def cmd_train_baseline(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    env = config.build_env()
    cfg = config.horizon_for(env)
    result = train_unsafe_baseline(env, cfg, config.penalty, config.search, config.seed, config.settings)
    path = os.path.join(config.out_dir, "baseline_policy.json")
    save_checkpoint(result.policy, path)
    print(
        f"baseline: unsafe policy written to {path} "
        f"({len(result.counterexamples)} counterexamples found, attempt {result.attempts})"
    )
    return EXIT_OK


def cmd_falsify(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    env = config.build_env()
    cfg = config.horizon_for(env)
    policy = _load_policy(args.policy, env)
    sc = config.search
    found = falsify(
        env,
        policy,
        cfg,
        sc.falsify_budget,
        derive_seed(config.seed, "falsify"),
        batch=sc.falsify_batch,
        descent_steps=sc.descent_steps,
        descent_top_k=sc.descent_top_k,
        descent_step_frac=sc.descent_step_frac,
        dedup_radius=sc.dedup_radius,
    )
    path = os.path.join(config.out_dir, "counterexamples.jsonl")
    write_json_lines(path, _counterexample_docs(env, policy, cfg, found))
    print(f"falsify: {len(found)} counterexamples written to {path}")
    return EXIT_COUNTEREXAMPLES if found else EXIT_OK


def cmd_verify(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    env = config.build_env()
    cfg = config.horizon_for(env)
    policy = _load_policy(args.policy, env)
    sc = config.search
    outcome = verify_grid(
        env, policy, cfg, sc.grid_resolution, grid_cap=sc.grid_cap, max_reported=sc.max_reported
    )
    path = os.path.join(config.out_dir, "counterexamples.jsonl")
    write_json_lines(path, _counterexample_docs(env, policy, cfg, outcome.counterexamples))
    print(
        f"verify: {outcome.verdict} at resolution {outcome.grid_resolution} "
        f"({outcome.states_checked} states checked), findings in {path}"
    )
    return EXIT_OK if outcome.verdict == SAFE_ON_GRID else EXIT_COUNTEREXAMPLES


def cmd_repair(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    env = config.build_env()
    cfg = config.horizon_for(env)
    policy = _load_policy(args.policy, env)
    if args.critic:
        critic = _load_critic(args.critic, env)
    else:
        critic = critic_for_env(env, config.critic_hidden, derive_seed(config.seed, "critic-init"))
    started = time.monotonic()
    policy, critic, report = repair(
        env, policy, critic, cfg, config.penalty, config.search, config.settings
    )
    elapsed = time.monotonic() - started
    save_checkpoint(policy, os.path.join(config.out_dir, "policy_repaired.json"))
    save_checkpoint(critic, os.path.join(config.out_dir, "critic_repaired.json"))
    write_json_lines(os.path.join(config.out_dir, "metrics.jsonl"), metrics_docs(report))
    write_json(os.path.join(config.out_dir, "report.json"), report_to_dict(report))
    verdict = report.final_verdict.verdict
    print(
        f"repair: {verdict} after {report.outer_iterations} outer iterations "
        f"({report.retained_total} counterexamples retained, {elapsed:.1f}s); "
        f"mean return {report.mean_return_before:.4f} -> {report.mean_return_after:.4f}"
    )
    return EXIT_OK if verdict == SAFE_ON_GRID else EXIT_BUDGET_EXHAUSTED


def cmd_eval(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    env = config.build_env()
    cfg = config.horizon_for(env)
    policy = _load_policy(args.policy, env)
    stats = evaluate_policy(
        env, policy, cfg, derive_seed(config.seed, "eval"), config.settings.eval_states
    )
    path = os.path.join(config.out_dir, "eval.json")
    write_json(path, stats)
    print(
        f"eval: mean return {stats['mean_return']:.4f}, safe fraction {stats['safe_fraction']:.3f}, "
        f"min safety value {stats['min_safety_value']:.4f} ({path})"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cgrepair",
        description="Counterexample-guided repair of unsafe policies for deterministic CMDPs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, needs_policy=False, optional_critic=False):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the run configuration JSON")
        if needs_policy:
            cmd.add_argument("--policy", required=True, help="policy checkpoint path")
        if optional_critic:
            cmd.add_argument("--critic", default=None, help="optional critic checkpoint path")
        cmd.add_argument("--out", default=None, help="output directory (overrides config)")
        cmd.add_argument("--seed", type=int, default=None, help="seed override")
        cmd.set_defaults(fn=fn)
        return cmd

    add("train-baseline", cmd_train_baseline, "train a return-greedy policy and check it is unsafe")
    add("falsify", cmd_falsify, "search the initial box for counterexamples", needs_policy=True)
    add("verify", cmd_verify, "exhaustively check a grid over the initial box", needs_policy=True)
    add("repair", cmd_repair, "run the full counterexample-guided repair loop",
        needs_policy=True, optional_critic=True)
    add("eval", cmd_eval, "return and safety statistics over the evaluation set", needs_policy=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BaselineTrainingFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BASELINE_FAILED
    except (ConfigError, CheckpointError, GridCapExceeded, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
