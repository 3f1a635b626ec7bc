"""Constrained policy repair: l1 penalty solver, policy update, and both loops.

The inner loop alternates critic repair and policy update until every
retained counterexample stops being one; the outer loop alternates
counterexample search with the inner loop until grid verification passes or
the iteration budget runs out.  Counterexamples are retained forever; the
constraint set only grows.  All randomness flows through named sub-seeds of
the configured seed, and reductions happen in a fixed order, so runs are
bit-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .cmdp import Environment, HorizonConfig, return_of, simulate
from .critic import CriticDataset, collect_dataset, repair_critic_for_policy
from .nets import (
    BoxSquash,
    Network,
    _backward,
    _forward_cache,
    init_network,
    rollout_returns_and_grad,
    with_params,
)
from .search import (
    SAFE_ON_GRID,
    CounterexampleSet,
    SearchConfig,
    VerificationOutcome,
    confirm,
    falsify,
    verify_grid,
)
from .util import derive_seed


class SolverDiverged(RuntimeError):
    """The penalty solver hit a non-finite objective or gradient."""

    def __init__(self, round_index: int, step: int, detail: str):
        super().__init__(f"penalty solver diverged in round {round_index}, step {step}: {detail}")
        self.round_index = round_index
        self.step = step


class StaleCritic(ValueError):
    """The critic was not repaired against the counterexample set in use."""


class BaselineTrainingFailed(RuntimeError):
    """No unsafe baseline policy could be produced within the retry budget."""


@dataclass(frozen=True)
class PenaltyConfig:
    """Every solver constant: penalty schedule, step sizes, margins, seeds.

    ``constraint_margin`` is used on both sides of the critic: policy updates
    require the critic to be at least ``+margin`` at retained counterexamples
    while critic repair drives it to at most ``-margin`` there, leaving a
    separating band of twice the margin.
    """

    initial_penalty_weight: float = 1.0
    penalty_growth: float = 2.0
    max_penalty_rounds: int = 8
    inner_steps: int = 200
    learning_rate: float = 0.02
    constraint_margin: float = 0.05
    grad_clip: float = 10.0
    seed: int = 0
    minibatch_size: int = 64
    action_reg: float = 0.0
    critic_learning_rate: float | None = None
    critic_inner_steps: int | None = None

    def __post_init__(self):
        if self.initial_penalty_weight <= 0:
            raise ValueError(f"initial_penalty_weight must be > 0, got {self.initial_penalty_weight}")
        if self.penalty_growth <= 1:
            raise ValueError(f"penalty_growth must be > 1, got {self.penalty_growth}")
        if self.max_penalty_rounds < 1:
            raise ValueError(f"max_penalty_rounds must be >= 1, got {self.max_penalty_rounds}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.constraint_margin < 0:
            raise ValueError(f"constraint_margin must be >= 0, got {self.constraint_margin}")
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.minibatch_size < 1:
            raise ValueError(f"minibatch_size must be >= 1, got {self.minibatch_size}")
        if self.action_reg < 0:
            raise ValueError(f"action_reg must be >= 0, got {self.action_reg}")
        if self.critic_learning_rate is not None and self.critic_learning_rate <= 0:
            raise ValueError("critic_learning_rate must be > 0 when given")
        if self.critic_inner_steps is not None and self.critic_inner_steps < 1:
            raise ValueError("critic_inner_steps must be >= 1 when given")

    def for_critic(self) -> "PenaltyConfig":
        """Solver settings for critic repairs (falls back to the policy ones)."""
        return replace(
            self,
            learning_rate=self.critic_learning_rate or self.learning_rate,
            inner_steps=self.critic_inner_steps or self.inner_steps,
            critic_learning_rate=None,
            critic_inner_steps=None,
        )


@dataclass(frozen=True)
class RepairSettings:
    """Loop budgets and bookkeeping sizes for the repair pipeline."""

    max_inner_iterations: int = 20
    max_outer_iterations: int = 50
    eval_states: int = 128
    critic_rollouts: int = 32
    explore_fraction: float = 0.5
    retained_explore: int = 4
    baseline_retries: int = 5
    baseline_steps: int | None = None
    policy_hidden: tuple[int, ...] = (32, 32)
    critic_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.max_inner_iterations < 1 or self.max_outer_iterations < 1:
            raise ValueError("iteration budgets must be >= 1")
        if self.eval_states < 1 or self.critic_rollouts < 1:
            raise ValueError("eval_states and critic_rollouts must be >= 1")
        if not (0.0 <= self.explore_fraction <= 1.0):
            raise ValueError("explore_fraction must lie in [0, 1]")
        if self.retained_explore < 0:
            raise ValueError("retained_explore must be >= 0")
        if self.baseline_retries < 1:
            raise ValueError("baseline_retries must be >= 1")
        if self.baseline_steps is not None and self.baseline_steps < 1:
            raise ValueError("baseline_steps must be >= 1 when given")


@dataclass(frozen=True)
class PenaltyRound:
    round_index: int
    penalty_weight: float
    objective: float
    max_violation: float
    grad_norms: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class SolveResult:
    params: np.ndarray
    feasible: bool
    history: tuple[PenaltyRound, ...]

    @property
    def final_penalty_weight(self) -> float:
        return self.history[-1].penalty_weight if self.history else 0.0


ValueAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


def solve_l1_penalty(
    objective: ValueAndGrad,
    constraints: Sequence[ValueAndGrad],
    start: np.ndarray,
    opt: PenaltyConfig,
) -> SolveResult:
    """Maximise ``objective`` subject to every constraint being >= 0.

    Gradient ascent on ``objective(p) - weight * sum_i max(0, -g_i(p))`` with
    the weight multiplied by ``penalty_growth`` after every round in which a
    constraint is still violated, for at most ``max_penalty_rounds`` rounds.
    The total step is clipped to ``grad_clip`` in the 2-norm.  Both callables
    return (value, gradient).
    """
    params = np.asarray(start, dtype=np.float64).copy()
    weight = opt.initial_penalty_weight
    history: list[PenaltyRound] = []
    feasible = True
    for round_index in range(opt.max_penalty_rounds):
        norms = []
        for step in range(opt.inner_steps):
            value, grad = objective(params)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise SolverDiverged(round_index, step, f"objective value {value!r}")
            total = grad
            for g in constraints:
                g_value, g_grad = g(params)
                if not np.isfinite(g_value) or not np.all(np.isfinite(g_grad)):
                    raise SolverDiverged(round_index, step, "non-finite constraint")
                if g_value < 0.0:
                    total = total + weight * g_grad
            norm = float(np.linalg.norm(total))
            if norm > opt.grad_clip:
                total = total * (opt.grad_clip / norm)
                norm = opt.grad_clip
            norms.append(norm)
            params = params + opt.learning_rate * total
        final_value, _ = objective(params)
        violations = [max(0.0, -g(params)[0]) for g in constraints]
        worst = max(violations, default=0.0)
        feasible = worst == 0.0
        history.append(PenaltyRound(round_index, weight, float(final_value), worst, tuple(norms)))
        if feasible:
            break
        weight *= opt.penalty_growth
    return SolveResult(params, feasible, tuple(history))


def _uniform_starts(env: Environment, rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.uniform(env.initial_low, env.initial_high, size=(count, env.state_dim))


def _state_stats(env: Environment, inflate: float = 2.0, floor: float = 1.0):
    centre = (env.initial_low + env.initial_high) / 2.0
    half = np.maximum((env.initial_high - env.initial_low) * (inflate / 2.0), floor)
    return centre, half


def policy_for_env(env: Environment, hidden: Sequence[int], seed: int) -> Network:
    """Box-squashed policy with first-layer input standardisation derived from
    the initial box (inflated, since rollouts leave it)."""
    centre, half = _state_stats(env)
    return init_network(
        (env.state_dim, *hidden, env.action_dim),
        BoxSquash(tuple(env.action_low), tuple(env.action_high)),
        seed=seed,
        input_center=centre,
        input_halfwidth=half,
    )


def critic_for_env(env: Environment, hidden: Sequence[int], seed: int) -> Network:
    """Scalar critic over the joint (state, action) input, standardised the
    same way as the policy; action coordinates use the action box."""
    centre, half = _state_stats(env)
    action_centre = (env.action_low + env.action_high) / 2.0
    action_half = (env.action_high - env.action_low) / 2.0
    return init_network(
        (env.state_dim + env.action_dim, *hidden, 1),
        seed=seed,
        input_center=np.concatenate([centre, action_centre]),
        input_halfwidth=np.concatenate([half, action_half]),
    )


def _return_objective(env: Environment, policy: Network, cfg: HorizonConfig, opt: PenaltyConfig, seed: int):
    """Estimator of the expected return over the initial box: a fresh uniform
    minibatch of initial states per solver step, differentiated through the
    rollout.  ``opt.action_reg`` adds the saturation guard on the policy's
    output-layer pre-activations."""
    rng = np.random.default_rng(seed)

    def objective(params: np.ndarray):
        net = with_params(policy, params)
        starts = _uniform_starts(env, rng, opt.minibatch_size)
        returns, penalties, grad = rollout_returns_and_grad(
            env, net, starts, cfg, action_reg=opt.action_reg
        )
        value = float(returns.mean()) - opt.action_reg * float(penalties.mean())
        return value, grad / opt.minibatch_size

    return objective


@dataclass(frozen=True, eq=False)
class PolicyUpdateResult:
    network: Network
    feasible: bool
    history: tuple[PenaltyRound, ...]

    @property
    def final_penalty_weight(self) -> float:
        return self.history[-1].penalty_weight if self.history else 0.0


def update_policy(
    env: Environment,
    policy: Network,
    critic: Network,
    counterexamples: CounterexampleSet,
    cfg: HorizonConfig,
    opt: PenaltyConfig,
    critic_repaired_for: str,
) -> PolicyUpdateResult:
    """One constrained ascent on the estimated expected return.

    Constraints require the critic, evaluated at each retained counterexample's
    initial state joined with the action the policy picks there, to reach at
    least the constraint margin.  ``critic_repaired_for`` must be the
    fingerprint of the counterexample set the critic was last repaired
    against; anything else means the critic is stale.
    """
    if critic_repaired_for != counterexamples.fingerprint():
        raise StaleCritic(
            "critic was repaired against a different counterexample set; repair it first"
        )
    if critic.in_dim != env.state_dim + env.action_dim:
        raise ValueError(
            f"critic input dimension {critic.in_dim} does not match state+action "
            f"dimension {env.state_dim + env.action_dim}"
        )
    state_dim = env.state_dim
    margin = opt.constraint_margin
    objective = _return_objective(env, policy, cfg, opt, derive_seed(opt.seed, "minibatch"))

    def make_constraint(s0: np.ndarray):
        def constraint(params: np.ndarray):
            net = with_params(policy, params)
            raw, cache = _forward_cache(net, s0[None, :])
            act = np.clip(raw, env.action_low, env.action_high)
            mask = (act == raw).astype(np.float64)
            joint = np.concatenate([s0, act[0]])
            out, critic_cache = _forward_cache(critic, joint[None, :])
            _, d_input = _backward(critic, critic_cache, np.ones((1, 1)))
            d_action = d_input[:, state_dim:] * mask
            d_params, _ = _backward(net, cache, d_action)
            return float(out[0, 0]) - margin, d_params

        return constraint

    constraints = [make_constraint(e.initial_state) for e in counterexamples.entries]
    result = solve_l1_penalty(objective, constraints, policy.params, opt)
    return PolicyUpdateResult(with_params(policy, result.params), result.feasible, result.history)


@dataclass(frozen=True)
class InnerIterationRecord:
    index: int
    live_before: int
    critic_feasible: bool
    policy_feasible: bool
    penalty_weight: float


@dataclass(frozen=True, eq=False)
class InnerLoopResult:
    """Outcome of one run of the counterexample-removal loop."""

    policy: Network
    critic: Network
    converged: bool
    iterations: int
    live_initial_states: tuple[np.ndarray, ...]
    records: tuple[InnerIterationRecord, ...]


def remove_counterexamples(
    env: Environment,
    policy: Network,
    critic: Network,
    counterexamples: CounterexampleSet,
    cfg: HorizonConfig,
    opt: PenaltyConfig,
    settings: RepairSettings | None = None,
    include_retained_trajectories: bool = True,
) -> InnerLoopResult:
    """Alternate critic repair and policy update until no retained initial
    state is a counterexample any more, or the iteration budget runs out.

    Each iteration regenerates the critic dataset under the current policy.
    With ``include_retained_trajectories`` (the default) every retained unsafe
    trajectory is replayed into the dataset, which keeps the critic honest
    about previously seen failures; disabling it reproduces the forgetting
    failure mode where policy and critic chase each other without progress.
    """
    if len(counterexamples) == 0:
        raise ValueError("remove_counterexamples requires a nonempty counterexample set")
    settings = settings or RepairSettings()
    records: list[InnerIterationRecord] = []
    live = counterexamples.live_entries(env, policy, cfg)
    iterations = 0
    while live and iterations < settings.max_inner_iterations:
        iterations += 1
        iter_opt = replace(opt, seed=derive_seed(opt.seed, f"inner:{iterations}"))
        retained = counterexamples.witnesses() if include_retained_trajectories else []
        dataset = collect_dataset(
            env,
            policy,
            cfg,
            settings.critic_rollouts,
            retained,
            derive_seed(iter_opt.seed, "critic-data"),
            explore_fraction=settings.explore_fraction,
            retained_explore=settings.retained_explore,
        )
        critic_outcome = repair_critic_for_policy(
            env, policy, cfg, critic, dataset, counterexamples, iter_opt
        )
        critic = critic_outcome.network
        update = update_policy(
            env, policy, critic, counterexamples, cfg, iter_opt,
            critic_repaired_for=critic_outcome.repaired_for,
        )
        policy = update.network
        records.append(
            InnerIterationRecord(
                index=iterations,
                live_before=len(live),
                critic_feasible=critic_outcome.feasible,
                policy_feasible=update.feasible,
                penalty_weight=update.final_penalty_weight,
            )
        )
        live = counterexamples.live_entries(env, policy, cfg)
    return InnerLoopResult(
        policy=policy,
        critic=critic,
        converged=not live,
        iterations=iterations,
        live_initial_states=tuple(e.initial_state for e in live),
        records=tuple(records),
    )


@dataclass(frozen=True)
class OuterIterationRecord:
    iteration: int
    live_before: int
    retained: int
    new_found: int
    mean_return: float
    min_critic_value: float | None
    penalty_weight: float | None
    inner_converged: bool
    inner_iterations: int


@dataclass(frozen=True, eq=False)
class RepairReport:
    outer_iterations: int
    counterexample_counts: tuple[int, ...]
    mean_return_before: float
    mean_return_after: float
    final_verdict: VerificationOutcome
    wall_clock: float
    iterations: tuple[OuterIterationRecord, ...]
    retained_total: int


def evaluate_policy(
    env: Environment,
    policy: Network,
    cfg: HorizonConfig,
    seed: int,
    count: int,
):
    """Mean return, safe fraction, and minimum safety value over a fixed
    uniform evaluation set of initial states."""
    rng = np.random.default_rng(seed)
    starts = _uniform_starts(env, rng, count)
    returns = []
    worst = np.inf
    safe = 0
    for s0 in starts:
        traj = simulate(env, policy, s0, cfg)
        returns.append(return_of(env, traj, cfg))
        value = min(float(env.satisfaction(s)) for s in traj.states)
        worst = min(worst, value)
        if value >= 0.0:
            safe += 1
    return {
        "mean_return": float(np.mean(returns)),
        "safe_fraction": safe / count,
        "min_safety_value": float(worst),
        "states": count,
    }


def _min_critic_value(env: Environment, policy: Network, critic: Network, entries) -> float | None:
    if not entries:
        return None
    worst = np.inf
    for entry in entries:
        s0 = entry.initial_state
        joint = np.concatenate([s0, env.clip_action(np.asarray(policy(s0), dtype=np.float64))])
        worst = min(worst, float(_forward_cache(critic, joint[None, :])[0][0, 0]))
    return worst


def _find_counterexamples(
    env: Environment,
    policy: Network,
    cfg: HorizonConfig,
    search_cfg: SearchConfig,
    seed: int,
):
    """Falsify first; only when the falsifier comes up empty, fall back to the
    grid verifier.  Returns (initial states, grid outcome or None)."""
    found = falsify(
        env,
        policy,
        cfg,
        search_cfg.falsify_budget,
        seed,
        batch=search_cfg.falsify_batch,
        descent_steps=search_cfg.descent_steps,
        descent_top_k=search_cfg.descent_top_k,
        descent_step_frac=search_cfg.descent_step_frac,
        dedup_radius=search_cfg.dedup_radius,
    )
    if found:
        return found, None
    outcome = verify_grid(
        env,
        policy,
        cfg,
        search_cfg.grid_resolution,
        grid_cap=search_cfg.grid_cap,
        max_reported=search_cfg.max_reported,
    )
    return list(outcome.counterexamples), outcome


def repair(
    env: Environment,
    policy: Network,
    critic: Network,
    cfg: HorizonConfig,
    opt: PenaltyConfig,
    search_cfg: SearchConfig,
    settings: RepairSettings | None = None,
) -> tuple[Network, Network, RepairReport]:
    """Full counterexample-guided repair of a policy.

    Alternates counterexample search (falsifier, then grid) with the removal
    loop, retaining every counterexample ever found.  Terminates successfully
    when the falsifier finds nothing, grid verification passes, and every
    retained initial state is fixed; otherwise stops at the outer budget with
    an unsafe verdict listing the live counterexamples.
    """
    settings = settings or RepairSettings()
    started = time.monotonic()
    mean_before = evaluate_policy(env, policy, cfg, derive_seed(opt.seed, "eval"), settings.eval_states)
    retained = CounterexampleSet(search_cfg.dedup_radius)
    records: list[OuterIterationRecord] = []
    counts: list[int] = []
    final_verdict: VerificationOutcome | None = None

    def absorb(found, iteration):
        inserted = 0
        for s0 in found:
            witness = confirm(env, policy, cfg, s0)
            if witness is not None and retained.insert(s0, witness, iteration):
                inserted += 1
        return inserted

    def run_grid():
        return verify_grid(
            env,
            policy,
            cfg,
            search_cfg.grid_resolution,
            grid_cap=search_cfg.grid_cap,
            max_reported=search_cfg.max_reported,
        )

    found, outcome = _find_counterexamples(env, policy, cfg, search_cfg, derive_seed(opt.seed, "falsify:0"))
    absorb(found, 0)
    outer = 0
    while True:
        live = retained.live_entries(env, policy, cfg)
        if not live:
            if outcome is None:
                # Falsifier is quiet and every retained state is fixed; the
                # grid has the final say for the current policy.
                outcome = run_grid()
                absorb(list(outcome.counterexamples), outer)
                live = retained.live_entries(env, policy, cfg)
            if not live:
                final_verdict = outcome
                break
        if outer >= settings.max_outer_iterations:
            break
        outer += 1
        outer_opt = replace(opt, seed=derive_seed(opt.seed, f"outer:{outer}"))
        counts.append(len(live))
        inner = remove_counterexamples(env, policy, critic, retained, cfg, outer_opt, settings)
        policy, critic = inner.policy, inner.critic
        found, outcome = _find_counterexamples(
            env, policy, cfg, search_cfg, derive_seed(opt.seed, f"falsify:{outer}")
        )
        new_found = absorb(found, outer)
        stats = evaluate_policy(env, policy, cfg, derive_seed(opt.seed, "eval"), settings.eval_states)
        last = inner.records[-1] if inner.records else None
        records.append(
            OuterIterationRecord(
                iteration=outer,
                live_before=counts[-1],
                retained=len(retained),
                new_found=new_found,
                mean_return=stats["mean_return"],
                min_critic_value=_min_critic_value(env, policy, critic, retained.entries),
                penalty_weight=last.penalty_weight if last else None,
                inner_converged=inner.converged,
                inner_iterations=inner.iterations,
            )
        )
    if final_verdict is None:
        final_verdict = run_grid()
    mean_after = evaluate_policy(env, policy, cfg, derive_seed(opt.seed, "eval"), settings.eval_states)
    report = RepairReport(
        outer_iterations=outer,
        counterexample_counts=tuple(counts),
        mean_return_before=mean_before["mean_return"],
        mean_return_after=mean_after["mean_return"],
        final_verdict=final_verdict,
        wall_clock=time.monotonic() - started,
        iterations=tuple(records),
        retained_total=len(retained),
    )
    return policy, critic, report


@dataclass(frozen=True, eq=False)
class BaselineResult:
    policy: Network
    counterexamples: tuple[np.ndarray, ...]
    attempts: int


def train_unsafe_baseline(
    env: Environment,
    cfg: HorizonConfig,
    opt: PenaltyConfig,
    search_cfg: SearchConfig,
    seed: int,
    settings: RepairSettings | None = None,
) -> BaselineResult:
    """Train a policy by pure return maximisation and check that it is unsafe.

    Repair needs an unsafe starting point; this manufactures one.  If an
    attempt accidentally comes out safe (no counterexample found by the
    falsifier or the grid), training retries with a shifted seed, up to the
    configured bound.
    """
    settings = settings or RepairSettings()
    for attempt in range(settings.baseline_retries):
        policy = policy_for_env(env, settings.policy_hidden, derive_seed(seed, f"baseline-init:{attempt}"))
        attempt_opt = replace(
            opt,
            seed=derive_seed(seed, f"baseline-opt:{attempt}"),
            inner_steps=settings.baseline_steps or opt.inner_steps,
        )
        objective = _return_objective(
            env, policy, cfg, attempt_opt, derive_seed(attempt_opt.seed, "minibatch")
        )
        result = solve_l1_penalty(objective, [], policy.params, attempt_opt)
        policy = with_params(policy, result.params)
        found = falsify(
            env,
            policy,
            cfg,
            search_cfg.falsify_budget,
            derive_seed(seed, f"baseline-falsify:{attempt}"),
            batch=search_cfg.falsify_batch,
            descent_steps=search_cfg.descent_steps,
            descent_top_k=search_cfg.descent_top_k,
            descent_step_frac=search_cfg.descent_step_frac,
            dedup_radius=search_cfg.dedup_radius,
        )
        if not found:
            outcome = verify_grid(
                env,
                policy,
                cfg,
                search_cfg.grid_resolution,
                grid_cap=search_cfg.grid_cap,
                max_reported=search_cfg.max_reported,
            )
            found = list(outcome.counterexamples)
        if found:
            return BaselineResult(policy, tuple(found), attempt + 1)
    raise BaselineTrainingFailed(
        f"all {settings.baseline_retries} baseline attempts came out safe; "
        "the environment may not tempt the return objective into unsafety"
    )
