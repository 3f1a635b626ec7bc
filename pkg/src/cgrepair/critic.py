"""Safety-critic dataset construction, regression loss, and constrained repair.

The critic regresses the finite-horizon safety value: each visited state is
labelled with the minimum satisfaction value over the remainder of its
rollout.  The critic reads the joint (state, action) vector so that, during
policy updates, its constraint has a live gradient path through the action
the policy picks at a counterexample's initial state.  A configurable share
of rollouts perturbs the first action uniformly inside the action box, which
gives the regression real action variation instead of only on-policy pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .cmdp import Environment, HorizonConfig, SimulationDiverged, Trajectory, safety_value
from .nets import Network, _backward, _forward_cache, network_fingerprint, with_params

SOURCE_ROLLOUT = "rollout"
SOURCE_COUNTEREXAMPLE = "counterexample_trajectory"


class StaleDataset(ValueError):
    """The dataset was labelled under a different policy than the one in use."""


class NotACounterexample(ValueError):
    """A constrained state is not a counterexample under the current policy."""


@dataclass(frozen=True, eq=False)
class CriticSample:
    state: np.ndarray
    action: np.ndarray
    target: float
    source: str

    def __post_init__(self):
        object.__setattr__(self, "state", np.asarray(self.state, dtype=np.float64))
        object.__setattr__(self, "action", np.asarray(self.action, dtype=np.float64))
        if not np.isfinite(self.target):
            raise ValueError(f"sample target must be finite, got {self.target}")
        if self.source not in (SOURCE_ROLLOUT, SOURCE_COUNTEREXAMPLE):
            raise ValueError(f"unknown sample source {self.source!r}")

    @property
    def critic_input(self) -> np.ndarray:
        return np.concatenate([self.state, self.action])


@dataclass(frozen=True, eq=False)
class CriticDataset:
    """Regression samples plus the fingerprint of the labelling policy.

    The fingerprint pins the dataset to the exact policy parameters that
    generated the targets; consumers reject datasets whose fingerprint does
    not match the policy they are repairing against.
    """

    samples: tuple[CriticSample, ...]
    policy_fingerprint: str

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def inputs(self) -> np.ndarray:
        return np.stack([s.critic_input for s in self.samples])

    @cached_property
    def targets(self) -> np.ndarray:
        return np.array([s.target for s in self.samples])


def suffix_minimum(values: np.ndarray) -> np.ndarray:
    """For each index t, the minimum of values[t:]."""
    return np.minimum.accumulate(np.asarray(values, dtype=np.float64)[::-1])[::-1]


def _rollout(env: Environment, policy, s0, cfg: HorizonConfig, first_action=None) -> Trajectory:
    """Policy rollout, optionally forcing the first action (exploration)."""
    s = np.asarray(s0, dtype=np.float64).reshape(env.state_dim)
    states = np.empty((cfg.horizon + 1, env.state_dim))
    actions = np.empty((cfg.horizon, env.action_dim))
    states[0] = s
    for t in range(cfg.horizon):
        if t == 0 and first_action is not None:
            a = np.asarray(first_action, dtype=np.float64).reshape(env.action_dim)
        else:
            a = np.asarray(policy(states[t]), dtype=np.float64).reshape(env.action_dim)
        if not np.all(np.isfinite(a)):
            raise SimulationDiverged(t, f"non-finite action from initial state {s!r}")
        a = env.clip_action(a)
        nxt = np.asarray(env.transition(states[t], a), dtype=np.float64).reshape(env.state_dim)
        if not np.all(np.isfinite(nxt)):
            raise SimulationDiverged(t + 1, f"non-finite state from initial state {s!r}")
        actions[t] = a
        states[t + 1] = nxt
    return Trajectory(states, actions)


def _trajectory_samples(env: Environment, policy, traj: Trajectory, source: str) -> list[CriticSample]:
    cvals = np.array([float(env.satisfaction(s)) for s in traj.states])
    labels = suffix_minimum(cvals)
    samples = []
    horizon = traj.horizon
    for t in range(horizon + 1):
        if t < horizon:
            action = traj.actions[t]
        else:
            action = env.clip_action(np.asarray(policy(traj.states[t]), dtype=np.float64))
        samples.append(CriticSample(traj.states[t], action, float(labels[t]), source))
    return samples


def collect_dataset(
    env: Environment,
    policy: Network,
    cfg: HorizonConfig,
    n_rollouts: int,
    retained: Sequence[Trajectory],
    seed: int,
    explore_fraction: float = 0.5,
    retained_explore: int = 0,
) -> CriticDataset:
    """Roll out from uniform initial states and label every visited state with
    the minimum satisfaction value over the rest of its rollout.

    Retained unsafe trajectories are replayed under the current policy from
    their initial states and relabelled, so targets always reflect the policy
    under repair.  The first ``explore_fraction`` share of the fresh rollouts
    uses a uniformly drawn first action, labelled with the outcome of actually
    taking it; ``retained_explore`` adds that treatment to each retained
    initial state, which is what gives the regression genuine action
    sensitivity in the regions the repair constraints probe.
    """
    if n_rollouts < 1:
        raise ValueError(f"n_rollouts must be >= 1, got {n_rollouts}")
    if not (0.0 <= explore_fraction <= 1.0):
        raise ValueError(f"explore_fraction must lie in [0, 1], got {explore_fraction}")
    if retained_explore < 0:
        raise ValueError(f"retained_explore must be >= 0, got {retained_explore}")
    rng = np.random.default_rng(seed)
    starts = rng.uniform(env.initial_low, env.initial_high, size=(n_rollouts, env.state_dim))
    n_explore = int(round(explore_fraction * n_rollouts))
    samples: list[CriticSample] = []
    for i in range(n_rollouts):
        first = rng.uniform(env.action_low, env.action_high) if i < n_explore else None
        traj = _rollout(env, policy, starts[i], cfg, first_action=first)
        samples.extend(_trajectory_samples(env, policy, traj, SOURCE_ROLLOUT))
    for old in retained:
        replay = _rollout(env, policy, old.states[0], cfg)
        samples.extend(_trajectory_samples(env, policy, replay, SOURCE_COUNTEREXAMPLE))
        for _ in range(retained_explore):
            first = rng.uniform(env.action_low, env.action_high)
            probe = _rollout(env, policy, old.states[0], cfg, first_action=first)
            samples.extend(_trajectory_samples(env, policy, probe, SOURCE_COUNTEREXAMPLE))
    return CriticDataset(tuple(samples), network_fingerprint(policy))


def critic_loss(critic: Network, dataset: CriticDataset) -> float:
    """Mean squared error of the critic against the dataset targets."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate the loss of an empty dataset")
    outputs, _ = _forward_cache(critic, dataset.inputs)
    residual = outputs[:, 0] - dataset.targets
    return float(np.mean(residual * residual))


def _loss_and_grad(critic: Network, dataset: CriticDataset, params: np.ndarray):
    net = with_params(critic, params)
    outputs, cache = _forward_cache(net, dataset.inputs)
    residual = outputs[:, 0] - dataset.targets
    loss = float(np.mean(residual * residual))
    seed = (2.0 / len(dataset)) * residual[:, None]
    grad, _ = _backward(net, cache, seed)
    return loss, grad


@dataclass(frozen=True, eq=False)
class CriticRepairOutcome:
    """Repaired critic plus feasibility information.

    ``unsatisfied`` lists (input, critic value) pairs still above the margin
    when the solver budget ran out; it is empty whenever ``feasible`` is true.
    ``repaired_for`` carries the fingerprint of the counterexample set the
    repair was run against, for downstream freshness checks.
    """

    network: Network
    feasible: bool
    loss: float
    unsatisfied: tuple[tuple[np.ndarray, float], ...]
    history: tuple
    repaired_for: str | None = None


def repair_critic(
    critic: Network,
    dataset: CriticDataset,
    constrained_inputs: Sequence[np.ndarray],
    opt,
) -> CriticRepairOutcome:
    """Minimise the regression loss subject to the critic being at most
    ``-opt.constraint_margin`` at every constrained input.

    Fits the regression unconstrained first, then runs the shared l1 penalty
    solver on the negated loss with the recognition constraints.  Without the
    plain fitting phase a barely trained critic can satisfy the constraints
    while staying nearly flat in its action inputs, which starves the policy
    update of any usable gradient.  If the penalty budget is exhausted before
    all constraints hold, returns the best-found parameters together with the
    violations still outstanding.
    """
    from .repair import solve_l1_penalty  # shared solver lives with the repair loops

    margin = opt.constraint_margin
    inputs = [np.asarray(u, dtype=np.float64) for u in constrained_inputs]

    def objective(params: np.ndarray):
        loss, grad = _loss_and_grad(critic, dataset, params)
        return -loss, -grad

    def make_constraint(u: np.ndarray):
        def constraint(params: np.ndarray):
            net = with_params(critic, params)
            out, cache = _forward_cache(net, u[None, :])
            d_params, _ = _backward(net, cache, np.ones((1, 1)))
            return -float(out[0, 0]) - margin, -d_params

        return constraint

    solver_opt = opt.for_critic()
    prefit = solve_l1_penalty(objective, [], critic.params, solver_opt)
    result = solve_l1_penalty(objective, [make_constraint(u) for u in inputs], prefit.params, solver_opt)
    repaired = with_params(critic, result.params)
    unsatisfied = []
    for u in inputs:
        value = float(_forward_cache(repaired, u[None, :])[0][0, 0])
        if value > -margin:
            unsatisfied.append((u, value))
    return CriticRepairOutcome(
        network=repaired,
        feasible=result.feasible,
        loss=critic_loss(repaired, dataset),
        unsatisfied=tuple(unsatisfied),
        history=result.history,
    )


def repair_critic_for_policy(
    env: Environment,
    policy: Network,
    cfg: HorizonConfig,
    critic: Network,
    dataset: CriticDataset,
    counterexamples,
    opt,
    constrained_states: Sequence[np.ndarray] | None = None,
) -> CriticRepairOutcome:
    """Repair the critic against a counterexample set under the current policy.

    Constrains every retained initial state that is still a counterexample for
    the current policy (verified by simulation).  Passing ``constrained_states``
    explicitly overrides that selection; each one is then required to be a
    genuine counterexample, anything else is a caller bug.
    """
    if dataset.policy_fingerprint != network_fingerprint(policy):
        raise StaleDataset(
            "dataset was labelled under a different policy; regenerate it with collect_dataset"
        )
    if constrained_states is not None:
        states = [np.asarray(s, dtype=np.float64) for s in constrained_states]
        for s in states:
            if safety_value(env, policy, s, cfg) >= 0.0:
                raise NotACounterexample(
                    f"state {s!r} is not a counterexample under the current policy"
                )
    else:
        states = [
            e.initial_state
            for e in counterexamples.entries
            if safety_value(env, policy, e.initial_state, cfg) < 0.0
        ]
    inputs = [
        np.concatenate([s, env.clip_action(np.asarray(policy(s), dtype=np.float64))])
        for s in states
    ]
    outcome = repair_critic(critic, dataset, inputs, opt)
    return CriticRepairOutcome(
        network=outcome.network,
        feasible=outcome.feasible,
        loss=outcome.loss,
        unsatisfied=outcome.unsatisfied,
        history=outcome.history,
        repaired_for=counterexamples.fingerprint(),
    )
