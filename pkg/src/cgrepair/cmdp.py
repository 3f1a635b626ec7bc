"""Deterministic finite-horizon CMDP core.

Environments are plain data: a transition map, a reward, and a satisfaction
function whose sign defines the safe set (``satisfaction(s) >= 0`` exactly on
safe states).  Rollouts, returns, trajectory safety, and the simulation-based
safety value are pure functions of their inputs, so they are safe to evaluate
concurrently over different initial states.  All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Vector = np.ndarray
PolicyFn = Callable[[Vector], Vector]


class SimulationDiverged(RuntimeError):
    """A rollout produced a non-finite state or action.

    ``step`` is the index at which the non-finite value appeared.
    """

    def __init__(self, step: int, detail: str):
        super().__init__(f"simulation diverged at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class HorizonConfig:
    """Number of rollout steps and the reward discount factor."""

    horizon: int
    discount: float

    def __post_init__(self):
        if not isinstance(self.horizon, int) or isinstance(self.horizon, bool):
            raise ValueError(f"horizon must be an integer, got {self.horizon!r}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not (0.0 <= self.discount <= 1.0):
            raise ValueError(f"discount must lie in [0, 1], got {self.discount}")


@dataclass(frozen=True, eq=False)
class Environment:
    """A deterministic CMDP over ``R^state_dim`` with a box action space.

    ``transition`` and ``reward`` must stay finite on every state reachable
    within the configured horizon.  The Jacobian callables return exact
    derivatives at a single (state, action) pair; the built-in environments
    additionally broadcast over a leading batch axis, which the batched
    rollout differentiation relies on.
    """

    name: str
    state_dim: int
    action_low: Vector
    action_high: Vector
    initial_low: Vector
    initial_high: Vector
    transition: Callable[[Vector, Vector], Vector]
    reward: Callable[[Vector, Vector], float]
    satisfaction: Callable[[Vector], float]
    transition_jac_state: Callable[[Vector, Vector], Vector]
    transition_jac_action: Callable[[Vector, Vector], Vector]
    reward_grad_state: Callable[[Vector, Vector], Vector]
    reward_grad_action: Callable[[Vector, Vector], Vector]
    default_horizon: HorizonConfig

    def __post_init__(self):
        for field in ("action_low", "action_high", "initial_low", "initial_high"):
            object.__setattr__(self, field, np.asarray(getattr(self, field), dtype=np.float64))
        if self.state_dim < 1:
            raise ValueError(f"state_dim must be >= 1, got {self.state_dim}")
        if self.action_low.shape != self.action_high.shape or self.action_low.ndim != 1:
            raise ValueError("action bounds must be 1-D vectors of equal length")
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action_low must be strictly below action_high componentwise")
        if self.initial_low.shape != (self.state_dim,) or self.initial_high.shape != (self.state_dim,):
            raise ValueError("initial bounds must be state_dim vectors")
        if not np.all(self.initial_low <= self.initial_high):
            raise ValueError("initial_low must not exceed initial_high componentwise")

    @property
    def action_dim(self) -> int:
        return self.action_low.size

    def clip_action(self, action: Vector) -> Vector:
        return np.clip(action, self.action_low, self.action_high)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """An alternating state/action sequence: T+1 states and T actions."""

    states: Vector  # (T+1, state_dim)
    actions: Vector  # (T, action_dim)

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.float64))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.float64))
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("states and actions must be 2-D arrays")
        if len(self.states) != len(self.actions) + 1:
            raise ValueError(
                f"expected one more state than actions, got {len(self.states)} states "
                f"and {len(self.actions)} actions"
            )

    @property
    def horizon(self) -> int:
        return len(self.actions)


def simulate(env: Environment, policy: PolicyFn, s0: Vector, cfg: HorizonConfig) -> Trajectory:
    """Roll the policy out from ``s0`` for ``cfg.horizon`` steps.

    Actions are clamped into the environment's action box before being
    applied.  Raises :class:`SimulationDiverged` if a non-finite state or
    action appears mid-rollout.
    """
    s = np.asarray(s0, dtype=np.float64).reshape(env.state_dim)
    if not np.all(np.isfinite(s)):
        raise SimulationDiverged(0, f"initial state {s!r} is not finite")
    states = np.empty((cfg.horizon + 1, env.state_dim))
    actions = np.empty((cfg.horizon, env.action_dim))
    states[0] = s
    for t in range(cfg.horizon):
        a = np.asarray(policy(states[t]), dtype=np.float64).reshape(env.action_dim)
        if not np.all(np.isfinite(a)):
            raise SimulationDiverged(t, f"policy produced non-finite action {a!r}")
        a = env.clip_action(a)
        nxt = np.asarray(env.transition(states[t], a), dtype=np.float64).reshape(env.state_dim)
        if not np.all(np.isfinite(nxt)):
            raise SimulationDiverged(t + 1, f"transition produced non-finite state {nxt!r}")
        actions[t] = a
        states[t + 1] = nxt
    return Trajectory(states, actions)


def return_of(env: Environment, traj: Trajectory, cfg: HorizonConfig) -> float:
    """Discounted reward sum over the trajectory's steps."""
    total = 0.0
    disc = 1.0
    for t in range(traj.horizon):
        total += disc * float(env.reward(traj.states[t], traj.actions[t]))
        disc *= cfg.discount
    return total


def is_safe(env: Environment, traj: Trajectory) -> bool:
    """True iff every state of the trajectory, including the first and last,
    has nonnegative satisfaction value."""
    for s in traj.states:
        if float(env.satisfaction(s)) < 0.0:
            return False
    return True


def safety_value(env: Environment, policy: PolicyFn, s0: Vector, cfg: HorizonConfig) -> float:
    """Minimum satisfaction value along the policy's rollout from ``s0``.

    Nonnegative exactly when the rollout is safe; negative values mean the
    rollout visits an unsafe state.
    """
    traj = simulate(env, policy, s0, cfg)
    worst = np.inf
    for s in traj.states:
        worst = min(worst, float(env.satisfaction(s)))
    return worst
