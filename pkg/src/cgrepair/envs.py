"""Built-in benchmark environments and the name registry.

Both environments are differentiable and deliberately calibrated so that a
purely return-greedy policy is drawn toward the boundary of the safe set:
the thermostat's reward target sits close under the hot limit, and the
point mass's straight line to the goal clips a circular obstacle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .cmdp import Environment, HorizonConfig

THERMOSTAT_DEFAULTS: dict[str, float] = {
    "heat_rate": 0.5,
    "target": 23.0,
    "action_weight": 0.01,
    "safe_low": 15.0,
    "safe_high": 25.0,
    "initial_low": 18.0,
    "initial_high": 22.0,
    "action_bound": 1.0,
    "horizon": 20.0,
    "discount": 0.99,
}

POINTMASS_DEFAULTS: dict[str, float] = {
    "momentum": 0.95,
    "accel": 0.1,
    "dt": 0.1,
    "goal_x": 1.0,
    "goal_y": 1.0,
    "obstacle_x": 0.5,
    "obstacle_y": 0.5,
    "obstacle_radius": 0.2,
    "initial_extent": 0.2,
    "action_bound": 1.0,
    "horizon": 40.0,
    "discount": 0.99,
}


@dataclass(frozen=True)
class EnvSpec:
    """Registry name plus parameter overrides, as read from config files."""

    name: str
    parameters: Mapping[str, float] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.parameters is None:
            object.__setattr__(self, "parameters", {})


def _merge_params(defaults: dict[str, float], params: Mapping[str, float] | None, env_name: str) -> dict[str, float]:
    merged = dict(defaults)
    if params:
        unknown = sorted(set(params) - set(defaults))
        if unknown:
            raise ValueError(f"unknown {env_name} parameters: {', '.join(unknown)}")
        for key, value in params.items():
            merged[key] = float(value)
    return merged


def make_thermostat(params: Mapping[str, float] | None = None) -> Environment:
    """1-D heating environment.

    Temperature x follows x' = x + heat_rate * u with u in
    [-action_bound, action_bound]; reward -(x - target)^2 - action_weight * u^2;
    safe band [safe_low, safe_high]; initial box [initial_low, initial_high].
    """
    p = _merge_params(THERMOSTAT_DEFAULTS, params, "thermostat")
    if p["safe_low"] >= p["safe_high"]:
        raise ValueError(f"empty safe band: safe_low={p['safe_low']} >= safe_high={p['safe_high']}")
    if p["initial_low"] > p["initial_high"]:
        raise ValueError("initial_low exceeds initial_high")
    if p["heat_rate"] <= 0 or p["action_bound"] <= 0:
        raise ValueError("heat_rate and action_bound must be positive")
    heat = p["heat_rate"]
    target = p["target"]
    weight = p["action_weight"]
    lo, hi = p["safe_low"], p["safe_high"]

    def transition(s, a):
        return s + heat * a

    def reward(s, a):
        x = s[..., 0]
        u = a[..., 0]
        return -((x - target) ** 2) - weight * u * u

    def satisfaction(s):
        x = s[..., 0]
        return np.minimum(x - lo, hi - x)

    def transition_jac_state(s, a):
        return np.broadcast_to(np.array([[1.0]]), s.shape[:-1] + (1, 1))

    def transition_jac_action(s, a):
        return np.broadcast_to(np.array([[heat]]), s.shape[:-1] + (1, 1))

    def reward_grad_state(s, a):
        return -2.0 * (s - target)

    def reward_grad_action(s, a):
        return -2.0 * weight * a

    return Environment(
        name="thermostat",
        state_dim=1,
        action_low=np.array([-p["action_bound"]]),
        action_high=np.array([p["action_bound"]]),
        initial_low=np.array([p["initial_low"]]),
        initial_high=np.array([p["initial_high"]]),
        transition=transition,
        reward=reward,
        satisfaction=satisfaction,
        transition_jac_state=transition_jac_state,
        transition_jac_action=transition_jac_action,
        reward_grad_state=reward_grad_state,
        reward_grad_action=reward_grad_action,
        default_horizon=HorizonConfig(int(p["horizon"]), p["discount"]),
    )


def make_pointmass(params: Mapping[str, float] | None = None) -> Environment:
    """Planar point mass with velocity damping and a circular obstacle.

    State (px, py, vx, vy); v' = momentum * v + accel * a, p' = p + dt * v'.
    Reward is the negative squared distance of the position to the goal.
    The satisfaction value is the distance to the obstacle centre minus its
    radius, so states strictly inside the obstacle are unsafe.
    """
    p = _merge_params(POINTMASS_DEFAULTS, params, "pointmass")
    if p["obstacle_radius"] <= 0:
        raise ValueError("obstacle_radius must be positive")
    if not (0.0 < p["momentum"] <= 1.0):
        raise ValueError("momentum must lie in (0, 1]")
    if p["accel"] <= 0 or p["dt"] <= 0 or p["action_bound"] <= 0:
        raise ValueError("accel, dt and action_bound must be positive")
    if p["initial_extent"] < 0:
        raise ValueError("initial_extent must be nonnegative")
    mom, acc, dt = p["momentum"], p["accel"], p["dt"]
    goal = np.array([p["goal_x"], p["goal_y"]])
    centre = np.array([p["obstacle_x"], p["obstacle_y"]])
    radius = p["obstacle_radius"]

    def transition(s, a):
        v = mom * s[..., 2:4] + acc * a
        pos = s[..., 0:2] + dt * v
        return np.concatenate([pos, v], axis=-1)

    def reward(s, a):
        dx = s[..., 0] - goal[0]
        dy = s[..., 1] - goal[1]
        return -(dx * dx + dy * dy)

    def satisfaction(s):
        dx = s[..., 0] - centre[0]
        dy = s[..., 1] - centre[1]
        return np.sqrt(dx * dx + dy * dy) - radius

    jac_state = np.array(
        [
            [1.0, 0.0, dt * mom, 0.0],
            [0.0, 1.0, 0.0, dt * mom],
            [0.0, 0.0, mom, 0.0],
            [0.0, 0.0, 0.0, mom],
        ]
    )
    jac_action = np.array(
        [
            [dt * acc, 0.0],
            [0.0, dt * acc],
            [acc, 0.0],
            [0.0, acc],
        ]
    )

    def transition_jac_state(s, a):
        return np.broadcast_to(jac_state, s.shape[:-1] + (4, 4))

    def transition_jac_action(s, a):
        return np.broadcast_to(jac_action, s.shape[:-1] + (4, 2))

    def reward_grad_state(s, a):
        grad = np.zeros_like(s)
        grad[..., 0] = -2.0 * (s[..., 0] - goal[0])
        grad[..., 1] = -2.0 * (s[..., 1] - goal[1])
        return grad

    def reward_grad_action(s, a):
        return np.zeros_like(a)

    extent = p["initial_extent"]
    return Environment(
        name="pointmass",
        state_dim=4,
        action_low=np.array([-p["action_bound"], -p["action_bound"]]),
        action_high=np.array([p["action_bound"], p["action_bound"]]),
        initial_low=np.array([0.0, 0.0, 0.0, 0.0]),
        initial_high=np.array([extent, extent, 0.0, 0.0]),
        transition=transition,
        reward=reward,
        satisfaction=satisfaction,
        transition_jac_state=transition_jac_state,
        transition_jac_action=transition_jac_action,
        reward_grad_state=reward_grad_state,
        reward_grad_action=reward_grad_action,
        default_horizon=HorizonConfig(int(p["horizon"]), p["discount"]),
    )


ENVIRONMENTS: dict[str, Callable[[Mapping[str, float] | None], Environment]] = {
    "thermostat": make_thermostat,
    "pointmass": make_pointmass,
}


def make_env(spec: EnvSpec) -> Environment:
    """Resolve an :class:`EnvSpec` through the registry."""
    try:
        builder = ENVIRONMENTS[spec.name]
    except KeyError:
        known = ", ".join(sorted(ENVIRONMENTS))
        raise ValueError(f"unknown environment {spec.name!r} (known: {known})") from None
    return builder(spec.parameters)
