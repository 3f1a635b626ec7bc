"""Shared fixtures: environments, frozen fixture configs, and cheap unsafe policies."""

from __future__ import annotations

import numpy as np
import pytest

import cgrepair as cg
from cgrepair.repair import PenaltyConfig, RepairSettings
from cgrepair.search import SearchConfig
from cgrepair.util import derive_seed

# Frozen pipeline settings for the two seeded end-to-end fixtures.  The
# thermostat runs with the library defaults; the point mass needs a gentler
# policy step (its reward has no action cost, so aggressive ascent saturates
# the squashed outputs and starves every later gradient) plus a penalty head
# start so the safety pressure competes with the return pull from the first
# round.
THERMOSTAT_PENALTY = PenaltyConfig(seed=0)
THERMOSTAT_SEARCH = SearchConfig(grid_resolution=0.1)
THERMOSTAT_SETTINGS = RepairSettings(baseline_steps=300)

POINTMASS_PENALTY = PenaltyConfig(
    seed=0,
    learning_rate=0.002,
    initial_penalty_weight=32.0,
    inner_steps=100,
    max_penalty_rounds=8,
    minibatch_size=32,
    critic_learning_rate=0.02,
    critic_inner_steps=150,
)
POINTMASS_SEARCH = SearchConfig(grid_resolution=0.02)
POINTMASS_SETTINGS = RepairSettings(baseline_steps=100)


@pytest.fixture(scope="session")
def thermostat():
    return cg.make_thermostat()


@pytest.fixture(scope="session")
def pointmass():
    return cg.make_pointmass()


def make_zero_policy(env):
    """Policy that outputs the action-box midpoint everywhere."""
    return cg.zero_network(
        (env.state_dim, env.action_dim),
        cg.BoxSquash(tuple(env.action_low), tuple(env.action_high)),
    )


def make_constant_policy(env, action):
    """Affine-output policy pinned to a constant action (clamped by simulate)."""
    net = cg.zero_network((env.state_dim, env.action_dim))
    params = net.params.copy()
    params[-env.action_dim :] = np.asarray(action, dtype=np.float64)
    return cg.with_params(net, params)


def make_eager_policy(env, seed=0, bias=2.0, hidden=(32, 32)):
    """Randomly initialised policy with the output bias shifted so it pushes
    hard toward positive actions; unsafe on both built-in environments."""
    net = cg.policy_for_env(env, hidden, seed)
    params = net.params.copy()
    params[-env.action_dim :] += bias
    return cg.with_params(net, params)


@pytest.fixture(scope="session")
def thermostat_baseline(thermostat):
    """Seeded unsafe thermostat baseline, trained once per session."""
    return cg.train_unsafe_baseline(
        thermostat,
        thermostat.default_horizon,
        THERMOSTAT_PENALTY,
        THERMOSTAT_SEARCH,
        seed=0,
        settings=THERMOSTAT_SETTINGS,
    )


@pytest.fixture(scope="session")
def pointmass_baseline(pointmass):
    """Seeded unsafe point-mass baseline, trained once per session."""
    return cg.train_unsafe_baseline(
        pointmass,
        pointmass.default_horizon,
        POINTMASS_PENALTY,
        POINTMASS_SEARCH,
        seed=0,
        settings=POINTMASS_SETTINGS,
    )


def fresh_critic(env, seed=None, hidden=(64, 64)):
    """Critic initialised the same way cmd_repair does for config seed 0."""
    if seed is None:
        seed = derive_seed(0, "critic-init")
    return cg.critic_for_env(env, hidden, seed)


def retained_set(env, policy, cfg, states, dedup_radius=1e-3):
    """Build a counterexample set from confirmed initial states."""
    found = cg.CounterexampleSet(dedup_radius)
    for s0 in states:
        witness = cg.confirm(env, policy, cfg, s0)
        if witness is not None:
            found.insert(s0, witness, 0)
    return found
