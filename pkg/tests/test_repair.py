"""Policy update, counterexample removal, the outer loop, and baseline training."""

import dataclasses

import numpy as np
import pytest

import cgrepair as cg
from cgrepair.cmdp import HorizonConfig
from cgrepair.envs import make_thermostat
from cgrepair.repair import (
    BaselineTrainingFailed,
    PenaltyConfig,
    RepairSettings,
    StaleCritic,
    remove_counterexamples,
    update_policy,
)
from cgrepair.search import SAFE_ON_GRID, CounterexampleSet, SearchConfig

from conftest import (
    THERMOSTAT_PENALTY,
    THERMOSTAT_SEARCH,
    THERMOSTAT_SETTINGS,
    fresh_critic,
    make_eager_policy,
    make_zero_policy,
    retained_set,
)


class TestUpdatePolicy:
    def test_empty_set_is_pure_return_maximisation(self, thermostat):
        cfg = HorizonConfig(10, 0.99)
        policy = make_zero_policy(thermostat)
        policy = cg.init_network((1, 8, 1), cg.BoxSquash((-1.0,), (1.0,)), seed=4)
        empty = CounterexampleSet(0.001)
        opt = PenaltyConfig(learning_rate=0.02, inner_steps=150, max_penalty_rounds=3, seed=1)
        before = cg.evaluate_policy(thermostat, policy, cfg, 7, 32)["mean_return"]
        result = update_policy(
            thermostat, policy, fresh_critic(thermostat), empty, cfg, opt,
            critic_repaired_for=empty.fingerprint(),
        )
        after = cg.evaluate_policy(thermostat, result.network, cfg, 7, 32)["mean_return"]
        assert result.feasible
        assert after > before

    def test_inactive_constraint_matches_unconstrained_run(self, thermostat):
        cfg = HorizonConfig(10, 0.99)
        policy = cg.init_network((1, 8, 1), cg.BoxSquash((-1.0,), (1.0,)), seed=4)
        heat = make_eager_policy(thermostat, seed=0)
        cx = retained_set(thermostat, heat, thermostat.default_horizon, [np.array([20.0])])
        assert len(cx) == 1
        # critic strongly positive everywhere: the constraint never activates
        critic = fresh_critic(thermostat)
        bumped = critic.params.copy()
        bumped[-1] = 50.0
        critic = cg.with_params(critic, bumped)
        opt = PenaltyConfig(learning_rate=0.01, inner_steps=60, max_penalty_rounds=2, seed=3)
        constrained = update_policy(
            thermostat, policy, critic, cx, cfg, opt, critic_repaired_for=cx.fingerprint()
        )
        empty = CounterexampleSet(0.001)
        unconstrained = update_policy(
            thermostat, policy, critic, empty, cfg, opt, critic_repaired_for=empty.fingerprint()
        )
        assert constrained.feasible
        assert np.array_equal(constrained.network.params, unconstrained.network.params)

    def test_stale_critic_fingerprint_rejected(self, thermostat):
        cfg = HorizonConfig(5, 0.99)
        policy = make_zero_policy(thermostat)
        heat = make_eager_policy(thermostat, seed=0)
        cx = retained_set(thermostat, heat, thermostat.default_horizon, [np.array([20.0])])
        with pytest.raises(StaleCritic):
            update_policy(
                thermostat, policy, fresh_critic(thermostat), cx, cfg,
                PenaltyConfig(), critic_repaired_for="somebody else",
            )

    def test_critic_dimension_checked(self, thermostat):
        cfg = HorizonConfig(5, 0.99)
        empty = CounterexampleSet(0.001)
        with pytest.raises(ValueError, match="critic input dimension"):
            update_policy(
                thermostat, make_zero_policy(thermostat), cg.zero_network((5, 1)), empty, cfg,
                PenaltyConfig(), critic_repaired_for=empty.fingerprint(),
            )


class TestRemoveCounterexamples:
    def test_empty_set_rejected(self, thermostat):
        with pytest.raises(ValueError, match="nonempty"):
            remove_counterexamples(
                thermostat, make_zero_policy(thermostat), fresh_critic(thermostat),
                CounterexampleSet(0.001), HorizonConfig(5, 0.99), PenaltyConfig(),
            )

    def test_already_safe_policy_exits_without_changes(self, thermostat):
        cfg = thermostat.default_horizon
        heat = make_eager_policy(thermostat, seed=0)
        cx = retained_set(thermostat, heat, cfg, [np.array([20.0])])
        safe = make_zero_policy(thermostat)
        critic = fresh_critic(thermostat)
        result = remove_counterexamples(thermostat, safe, critic, cx, cfg, PenaltyConfig())
        assert result.converged
        assert result.iterations == 0
        assert np.array_equal(result.policy.params, safe.params)
        assert np.array_equal(result.critic.params, critic.params)

    def test_thermostat_fixture_converges(self, thermostat, thermostat_baseline):
        cfg = thermostat.default_horizon
        policy = thermostat_baseline.policy
        cx = retained_set(thermostat, policy, cfg, thermostat_baseline.counterexamples)
        assert len(cx) >= 1
        result = remove_counterexamples(
            thermostat, policy, fresh_critic(thermostat), cx, cfg,
            THERMOSTAT_PENALTY, THERMOSTAT_SETTINGS,
        )
        assert result.converged
        assert result.iterations <= THERMOSTAT_SETTINGS.max_inner_iterations
        for entry in cx.entries:
            assert cg.confirm(thermostat, result.policy, cfg, entry.initial_state) is None

    def test_mislabelling_critic_needs_at_least_two_iterations(self, thermostat, thermostat_baseline):
        # critic biased to +50 calls every counterexample safe, so the first
        # policy update is unconstrained in effect and cannot fix anything;
        # the loop must repair the critic again before it makes progress
        cfg = thermostat.default_horizon
        policy = thermostat_baseline.policy
        cx = retained_set(thermostat, policy, cfg, thermostat_baseline.counterexamples)
        critic = fresh_critic(thermostat)
        bumped = critic.params.copy()
        bumped[-1] = 50.0
        critic = cg.with_params(critic, bumped)
        opt = dataclasses.replace(THERMOSTAT_PENALTY, critic_inner_steps=40, max_penalty_rounds=3)
        result = remove_counterexamples(thermostat, policy, critic, cx, cfg, opt, THERMOSTAT_SETTINGS)
        assert result.converged
        assert result.iterations >= 2
        for entry in cx.entries:
            assert cg.confirm(thermostat, result.policy, cfg, entry.initial_state) is None


class TestTrainUnsafeBaseline:
    def test_thermostat_baseline_is_unsafe(self, thermostat, thermostat_baseline):
        assert len(thermostat_baseline.counterexamples) >= 1
        cfg = thermostat.default_horizon
        for s0 in thermostat_baseline.counterexamples:
            assert cg.safety_value(thermostat, thermostat_baseline.policy, s0, cfg) < 0.0

    def test_pointmass_baseline_is_unsafe(self, pointmass, pointmass_baseline):
        assert len(pointmass_baseline.counterexamples) >= 1
        cfg = pointmass.default_horizon
        for s0 in pointmass_baseline.counterexamples:
            assert cg.safety_value(pointmass, pointmass_baseline.policy, s0, cfg) < 0.0

    def test_retry_exhaustion_on_trivially_safe_env(self, thermostat):
        # widen the band so far that no within-horizon rollout can leave it
        safe_env = make_thermostat({"safe_low": -1e6, "safe_high": 1e6})
        settings = RepairSettings(baseline_steps=5, baseline_retries=2)
        with pytest.raises(BaselineTrainingFailed):
            cg.train_unsafe_baseline(
                safe_env, HorizonConfig(5, 0.99), PenaltyConfig(inner_steps=5),
                SearchConfig(falsify_budget=32, grid_resolution=1.0), seed=0, settings=settings,
            )


class TestRepairLoop:
    def test_safe_seed_policy_exits_immediately(self, thermostat):
        safe = make_zero_policy(thermostat)
        policy, critic, report = cg.repair(
            thermostat, safe, fresh_critic(thermostat), thermostat.default_horizon,
            THERMOSTAT_PENALTY, THERMOSTAT_SEARCH, THERMOSTAT_SETTINGS,
        )
        assert report.final_verdict.verdict == SAFE_ON_GRID
        assert report.outer_iterations == 0
        assert report.counterexample_counts == ()
        assert report.mean_return_before == report.mean_return_after
        assert np.array_equal(policy.params, safe.params)

    def test_thermostat_end_to_end(self, thermostat, thermostat_baseline):
        policy, critic, report = cg.repair(
            thermostat, thermostat_baseline.policy, fresh_critic(thermostat),
            thermostat.default_horizon, THERMOSTAT_PENALTY, THERMOSTAT_SEARCH, THERMOSTAT_SETTINGS,
        )
        assert report.final_verdict.verdict == SAFE_ON_GRID
        assert report.outer_iterations <= THERMOSTAT_SETTINGS.max_outer_iterations
        # retained set only grows
        sizes = [rec.retained for rec in report.iterations]
        assert sizes == sorted(sizes)
        assert report.retained_total == (sizes[-1] if sizes else 0)
        # exit soundness: the verdict reproduces
        again = cg.verify_grid(
            thermostat, policy, thermostat.default_horizon, THERMOSTAT_SEARCH.grid_resolution
        )
        assert again.verdict == SAFE_ON_GRID
        assert again.states_checked == report.final_verdict.states_checked

    def test_budget_exhaustion_reports_unsafe(self, thermostat, thermostat_baseline):
        # one outer iteration with a deliberately useless solver cannot finish
        weak = dataclasses.replace(
            THERMOSTAT_PENALTY, learning_rate=1e-12, inner_steps=2, max_penalty_rounds=1,
            critic_inner_steps=2,
        )
        settings = dataclasses.replace(
            THERMOSTAT_SETTINGS, max_outer_iterations=1, max_inner_iterations=1, eval_states=8,
            critic_rollouts=2,
        )
        policy, critic, report = cg.repair(
            thermostat, thermostat_baseline.policy, fresh_critic(thermostat),
            thermostat.default_horizon, weak, THERMOSTAT_SEARCH, settings,
        )
        assert report.final_verdict.verdict == "unsafe"
        assert report.outer_iterations == 1
        assert len(report.final_verdict.counterexamples) >= 1
