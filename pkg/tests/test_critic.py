"""Critic dataset labels, regression loss, and constrained repair."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import cgrepair as cg
from cgrepair.cmdp import HorizonConfig, SimulationDiverged
from cgrepair.critic import (
    SOURCE_COUNTEREXAMPLE,
    SOURCE_ROLLOUT,
    CriticDataset,
    CriticSample,
    NotACounterexample,
    StaleDataset,
    suffix_minimum,
)
from cgrepair.repair import PenaltyConfig

from conftest import fresh_critic, make_constant_policy, make_eager_policy, retained_set


class TestSuffixMinimum:
    @pytest.mark.parametrize(
        "values,expected",
        [
            ([5, 5, 5, 5], [5, 5, 5, 5]),
            ([1, 0.5, 0, -0.5], [-0.5, -0.5, -0.5, -0.5]),
            ([1, -1, 2, 3], [-1, -1, 2, 3]),
        ],
    )
    def test_hand_cases(self, values, expected):
        assert np.array_equal(suffix_minimum(np.array(values, dtype=float)), expected)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_matches_loop_oracle(self, values):
        got = suffix_minimum(np.array(values))
        for t in range(len(values)):
            assert got[t] == min(values[t:])


class TestCollectDataset:
    def test_labels_are_suffix_minima_of_rollouts(self, thermostat):
        policy = make_constant_policy(thermostat, [1.0])
        cfg = HorizonConfig(4, 0.99)
        ds = cg.collect_dataset(thermostat, policy, cfg, 3, [], seed=0, explore_fraction=0.0)
        assert len(ds) == 3 * 5
        per_rollout = [ds.samples[i * 5 : (i + 1) * 5] for i in range(3)]
        for chunk in per_rollout:
            cvals = [float(thermostat.satisfaction(s.state)) for s in chunk]
            assert np.array_equal([s.target for s in chunk], suffix_minimum(np.array(cvals)))
            assert all(s.source == SOURCE_ROLLOUT for s in chunk)

    def test_actions_recorded_alongside_states(self, thermostat):
        policy = make_constant_policy(thermostat, [1.0])
        cfg = HorizonConfig(3, 0.99)
        ds = cg.collect_dataset(thermostat, policy, cfg, 1, [], seed=0, explore_fraction=0.0)
        assert all(np.array_equal(s.action, [1.0]) for s in ds.samples)
        assert ds.inputs.shape == (4, 2)

    def test_exploratory_first_actions_lie_in_box(self, pointmass):
        policy = make_constant_policy(pointmass, [1.0, 1.0])
        cfg = HorizonConfig(3, 0.99)
        ds = cg.collect_dataset(pointmass, policy, cfg, 8, [], seed=1, explore_fraction=1.0)
        firsts = [ds.samples[i * 4].action for i in range(8)]
        firsts = np.stack(firsts)
        assert np.all(firsts >= pointmass.action_low) and np.all(firsts <= pointmass.action_high)
        # uniform draws differ from the policy's constant output
        assert not np.allclose(firsts, 1.0)

    def test_retained_trajectories_replayed_under_current_policy(self, thermostat):
        heat = make_constant_policy(thermostat, [1.0])
        cool = make_constant_policy(thermostat, [-1.0])
        cfg = HorizonConfig(3, 0.99)
        witness = cg.simulate(thermostat, heat, np.array([24.0]), cfg)
        ds = cg.collect_dataset(thermostat, cool, cfg, 1, [witness], seed=0, explore_fraction=0.0)
        replayed = [s for s in ds.samples if s.source == SOURCE_COUNTEREXAMPLE]
        assert len(replayed) == 4
        assert float(replayed[0].state[0]) == 24.0
        # relabelled under the cooling policy: 24 -> 23.5 -> 23 -> 22.5 stays safe
        assert all(s.target > 0 for s in replayed)
        assert np.array_equal(replayed[0].action, [-1.0])

    def test_fingerprint_tracks_policy(self, thermostat):
        cfg = HorizonConfig(3, 0.99)
        a = make_constant_policy(thermostat, [1.0])
        b = make_constant_policy(thermostat, [0.5])
        ds_a = cg.collect_dataset(thermostat, a, cfg, 2, [], seed=0)
        ds_b = cg.collect_dataset(thermostat, b, cfg, 2, [], seed=0)
        assert ds_a.policy_fingerprint == cg.network_fingerprint(a)
        assert ds_a.policy_fingerprint != ds_b.policy_fingerprint

    def test_diverged_rollout_propagates(self, thermostat):
        def blow_up(s, a):
            with np.errstate(over="ignore"):
                return s * 1e200

        exploding = dataclasses.replace(thermostat, transition=blow_up)
        policy = make_constant_policy(exploding, [1.0])
        with pytest.raises(SimulationDiverged, match="initial state"):
            cg.collect_dataset(exploding, policy, HorizonConfig(5, 0.99), 2, [], seed=0)

    def test_rollout_count_validated(self, thermostat):
        policy = make_constant_policy(thermostat, [0.0])
        with pytest.raises(ValueError, match="n_rollouts"):
            cg.collect_dataset(thermostat, policy, HorizonConfig(3, 0.99), 0, [], seed=0)


class TestCriticLoss:
    def test_perfect_fit_is_zero(self):
        critic = cg.zero_network((2, 1))
        samples = tuple(
            CriticSample(np.array([x]), np.array([0.0]), 0.0, SOURCE_ROLLOUT) for x in (1.0, 2.0)
        )
        assert cg.critic_loss(critic, CriticDataset(samples, "fp")) == 0.0

    def test_constant_zero_critic_single_sample(self):
        critic = cg.zero_network((1, 1))
        ds = CriticDataset((CriticSample(np.array([3.0]), np.array([]), 2.0, SOURCE_ROLLOUT),), "fp")
        assert cg.critic_loss(critic, ds) == 4.0

    def test_constant_output_closed_form(self):
        critic = cg.zero_network((1, 1))
        params = critic.params.copy()
        params[1] = 0.75  # bias-only critic outputs b everywhere
        critic = cg.with_params(critic, params)
        ds = CriticDataset(
            (
                CriticSample(np.array([0.0]), np.array([]), 1.0, SOURCE_ROLLOUT),
                CriticSample(np.array([0.0]), np.array([]), -1.0, SOURCE_ROLLOUT),
            ),
            "fp",
        )
        b = 0.75
        assert cg.critic_loss(critic, ds) == pytest.approx(((b - 1) ** 2 + (b + 1) ** 2) / 2)

    def test_empty_dataset_rejected(self):
        critic = cg.zero_network((1, 1))
        with pytest.raises(ValueError, match="empty"):
            cg.critic_loss(critic, CriticDataset((), "fp"))

    def test_loss_nonnegative_on_random_data(self):
        rng = np.random.default_rng(2)
        critic = cg.init_network((3, 8, 1), seed=5)
        samples = tuple(
            CriticSample(rng.normal(size=2), rng.normal(size=1), float(rng.normal()), SOURCE_ROLLOUT)
            for _ in range(20)
        )
        assert cg.critic_loss(critic, CriticDataset(samples, "fp")) >= 0.0


def affine_fixture_oracle(margin=0.01):
    """Grid search over (w, b) for: min (b-1)^2 s.t. w + b <= -margin."""
    w = np.linspace(-2.0, 2.0, 401)
    b = np.linspace(-2.0, 2.0, 401)
    ww, bb = np.meshgrid(w, b)
    feasible = ww + bb <= -margin
    losses = (bb - 1.0) ** 2
    return float(losses[feasible].min())


class TestRepairCritic:
    def test_no_constraints_is_plain_regression(self):
        critic = cg.zero_network((1, 1))
        ds = CriticDataset((CriticSample(np.array([0.0]), np.array([]), 1.0, SOURCE_ROLLOUT),), "fp")
        opt = PenaltyConfig(learning_rate=0.1, inner_steps=300, max_penalty_rounds=3)
        out = cg.repair_critic(critic, ds, [], opt)
        assert out.feasible
        assert out.loss < 1e-6

    def test_already_feasible_start_keeps_parameters(self):
        # critic output -1 everywhere, dataset already fit exactly: nothing moves
        critic = cg.zero_network((1, 1))
        params = critic.params.copy()
        params[1] = -1.0
        critic = cg.with_params(critic, params)
        ds = CriticDataset((CriticSample(np.array([0.0]), np.array([]), -1.0, SOURCE_ROLLOUT),), "fp")
        opt = PenaltyConfig(learning_rate=0.05, inner_steps=50, max_penalty_rounds=3, constraint_margin=0.01)
        out = cg.repair_critic(critic, ds, [np.array([0.0])], opt)
        assert out.feasible
        assert np.array_equal(out.network.params, params)

    def test_affine_fixture_matches_grid_search_oracle(self):
        critic = cg.zero_network((1, 1))
        ds = CriticDataset((CriticSample(np.array([0.0]), np.array([]), 1.0, SOURCE_ROLLOUT),), "fp")
        opt = PenaltyConfig(
            learning_rate=0.02, inner_steps=400, max_penalty_rounds=8, constraint_margin=0.01
        )
        out = cg.repair_critic(critic, ds, [np.array([1.0])], opt)
        assert out.feasible
        value = float(cg.forward(out.network, np.array([1.0]))[0])
        assert value <= -0.01
        assert abs(out.loss - affine_fixture_oracle()) <= 1e-2

    def test_infeasible_budget_reports_unsatisfied(self):
        critic = cg.zero_network((1, 1))
        ds = CriticDataset((CriticSample(np.array([0.0]), np.array([]), 1.0, SOURCE_ROLLOUT),), "fp")
        opt = PenaltyConfig(learning_rate=1e-9, inner_steps=2, max_penalty_rounds=2, constraint_margin=0.5)
        out = cg.repair_critic(critic, ds, [np.array([0.0])], opt)
        assert not out.feasible
        assert len(out.unsatisfied) == 1
        state, value = out.unsatisfied[0]
        assert value > -0.5


class TestRepairCriticForPolicy:
    def test_stale_dataset_rejected(self, thermostat):
        cfg = HorizonConfig(5, 0.99)
        heat = make_eager_policy(thermostat, seed=0)
        other = make_constant_policy(thermostat, [0.5])
        ds = cg.collect_dataset(thermostat, other, cfg, 2, [], seed=0)
        cx = retained_set(thermostat, heat, cfg, [np.array([22.0])])
        with pytest.raises(StaleDataset):
            cg.repair_critic_for_policy(
                thermostat, heat, cfg, fresh_critic(thermostat), ds, cx, PenaltyConfig()
            )

    def test_explicit_safe_state_is_a_caller_bug(self, thermostat):
        cfg = HorizonConfig(5, 0.99)
        heat = make_eager_policy(thermostat, seed=0)
        ds = cg.collect_dataset(thermostat, heat, cfg, 2, [], seed=0)
        cx = retained_set(thermostat, heat, cfg, [np.array([22.0])])
        with pytest.raises(NotACounterexample):
            cg.repair_critic_for_policy(
                thermostat,
                heat,
                cfg,
                fresh_critic(thermostat),
                ds,
                cx,
                PenaltyConfig(),
                # from 16, five heating steps stay well inside the band
                constrained_states=[np.array([16.0])],
            )

    def test_constrains_live_counterexamples_to_margin(self, thermostat):
        cfg = thermostat.default_horizon
        heat = make_eager_policy(thermostat, seed=0)
        states = [np.array([x]) for x in (18.0, 20.0, 22.0)]
        cx = retained_set(thermostat, heat, cfg, states)
        assert len(cx) == 3
        ds = cg.collect_dataset(thermostat, heat, cfg, 16, cx.witnesses(), seed=3)
        opt = PenaltyConfig(critic_learning_rate=0.02, critic_inner_steps=200)
        out = cg.repair_critic_for_policy(thermostat, heat, cfg, fresh_critic(thermostat), ds, cx, opt)
        assert out.feasible
        assert out.repaired_for == cx.fingerprint()
        for entry in cx.entries:
            joint = np.concatenate(
                [entry.initial_state, cg.forward(heat, entry.initial_state)]
            )
            assert float(cg.forward(out.network, joint)[0]) <= -opt.constraint_margin
