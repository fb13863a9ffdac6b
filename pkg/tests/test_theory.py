"""Tabular MDP bound checks: analytic single-state and two-state cases
where the bound is exactly attained, solver cross-validation, and the
randomized campaign."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyberdo.theory import (PruneRule, TabularMdp, bellman_backup, check_lemma,
                            check_theorem, delta_max, full_rule,
                            optimal_values, policy_eval, pruned_greedy,
                            random_mdp, random_policy, random_rule,
                            run_campaign, value_iteration)


def single_state_mdp(rewards, discount=0.9):
    """One state, self-loops, one reward per action."""
    rewards = np.asarray(rewards, dtype=np.float64)
    n = rewards.shape[0]
    return TabularMdp(transitions=np.ones((1, n, 1)),
                      rewards=rewards[None, :], discount=discount)


class TestAnalyticCases:
    def test_single_state_value_is_geometric_sum(self):
        mdp = single_state_mdp([1.0, 0.25], discount=0.9)
        v, q = optimal_values(mdp)
        assert v[0] == pytest.approx(1.0 / 0.1, abs=1e-9)
        assert q[0, 0] == pytest.approx(1.0 + 0.9 * 10.0, abs=1e-9)
        assert q[0, 1] == pytest.approx(0.25 + 0.9 * 10.0, abs=1e-9)

    def test_single_state_pruning_attains_bound_exactly(self):
        # Q gap between the actions is d; forcing the worse action forever
        # loses exactly d / (1 - gamma), so the bound is tight.
        d = 0.75
        mdp = single_state_mdp([1.0, 1.0 - d], discount=0.9)
        rule = PruneRule(np.array([[False, True]]))
        report = check_theorem(mdp, rule)
        assert report.delta_max == pytest.approx(d, abs=1e-9)
        assert report.bound.lhs == pytest.approx(d / 0.1, abs=1e-7)
        assert report.holds

    def test_discount_zero_reduces_to_reward_gaps(self):
        rewards = np.array([[0.3, -0.2, 0.9], [0.5, 0.1, -0.4]])
        transitions = np.tile(np.eye(2)[:, None, :], (1, 3, 1))
        mdp = TabularMdp(transitions=transitions, rewards=rewards,
                         discount=0.0)
        v, q = optimal_values(mdp)
        np.testing.assert_allclose(v, rewards.max(axis=1), atol=1e-12)
        np.testing.assert_allclose(q, rewards, atol=1e-12)
        rule = PruneRule(np.array([[True, True, False], [False, True, True]]))
        assert delta_max(q, rule) == pytest.approx(0.6)  # state 0 loses 0.9-0.3
        report = check_theorem(mdp, rule)
        assert report.bound.lhs == pytest.approx(0.6, abs=1e-10)
        assert report.holds

    def test_full_rule_loses_nothing(self):
        rng = np.random.default_rng(0)
        mdp = random_mdp(rng)
        report = check_theorem(mdp, full_rule(mdp))
        assert report.delta_max == pytest.approx(0.0, abs=1e-12)
        assert report.bound.lhs <= 1e-7

    def test_lemma_zero_for_greedy_policy(self):
        rng = np.random.default_rng(1)
        mdp = random_mdp(rng)
        _, q = optimal_values(mdp)
        greedy = pruned_greedy(q, full_rule(mdp))
        report = check_lemma(mdp, greedy)
        assert report.eps_q <= 1e-10
        assert report.bound.lhs <= 1e-7


class TestSolvers:
    def test_value_iteration_agrees_with_policy_eval(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            mdp = random_mdp(rng, max_states=8, max_actions=4)
            v_star, q_star = optimal_values(mdp)
            # Bellman fixed point to solver precision.
            backed, _ = bellman_backup(mdp, v_star)
            np.testing.assert_allclose(backed, v_star, atol=1e-9)
            # Greedy policy evaluation reproduces V*.
            greedy = np.argmax(np.where(mdp.action_mask, q_star, -np.inf),
                               axis=1)
            np.testing.assert_allclose(policy_eval(mdp, greedy), v_star,
                                       atol=1e-8)

    def test_value_iteration_iteration_count_single_state(self):
        mdp = single_state_mdp([2.0], discount=0.5)
        v, _, iterations = value_iteration(mdp, tol=1e-12)
        assert v[0] == pytest.approx(4.0, abs=1e-10)
        assert iterations < 200

    def test_policy_eval_matches_direct_simulation(self):
        # Two-state chain with deterministic transitions has a closed form.
        transitions = np.zeros((2, 1, 2))
        transitions[0, 0, 1] = 1.0
        transitions[1, 0, 1] = 1.0
        rewards = np.array([[1.0], [0.0]])
        mdp = TabularMdp(transitions=transitions, rewards=rewards,
                         discount=0.5)
        v = policy_eval(mdp, np.zeros(2, dtype=np.int64))
        np.testing.assert_allclose(v, [1.0, 0.0], atol=1e-12)

    def test_policy_eval_rejects_illegal_policy(self):
        mdp = single_state_mdp([1.0, 2.0])
        mdp.action_mask[0, 1] = False
        with pytest.raises(ValueError):
            policy_eval(mdp, np.array([1]))

    def test_pruned_greedy_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            q = rng.normal(size=(5, 4))
            allowed = rng.random((5, 4)) < 0.6
            for s in range(5):
                if not allowed[s].any():
                    allowed[s, 0] = True
            picks = pruned_greedy(q, PruneRule(allowed))
            for s in range(5):
                legal = [a for a in range(4) if allowed[s, a]]
                best = max(legal, key=lambda a: (q[s, a], -a))
                assert picks[s] == best

    def test_pruned_greedy_ties_to_lowest_index(self):
        q = np.array([[1.0, 1.0, 1.0]])
        assert pruned_greedy(q, PruneRule(np.array([[True, True, True]])))[0] == 0
        assert pruned_greedy(q, PruneRule(np.array([[False, True, True]])))[0] == 1


class TestValidation:
    def test_mdp_shape_and_distribution_checks(self):
        with pytest.raises(ValueError):
            TabularMdp(transitions=np.ones((2, 2)), rewards=np.ones((2, 2)),
                       discount=0.9)
        with pytest.raises(ValueError):
            TabularMdp(transitions=np.ones((2, 2, 2)),
                       rewards=np.ones((2, 2)), discount=0.9)
        with pytest.raises(ValueError):
            TabularMdp(transitions=np.ones((1, 1, 1)),
                       rewards=np.ones((1, 1)), discount=1.0)
        with pytest.raises(ValueError):
            TabularMdp(transitions=np.ones((1, 2, 1)),
                       rewards=np.ones((1, 1)), discount=0.9)

    def test_mask_must_keep_an_action(self):
        with pytest.raises(ValueError):
            TabularMdp(transitions=np.ones((1, 2, 1)) * 0.5,
                       rewards=np.ones((1, 2)), discount=0.9,
                       action_mask=np.array([[False, False]]))

    def test_prune_rule_validation(self):
        mdp = single_state_mdp([1.0, 2.0])
        with pytest.raises(ValueError):
            PruneRule(np.array([[True]])).validate(mdp)
        with pytest.raises(ValueError):
            PruneRule(np.array([[False, False]])).validate(mdp)
        masked = single_state_mdp([1.0, 2.0])
        masked.action_mask[0, 0] = False
        with pytest.raises(ValueError):
            PruneRule(np.array([[True, True]])).validate(masked)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_random_generators_produce_valid_instances(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng)
        assert 2 <= mdp.n_states <= 20 and 2 <= mdp.n_actions <= 6
        rule = random_rule(rng, mdp)
        rule.validate(mdp)
        policy = random_policy(rng, mdp)
        states = np.arange(mdp.n_states)
        assert mdp.action_mask[states, policy].all()


class TestCampaign:
    def test_small_campaign_all_hold(self):
        report = run_campaign(n_instances=20, seed=123)
        assert len(report.rows) == 20
        assert report.all_hold
        assert report.violations == 0
        discounts = {row.discount for row in report.rows}
        assert discounts == {0.9, 0.99}
        for row in report.rows:
            assert row.theorem_lhs <= row.theorem_rhs + 1e-12
            assert row.lemma_lhs <= row.lemma_rhs + 1e-12
            assert row.delta_max >= -1e-12

    def test_campaign_deterministic(self):
        a = run_campaign(n_instances=6, seed=9)
        b = run_campaign(n_instances=6, seed=9)
        assert [(r.delta_max, r.theorem_lhs, r.lemma_lhs) for r in a.rows] == \
               [(r.delta_max, r.theorem_lhs, r.lemma_lhs) for r in b.rows]
