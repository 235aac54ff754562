"""Planning tests.

Independent oracles: an exhaustive config-by-config enumeration of the
expected-free-energy objective (joint transitions, observation tuples,
and one-count Dirichlet information recomputed with explicit Python
loops and scipy digamma), hand-computed values for small mazes and
linear point models, breadth-first search for gridworld distances, and
duplicate stream draws for the fallback action path.
"""

import itertools
from collections import deque

import numpy as np
import pytest
from scipy.special import digamma

from worldblocks.composition import Link, ModelGraph
from worldblocks.distributions import (
    CategoricalBelief,
    DirichletCounts,
    GaussianBelief,
    NiwParams,
)
from worldblocks.envs import (
    gridworld,
    gridworld_model,
    mini_arcade,
    arcade_model,
    tmaze,
    tmaze_model,
)
from worldblocks.errors import ConfigError, DataError, ShapeError
from worldblocks.hmm import HmmLayer, forward_backward
from worldblocks.planning import (
    POLICY_CAP,
    EpisodeLog,
    PlannerConfig,
    Preferences,
    act_loop,
    enumerate_policies,
    evaluate_policies_discrete,
    evaluate_policies_rollout,
    write_episode_log,
    write_timing_sidecar,
)
from worldblocks.rng import stream
from worldblocks.slds import SldsLayer
from worldblocks.structure import GrowthConfig


# ---------------------------------------------------------------------------
# enumeration oracle: every quantity recomputed with explicit loops


def _factor_tuples(layer, joint_index):
    """Per-factor order tuples for one joint configuration index."""
    f_sizes = [layer.factor_size(f) for f in range(layer.num_factors)]
    fac = np.unravel_index(joint_index, f_sizes)
    return [np.unravel_index(fac[f], layer.order_sizes[f]) for f in range(layer.num_factors)]


def oracle_init(layer, init_tables):
    probs = np.zeros(layer.joint_size)
    for j in range(layer.joint_size):
        p = 1.0
        for f, tup in enumerate(_factor_tuples(layer, j)):
            for g, s in enumerate(tup):
                p *= init_tables[f][g][s]
        probs[j] = p
    return probs / probs.sum()


def oracle_step(layer, trans_tables, q, action):
    out = np.zeros_like(q)
    for cur in range(layer.joint_size):
        if q[cur] == 0.0:
            continue
        cur_tuples = _factor_tuples(layer, cur)
        for nxt in range(layer.joint_size):
            nxt_tuples = _factor_tuples(layer, nxt)
            p = 1.0
            for f in range(layer.num_factors):
                sizes = layer.order_sizes[f]
                for g in range(len(sizes)):
                    tab = trans_tables[f][g]
                    if (g + 1) in layer.controllable_orders:
                        tab = tab[..., action]
                    if g + 1 < len(sizes):
                        p *= tab[nxt_tuples[f][g], cur_tuples[f][g], cur_tuples[f][g + 1]]
                    else:
                        p *= tab[nxt_tuples[f][g], cur_tuples[f][g]]
            out[nxt] += p * q[cur]
    return out


def _oracle_obs_column(layer, obs_tables, m, joint_index):
    """p(o | configuration) for modality m as a vector over symbols."""
    tuples = _factor_tuples(layer, joint_index)
    idx = tuple(tuples[f][0] for f in layer.modality_factors[m])
    return obs_tables[m][(slice(None),) + idx]


def oracle_state_info(layer, obs_tables, q):
    """Mutual information between configuration and full observation tuple."""
    mi = 0.0
    marginals = np.zeros(tuple(layer.num_obs))
    for combo in itertools.product(*(range(n) for n in layer.num_obs)):
        for s in range(layer.joint_size):
            p = q[s]
            for m, o in enumerate(combo):
                p *= _oracle_obs_column(layer, obs_tables, m, s)[o]
            marginals[combo] += p
    for combo in itertools.product(*(range(n) for n in layer.num_obs)):
        po = marginals[combo]
        for s in range(layer.joint_size):
            lik = 1.0
            for m, o in enumerate(combo):
                lik *= _oracle_obs_column(layer, obs_tables, m, s)[o]
            if q[s] > 0.0 and lik > 0.0:
                mi += q[s] * lik * (np.log(lik) - np.log(po))
    return mi


def _kl_one_count(column, j):
    total = column.sum()
    return float(
        np.log(total) - np.log(column[j]) + digamma(column[j] + 1.0) - digamma(total + 1.0)
    )


def oracle_param_info(layer, trans_tables, obs_tables, q_prev, q_now, action):
    gain = 0.0
    for m in range(len(layer.num_obs)):
        for s in range(layer.joint_size):
            if q_now[s] == 0.0:
                continue
            tuples = _factor_tuples(layer, s)
            idx = tuple(tuples[f][0] for f in layer.modality_factors[m])
            counts = layer.obs_counts[m].counts[(slice(None),) + idx]
            probs = obs_tables[m][(slice(None),) + idx]
            for j in range(layer.num_obs[m]):
                gain += q_now[s] * probs[j] * _kl_one_count(counts, j)
    for f in range(layer.num_factors):
        sizes = layer.order_sizes[f]
        for g in range(len(sizes)):
            counts = layer.trans_counts[f][g].counts
            table = trans_tables[f][g]
            if (g + 1) in layer.controllable_orders:
                counts = counts[..., action]
                table = table[..., action]
            for s in range(layer.joint_size):
                if q_prev[s] == 0.0:
                    continue
                tup = _factor_tuples(layer, s)[f]
                col = (tup[g], tup[g + 1]) if g + 1 < len(sizes) else (tup[g],)
                ccol = counts[(slice(None),) + col]
                pcol = table[(slice(None),) + col]
                for j in range(sizes[g]):
                    gain += q_prev[s] * pcol[j] * _kl_one_count(ccol, j)
    return gain


def oracle_scores(layer, q0, policies, pref_vecs, param_gain):
    trans_tables, obs_tables, _ = layer.tables("mean")
    prefs = np.zeros(len(policies))
    gains = np.zeros(len(policies))
    for i, policy in enumerate(policies):
        q = q0
        for a in policy:
            q_next = oracle_step(layer, trans_tables, q, a)
            for m, vec in pref_vecs.items():
                for s in range(layer.joint_size):
                    column = _oracle_obs_column(layer, obs_tables, m, s)
                    prefs[i] -= q_next[s] * float(column @ vec)
            gains[i] += oracle_state_info(layer, obs_tables, q_next)
            if param_gain:
                gains[i] += oracle_param_info(
                    layer, trans_tables, obs_tables, q, q_next, a
                )
            q = q_next
    return prefs, gains


def _counts(rng, shape):
    return DirichletCounts(rng.uniform(0.5, 3.0, size=shape))


def random_planning_layer(rng, kind):
    num_actions = int(rng.integers(2, 4))
    if kind == "single":
        k = int(rng.integers(2, 5))
        num_obs = tuple(int(rng.integers(2, 4)) for _ in range(int(rng.integers(1, 3))))
        return HmmLayer(
            order_sizes=((k,),),
            num_obs=num_obs,
            modality_factors=tuple((0,) for _ in num_obs),
            controllable_orders=frozenset({1}),
            num_actions=num_actions,
            trans_counts=((_counts(rng, (k, k, num_actions)),),),
            obs_counts=tuple(_counts(rng, (n, k)) for n in num_obs),
            init_counts=((_counts(rng, (k,)),),),
        )
    if kind == "factorial":
        return HmmLayer(
            order_sizes=((2,), (2,)),
            num_obs=(2, 3, 2),
            modality_factors=((0,), (1,), (0, 1)),
            controllable_orders=frozenset({1}),
            num_actions=num_actions,
            trans_counts=(
                (_counts(rng, (2, 2, num_actions)),),
                (_counts(rng, (2, 2, num_actions)),),
            ),
            obs_counts=(
                _counts(rng, (2, 2)),
                _counts(rng, (3, 2)),
                _counts(rng, (2, 2, 2)),
            ),
            init_counts=((_counts(rng, (2,)),), (_counts(rng, (2,)),)),
        )
    controllable = int(rng.integers(1, 3))  # generalized: order 1 or 2 takes actions
    a1 = (num_actions,) if controllable == 1 else ()
    a2 = (num_actions,) if controllable == 2 else ()
    return HmmLayer(
        order_sizes=((2, 2),),
        num_obs=(3,),
        modality_factors=((0,),),
        controllable_orders=frozenset({controllable}),
        num_actions=num_actions,
        trans_counts=((_counts(rng, (2, 2, 2) + a1), _counts(rng, (2, 2) + a2)),),
        obs_counts=(_counts(rng, (3, 2)),),
        init_counts=((_counts(rng, (2,)), _counts(rng, (2,))),),
    )


def _random_prefs(rng, layer):
    vecs = {}
    for m, n in enumerate(layer.num_obs):
        if rng.random() < 0.7 or m == 0:
            vecs[m] = rng.standard_normal(n)
    return vecs


class TestExactEvaluationOracle:
    def test_matches_enumeration_on_random_layers(self):
        kinds = ("single", "factorial", "generalized")
        worst = 0.0
        for case in range(100):
            rng = np.random.default_rng(2_000 + case)
            layer = random_planning_layer(rng, kinds[case % 3])
            horizon = 1 + case % 3
            policies = enumerate_policies(layer.num_actions, horizon)
            pref_vecs = _random_prefs(rng, layer)
            param_gain = case % 2 == 1
            weight = (0.3, 1.0, 2.5)[case % 3]
            ev = evaluate_policies_discrete(
                layer,
                None,
                policies,
                Preferences.discrete(pref_vecs),
                info_weight=weight,
                param_gain=param_gain,
            )
            _, _, init_tables = layer.tables("mean")
            q0 = oracle_init(layer, init_tables)
            prefs, gains = oracle_scores(layer, q0, policies, pref_vecs, param_gain)
            worst = max(
                worst,
                np.abs(ev.preference_terms - prefs).max(),
                np.abs(ev.info_gain_terms - gains).max(),
            )
            assert np.abs(ev.preference_terms - prefs).max() <= 1e-10
            assert np.abs(ev.info_gain_terms - gains).max() <= 1e-10
            assert np.all(ev.info_gain_terms >= -1e-12)
            oracle_efe = prefs - weight * gains
            assert oracle_efe[ev.chosen] <= oracle_efe.min() + 1e-9
        assert worst <= 1e-10

    def test_belief_forms_agree(self):
        rng = np.random.default_rng(77)
        layer = random_planning_layer(rng, "factorial")
        obs = np.column_stack(
            [rng.integers(n, size=5) for n in layer.num_obs]
        )
        acts = rng.integers(layer.num_actions, size=4)
        traj = forward_backward(layer, obs, actions=acts)
        policies = enumerate_policies(layer.num_actions, 2)
        prefs = Preferences.discrete({0: np.array([0.0, 1.0])})
        from_traj = evaluate_policies_discrete(layer, traj, policies, prefs)
        from_vec = evaluate_policies_discrete(
            layer, traj.joint_marginals[-1], policies, prefs
        )
        np.testing.assert_allclose(from_traj.efe, from_vec.efe, atol=1e-12)
        # the oracle agrees with the explicit-vector form too
        q0 = traj.joint_marginals[-1] / traj.joint_marginals[-1].sum()
        oracle_pref, oracle_gain = oracle_scores(
            layer, q0, policies, {0: np.array([0.0, 1.0])}, False
        )
        np.testing.assert_allclose(from_vec.preference_terms, oracle_pref, atol=1e-10)
        np.testing.assert_allclose(from_vec.info_gain_terms, oracle_gain, atol=1e-10)

    def test_graph_dispatch_uses_the_controllable_layer(self):
        rng = np.random.default_rng(5)
        root = random_planning_layer(rng, "single")
        child = HmmLayer.uniform((2,), (2,))
        table = DirichletCounts(np.full((2, root.order_sizes[0][0]), 1.0))
        graph = ModelGraph((root, child), (Link(0, 1, table, stride=2),))
        policies = enumerate_policies(root.num_actions, 2)
        prefs = Preferences.discrete({0: np.arange(root.num_obs[0], dtype=float)})
        via_graph = evaluate_policies_discrete(graph, None, policies, prefs)
        direct = evaluate_policies_discrete(root, None, policies, prefs)
        np.testing.assert_array_equal(via_graph.efe, direct.efe)

    def test_graph_without_unique_controllable_layer_rejected(self):
        passive = HmmLayer.uniform((2,), (2,))
        graph = ModelGraph((passive,))
        with pytest.raises(ConfigError):
            evaluate_policies_discrete(
                graph, None, [(0,)], Preferences.discrete({0: np.zeros(2)})
            )


# ---------------------------------------------------------------------------
# hand-computed small cases


def _two_state_switch_layer():
    """Action 0 keeps the state, action 1 swaps it; identity observations."""
    trans = np.zeros((2, 2, 2))
    trans[:, :, 0] = np.eye(2)
    trans[:, :, 1] = 1.0 - np.eye(2)
    return HmmLayer(
        order_sizes=((2,),),
        num_obs=(2,),
        modality_factors=((0,),),
        controllable_orders=frozenset({1}),
        num_actions=2,
        trans_counts=((DirichletCounts(trans + 1e-12),),),
        obs_counts=(DirichletCounts(np.eye(2) + 1e-12),),
        init_counts=((DirichletCounts(np.array([1.0, 1e-12])),),),
    )


class TestHandComputedValues:
    def test_two_state_switch(self):
        layer = _two_state_switch_layer()
        prefs = Preferences.discrete({0: np.array([0.0, 1.0])})
        ev = evaluate_policies_discrete(
            layer, None, enumerate_policies(2, 1), prefs, info_weight=0.0
        )
        np.testing.assert_allclose(ev.efe, [0.0, -1.0], atol=1e-9)
        assert ev.chosen_policy == (1,)
        # the deterministic chain carries no state information
        np.testing.assert_allclose(ev.info_gain_terms, 0.0, atol=1e-9)

    def test_noisy_channel_hand_values(self):
        obs = np.array([[0.8, 0.1], [0.2, 0.9]])
        layer = HmmLayer(
            order_sizes=((2,),),
            num_obs=(2,),
            modality_factors=((0,),),
            controllable_orders=frozenset({1}),
            num_actions=1,
            trans_counts=((DirichletCounts(np.eye(2)[..., None] + 1e-12),),),
            obs_counts=(DirichletCounts(obs),),
            init_counts=((DirichletCounts(np.array([0.5, 0.5])),),),
        )
        prefs = Preferences.discrete({0: np.array([0.0, 1.0])})
        ev = evaluate_policies_discrete(layer, None, [(0,)], prefs)
        p1 = 0.5 * 0.2 + 0.5 * 0.9
        np.testing.assert_allclose(ev.preference_terms, [-p1], atol=1e-9)

        def entropy(p):
            return -(p * np.log(p) + (1 - p) * np.log(1 - p))

        expected_mi = entropy(p1) - 0.5 * entropy(0.2) - 0.5 * entropy(0.1)
        np.testing.assert_allclose(ev.info_gain_terms, [expected_mi], atol=1e-9)

    def test_tmaze_cue_first_only_with_information_gain(self):
        layer = tmaze_model()
        prefs = Preferences.discrete({2: np.array([0.0, 1.0, 0.0])})
        policies = enumerate_policies(3, 2)
        ln2 = np.log(2.0)
        arm_bit = ln2 - (-(0.75 * np.log(0.75) + 0.25 * np.log(0.25)))

        curious = evaluate_policies_discrete(layer, None, policies, prefs, info_weight=1.0)
        assert curious.chosen_policy == (2, 2)
        by_policy = dict(zip(policies, zip(curious.preference_terms, curious.info_gain_terms)))
        np.testing.assert_allclose(by_policy[(0, 0)], [-1.0, 2 * arm_bit], atol=1e-9)
        np.testing.assert_allclose(by_policy[(2, 0)], [-0.5, ln2 + arm_bit], atol=1e-9)
        np.testing.assert_allclose(by_policy[(2, 2)], [0.0, 2 * ln2], atol=1e-9)

        greedy = evaluate_policies_discrete(layer, None, policies, prefs, info_weight=0.0)
        assert greedy.chosen_policy[0] in (0, 1)  # heads straight for an arm

    def test_tmaze_switch_across_seeds(self):
        # belief after the initial centre observation, as the acting loop forms it
        layer = tmaze_model()
        prefs = Preferences.discrete({2: np.array([0.0, 1.0, 0.0])})
        policies = enumerate_policies(3, 2)
        for seed in range(20):
            env = tmaze(seed)
            first = env.reset()
            traj = forward_backward(layer, np.array([first]))
            curious = evaluate_policies_discrete(
                layer, traj, policies, prefs, info_weight=1.0
            )
            greedy = evaluate_policies_discrete(
                layer, traj, policies, prefs, info_weight=0.0
            )
            assert curious.chosen_policy[0] == 2
            assert greedy.chosen_policy[0] in (0, 1)


# ---------------------------------------------------------------------------
# invariants


class TestObjectiveInvariants:
    def test_zero_weight_maximizes_expected_preference(self):
        for case in range(10):
            rng = np.random.default_rng(900 + case)
            layer = random_planning_layer(rng, "single")
            policies = enumerate_policies(layer.num_actions, 2)
            pref_vecs = _random_prefs(rng, layer)
            ev = evaluate_policies_discrete(
                layer, None, policies, Preferences.discrete(pref_vecs), info_weight=0.0
            )
            _, _, init_tables = layer.tables("mean")
            prefs, _ = oracle_scores(
                layer, oracle_init(layer, init_tables), policies, pref_vecs, False
            )
            expected_value = -prefs  # expected log-preference, to be maximized
            assert expected_value[ev.chosen] >= expected_value.max() - 1e-9

    def test_joint_positive_scaling_leaves_choice_alone(self):
        rng = np.random.default_rng(31)
        layer = random_planning_layer(rng, "single")
        policies = enumerate_policies(layer.num_actions, 2)
        pref_vecs = _random_prefs(rng, layer)
        base = evaluate_policies_discrete(
            layer, None, policies, Preferences.discrete(pref_vecs), info_weight=1.0
        )
        gaps = np.sort(base.efe)
        assert gaps[1] - gaps[0] > 1e-8  # unique minimizer, so choice is stable
        for lam in (0.5, 2.0, 7.5):
            scaled = evaluate_policies_discrete(
                layer,
                None,
                policies,
                Preferences.discrete({m: lam * v for m, v in pref_vecs.items()}),
                info_weight=lam,
            )
            assert scaled.chosen == base.chosen
            np.testing.assert_allclose(scaled.efe, lam * base.efe, rtol=1e-10)

    def test_single_policy_is_chosen(self):
        layer = _two_state_switch_layer()
        ev = evaluate_policies_discrete(
            layer, None, [(0, 1)], Preferences.discrete({0: np.zeros(2)})
        )
        assert ev.chosen == 0 and ev.chosen_policy == (0, 1)

    def test_ties_resolve_to_first_listed(self):
        layer = _two_state_switch_layer()
        prefs = Preferences.discrete({0: np.array([0.0, 1.0])})
        ev = evaluate_policies_discrete(layer, None, [(0,), (1,), (1,)], prefs)
        assert ev.chosen == 1  # the first of the two identical winners


# ---------------------------------------------------------------------------
# plumbing: policy enumeration and preference validation


class TestPolicyEnumeration:
    def test_lexicographic_order(self):
        policies = enumerate_policies(2, 3)
        assert policies == tuple(itertools.product((0, 1), repeat=3))
        assert policies[0] == (0, 0, 0) and policies[-1] == (1, 1, 1)

    def test_cap_is_inclusive(self):
        assert len(enumerate_policies(4, 5)) == POLICY_CAP
        with pytest.raises(ConfigError):
            enumerate_policies(2, 11)

    def test_degenerate_inputs(self):
        with pytest.raises(ConfigError):
            enumerate_policies(0, 2)
        with pytest.raises(ConfigError):
            enumerate_policies(2, 0)


class TestPreferenceValidation:
    def test_discrete_vectors_checked(self):
        with pytest.raises(DataError):
            Preferences.discrete({0: np.array([0.0, np.inf])})
        with pytest.raises(ShapeError):
            Preferences.discrete({0: np.zeros((2, 2))})

    def test_quadratic_checked(self):
        Preferences.quadratic(np.zeros(2), np.eye(2))
        with pytest.raises(ConfigError):
            Preferences(quad_mean=np.zeros(2))
        with pytest.raises(ShapeError):
            Preferences.quadratic(np.zeros(2), np.eye(3))
        with pytest.raises(ShapeError):
            Preferences.quadratic(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
        with pytest.raises(ConfigError):
            Preferences.quadratic(np.zeros(2), -np.eye(2))

    def test_evaluation_rejects_mismatched_preferences(self):
        layer = _two_state_switch_layer()
        with pytest.raises(ConfigError):
            evaluate_policies_discrete(
                layer, None, [(0,)], Preferences.discrete({7: np.zeros(2)})
            )
        with pytest.raises(ShapeError):
            evaluate_policies_discrete(
                layer, None, [(0,)], Preferences.discrete({0: np.zeros(3)})
            )
        with pytest.raises(ConfigError):
            evaluate_policies_discrete(
                layer, None, [(0,)], Preferences.quadratic(np.zeros(2), np.eye(2))
            )

    def test_evaluation_rejects_bad_policies(self):
        layer = _two_state_switch_layer()
        prefs = Preferences.discrete({0: np.zeros(2)})
        with pytest.raises(ConfigError):
            evaluate_policies_discrete(layer, None, [], prefs)
        with pytest.raises(ConfigError):
            evaluate_policies_discrete(layer, None, [(0,), (0, 1)], prefs)
        with pytest.raises(DataError):
            evaluate_policies_discrete(layer, None, [(2,)], prefs)
        with pytest.raises(ConfigError):
            evaluate_policies_discrete(
                HmmLayer.uniform((2,), (2,)), None, [(0,)], prefs
            )
        with pytest.raises(ShapeError):
            evaluate_policies_discrete(layer, np.array([0.5, 0.25, 0.25]), [(0,)], prefs)


# ---------------------------------------------------------------------------
# Monte-Carlo rollouts


def _cycle_layer():
    """Deterministic 3-cycle: action 0 advances, action 1 holds."""
    trans = np.zeros((3, 3, 2))
    trans[:, :, 0] = np.roll(np.eye(3), 1, axis=0)
    trans[:, :, 1] = np.eye(3)
    return HmmLayer(
        order_sizes=((3,),),
        num_obs=(3,),
        modality_factors=((0,),),
        controllable_orders=frozenset({1}),
        num_actions=2,
        trans_counts=((DirichletCounts(trans + 1e-12),),),
        obs_counts=(DirichletCounts(np.eye(3) + 1e-12),),
        init_counts=((DirichletCounts(np.array([1.0, 1e-12, 1e-12])),),),
    )


class TestRolloutEvaluation:
    def test_deterministic_model_matches_exact_for_any_rollout_count(self):
        layer = _cycle_layer()
        prefs = Preferences.discrete({0: np.array([0.0, 0.0, 2.0])})
        policies = enumerate_policies(2, 2)
        exact = evaluate_policies_discrete(layer, None, policies, prefs)
        for rollouts in (1, 5):
            mc = evaluate_policies_rollout(layer, None, policies, prefs, rollouts, seed=4)
            np.testing.assert_allclose(mc.preference_terms, exact.preference_terms, atol=1e-9)
            np.testing.assert_allclose(mc.info_gain_terms, exact.info_gain_terms, atol=1e-9)
            np.testing.assert_allclose(mc.standard_errors, 0.0, atol=1e-12)
            assert mc.chosen_policy == exact.chosen_policy == (0, 0)

    def test_rollout_mean_approaches_exact_value(self):
        rng = np.random.default_rng(12)
        layer = random_planning_layer(rng, "single")
        policies = enumerate_policies(layer.num_actions, 2)[:3]
        prefs = Preferences.discrete(_random_prefs(rng, layer))
        exact = evaluate_policies_discrete(layer, None, policies, prefs)
        mc = evaluate_policies_rollout(layer, None, policies, prefs, 3000, seed=1)
        assert np.all(mc.standard_errors > 0.0)
        assert np.all(np.abs(mc.efe - exact.efe) <= 4.0 * mc.standard_errors + 1e-6)

    def test_single_rollout_within_spread_of_big_run(self):
        rng = np.random.default_rng(13)
        layer = random_planning_layer(rng, "single")
        policies = enumerate_policies(layer.num_actions, 2)[:2]
        prefs = Preferences.discrete(_random_prefs(rng, layer))
        one = evaluate_policies_rollout(layer, None, policies, prefs, 1, seed=2)
        big = evaluate_policies_rollout(layer, None, policies, prefs, 4096, seed=2)
        np.testing.assert_allclose(one.standard_errors, 0.0, atol=1e-15)
        spread = 3.0 * big.standard_errors * np.sqrt(4096)
        assert np.all(np.abs(one.efe - big.efe) <= spread + 1e-9)

    def test_common_random_numbers_respect_domination(self):
        # action 0 reaches the preferred state far more often than action 1;
        # with coupled rollouts the better policy can never score worse
        trans = np.zeros((2, 2, 2))
        trans[:, :, 0] = [[0.1, 0.1], [0.9, 0.9]]
        trans[:, :, 1] = [[0.9, 0.9], [0.1, 0.1]]
        layer = HmmLayer(
            order_sizes=((2,),),
            num_obs=(2,),
            modality_factors=((0,),),
            controllable_orders=frozenset({1}),
            num_actions=2,
            trans_counts=((DirichletCounts(trans + 1e-12),),),
            obs_counts=(DirichletCounts(np.eye(2) + 1e-12),),
            init_counts=((DirichletCounts(np.array([1.0, 1.0])),),),
        )
        prefs = Preferences.discrete({0: np.array([0.0, 1.0])})
        for rollouts in (1, 3):
            for seed in range(100):
                ev = evaluate_policies_rollout(
                    layer, None, [(0,), (1,)], prefs, rollouts, seed, info_weight=0.0
                )
                assert ev.efe[0] <= ev.efe[1] + 1e-12
                assert ev.chosen == 0

    def test_rollouts_are_replayable(self):
        rng = np.random.default_rng(21)
        layer = random_planning_layer(rng, "factorial")
        policies = enumerate_policies(layer.num_actions, 2)[:4]
        prefs = Preferences.discrete({0: np.array([0.0, 1.0])})
        first = evaluate_policies_rollout(layer, None, policies, prefs, 32, seed=6)
        second = evaluate_policies_rollout(layer, None, policies, prefs, 32, seed=6)
        np.testing.assert_array_equal(first.efe, second.efe)
        np.testing.assert_array_equal(first.standard_errors, second.standard_errors)

    def test_rollout_validation(self):
        layer = _cycle_layer()
        prefs = Preferences.discrete({0: np.zeros(3)})
        with pytest.raises(ConfigError):
            evaluate_policies_rollout(layer, None, [(0,)], prefs, 0, seed=0)
        with pytest.raises(ConfigError):
            evaluate_policies_rollout(
                HmmLayer.uniform((2,), (2,)), None, [(0,)], prefs, 2, seed=0
            )
        with pytest.raises(ConfigError):
            evaluate_policies_rollout(3.5, None, [(0,)], prefs, 2, seed=0)


def _point_mass_slds():
    return SldsLayer(
        dynamics=np.eye(1)[None],
        noise=np.full((1, 1, 1), 1e-12),
        rec_base=np.zeros((1, 1)),
        rec_weights=np.zeros((1, 1)),
        emission=np.eye(1),
        obs_noise=np.full((1, 1), 1e-12),
        switch_init=CategoricalBelief(np.ones(1)),
        state_init=GaussianBelief(np.zeros(1), np.full((1, 1), 1e-12)),
        control_mats=np.eye(1)[None],
    )


class TestContinuousRollouts:
    def test_controlled_point_mass_prefers_controls_toward_goal(self):
        layer = _point_mass_slds()
        prefs = Preferences.quadratic(np.array([1.0]), np.eye(1))
        policies = [(0.0, 0.0), (0.5, 0.5), (-0.5, -0.5)]
        ev = evaluate_policies_rollout(layer, None, policies, prefs, 4, seed=0)
        # positions 0.5 then 1.0 under the middle policy: cost (0.25 + 0) / 2
        np.testing.assert_allclose(ev.preference_terms, [1.0, 0.125, 3.125], atol=1e-3)
        assert ev.chosen == 1
        np.testing.assert_allclose(ev.info_gain_terms, 0.0, atol=1e-15)
        assert ev.policies[1] == ((0.5,), (0.5,))

    def test_belief_shifts_the_start(self):
        layer = _point_mass_slds()
        prefs = Preferences.quadratic(np.array([1.0]), np.eye(1))
        belief = (CategoricalBelief(np.ones(1)), GaussianBelief(np.array([5.0]), np.full((1, 1), 1e-12)))
        ev = evaluate_policies_rollout(
            layer, belief, [(0.0, 0.0), (0.5, 0.5), (-0.5, -0.5)], prefs, 4, seed=0
        )
        np.testing.assert_allclose(ev.preference_terms, [16.0, 22.625, 10.625], atol=1e-3)
        assert ev.chosen == 2

    def test_continuous_validation(self):
        layer = _point_mass_slds()
        with pytest.raises(ConfigError):
            evaluate_policies_rollout(
                layer, None, [(0.0,)], Preferences.discrete({0: np.zeros(2)}), 2, seed=0
            )
        with pytest.raises(ConfigError):
            evaluate_policies_rollout(
                layer,
                (np.ones(1), np.zeros(1)),
                [(0.0,)],
                Preferences.quadratic(np.array([1.0]), np.eye(1)),
                2,
                seed=0,
            )
        with pytest.raises(ShapeError):
            evaluate_policies_rollout(
                layer,
                None,
                [np.zeros((2, 3))],
                Preferences.quadratic(np.array([1.0]), np.eye(1)),
                2,
                seed=0,
            )


def _deterministic_controllable_root():
    """The next state equals the last action; identity observations."""
    trans = np.zeros((2, 2, 2))
    trans[0, :, 0] = 1.0
    trans[1, :, 1] = 1.0
    return HmmLayer(
        order_sizes=((2,),),
        num_obs=(2,),
        modality_factors=((0,),),
        controllable_orders=frozenset({1}),
        num_actions=2,
        trans_counts=((DirichletCounts(trans + 1e-12),),),
        obs_counts=(DirichletCounts(np.eye(2) + 1e-12),),
        init_counts=((DirichletCounts(np.array([1.0, 1e-12])),),),
    )


class TestHierarchicalRollouts:
    def _graph(self):
        root = _deterministic_controllable_root()
        child = HmmLayer.uniform((2,), (2,))
        table = DirichletCounts(np.full((2, 2), 1.0))
        return ModelGraph((root, child), (Link(0, 1, table, stride=2),))

    def test_root_preferences_drive_the_choice(self):
        graph = self._graph()
        prefs = Preferences.discrete({0: np.array([0.0, 1.0])})
        policies = [(0, 0), (1, 1), (1, 0)]
        ev = evaluate_policies_rollout(graph, None, policies, prefs, 8, seed=3)
        np.testing.assert_allclose(ev.preference_terms, [0.0, -2.0, -1.0], atol=1e-12)
        assert ev.chosen == 1
        np.testing.assert_allclose(ev.standard_errors, 0.0, atol=1e-15)

    def test_single_layer_graph_unwraps_to_the_layer(self):
        layer = _cycle_layer()
        prefs = Preferences.discrete({0: np.array([0.0, 0.0, 2.0])})
        policies = enumerate_policies(2, 2)
        direct = evaluate_policies_rollout(layer, None, policies, prefs, 8, seed=9)
        wrapped = evaluate_policies_rollout(
            ModelGraph((layer,)), None, policies, prefs, 8, seed=9
        )
        np.testing.assert_array_equal(direct.efe, wrapped.efe)

    def test_hierarchical_validation(self):
        graph = self._graph()
        prefs = Preferences.discrete({0: np.array([0.0, 1.0])})
        with pytest.raises(ConfigError):
            evaluate_policies_rollout(graph, np.array([0.5, 0.5]), [(0, 0)], prefs, 2, seed=0)
        two_roots = ModelGraph((_deterministic_controllable_root(), HmmLayer.uniform((2,), (2,))))
        with pytest.raises(ConfigError):
            evaluate_policies_rollout(two_roots, None, [(0, 0)], prefs, 2, seed=0)


# ---------------------------------------------------------------------------
# the acting loop


def _bfs_distances(dims, goal):
    rows, cols = dims
    dist = {goal: 0}
    queue = deque([goal])
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nxt = (r + dr, c + dc)
            if 0 <= nxt[0] < rows and 0 <= nxt[1] < cols and nxt not in dist:
                dist[nxt] = dist[(r, c)] + 1
                queue.append(nxt)
    return dist


def _gridworld_start(seed, episode, dims, goal):
    rows, cols = dims
    rng = stream(seed, f"gridworld:episode:{episode}")
    draw = int(rng.integers(rows * cols - 1))
    goal_cell = goal[0] * cols + goal[1]
    return draw + 1 if draw >= goal_cell else draw


def _shaped_gridworld_prefs(dims, goal):
    dist = _bfs_distances(dims, goal)
    location = np.array(
        [-0.25 * dist[divmod(cell, dims[1])] for cell in range(dims[0] * dims[1])]
    )
    return Preferences.discrete({0: location, 1: np.array([0.0, 4.0])})


class TestActLoop:
    def test_reaches_the_goal_within_twice_shortest_path(self):
        dims, goal = (3, 3), (2, 2)
        layer = gridworld_model(dims, goal)
        prefs = _shaped_gridworld_prefs(dims, goal)
        config = PlannerConfig(plan_horizon=3, info_weight=0.0, learn=False)
        dist = _bfs_distances(dims, goal)
        for seed in range(10):
            env = gridworld(dims, goal, seed, horizon=12)
            logs, _ = act_loop(env, layer, prefs, config, 1, seed=seed)
            start = divmod(_gridworld_start(seed, 0, dims, goal), dims[1])
            steps = logs[0].steps
            assert steps[-1].reward == 1.0 and steps[-1].observation[1] == 1
            assert len(steps) <= max(1, 2 * dist[start])
            assert not logs[0].fallback_used

    def test_zero_horizon_falls_back_to_replayable_uniform_actions(self):
        layer = tmaze_model()
        prefs = Preferences.discrete({2: np.array([0.0, 1.0, 0.0])})
        config = PlannerConfig(plan_horizon=0, learn=False)
        logs, _ = act_loop(tmaze(1), layer, prefs, config, 3, seed=5)
        for ep, log in enumerate(logs):
            assert log.fallback_used
            rng = stream(5, f"act:{ep}")
            for step in log.steps:
                assert step.fallback and np.isnan(step.efe)
                assert step.action == int(rng.integers(3))

    def test_env_model_mismatch_rejected(self):
        prefs = Preferences.discrete({0: np.zeros(9)})
        with pytest.raises(ConfigError):
            act_loop(
                gridworld((3, 3), (2, 2), 0),
                tmaze_model(),
                prefs,
                PlannerConfig(learn=False),
                1,
            )
        with pytest.raises(ConfigError):
            act_loop(
                tmaze(0),
                HmmLayer.uniform((2,), (2,)),
                Preferences.discrete({0: np.zeros(2)}),
                PlannerConfig(learn=False),
                1,
            )

    def test_planner_config_validation(self):
        with pytest.raises(ConfigError):
            PlannerConfig(plan_horizon=-1)
        with pytest.raises(ConfigError):
            PlannerConfig(rollouts=-1)
        with pytest.raises(ConfigError):
            PlannerConfig(grow=True)

    def test_learning_updates_the_layer(self):
        layer = arcade_model()
        prefs = Preferences.discrete({3: np.array([0.0, 3.0])})
        config = PlannerConfig(plan_horizon=1, info_weight=0.0, learn=True)
        logs, learned = act_loop(mini_arcade(0), layer, prefs, config, 2, seed=0)
        assert not np.allclose(
            learned.trans_counts[1][0].counts, layer.trans_counts[1][0].counts
        )
        for log in logs:
            assert log.total_reward == sum(s.reward for s in log.steps)
            for step in log.steps:
                assert np.isfinite(step.elbo) and np.isfinite(step.efe)

    def test_growth_hook_tracks_observation_components(self):
        layer = tmaze_model()
        prefs = Preferences.discrete({2: np.array([0.0, 1.0, 0.0])})
        config = PlannerConfig(
            plan_horizon=1,
            learn=False,
            grow=True,
            growth=GrowthConfig(evidence_threshold=1.0, max_components=8),
            growth_base=NiwParams(np.zeros(3), 1.0, 6.0, 25.0 * np.eye(3)),
        )
        logs, _ = act_loop(tmaze(2), layer, prefs, config, 2, seed=1)
        for log in logs:
            assert isinstance(log.components, int) and log.components >= 1

    def test_episode_log_and_sidecar_round_trip(self, tmp_path):
        layer = tmaze_model()
        prefs = Preferences.discrete({2: np.array([0.0, 1.0, 0.0])})
        config = PlannerConfig(plan_horizon=2, learn=False)
        paths = []
        for run in range(2):
            logs, _ = act_loop(tmaze(4), layer, prefs, config, 3, seed=7)
            main = tmp_path / f"log{run}.tsv"
            timing = tmp_path / f"times{run}.tsv"
            write_episode_log(main, logs)
            write_timing_sidecar(timing, logs)
            paths.append((main, timing))
        first, second = (p.read_bytes() for p, _ in paths)
        assert first == second  # byte-stable despite wall-clock timing
        text = paths[0][0].read_text().splitlines()
        assert text[0] == "episode\tt\tobs\taction\treward\telbo\tefe\tfallback"
        assert len(text) == 1 + 3 * 2
        timing_lines = paths[0][1].read_text().splitlines()
        assert timing_lines[0] == "episode\tt\tmicros"
        assert len(timing_lines) == len(text)
        for line in timing_lines[1:]:
            ep, t, micros = line.split("\t")
            assert int(micros) >= 0 and int(t) >= 1 and int(ep) >= 0

    def test_rollout_planner_closes_the_loop(self):
        layer = tmaze_model()
        prefs = Preferences.discrete({2: np.array([0.0, 1.0, 0.0])})
        config = PlannerConfig(plan_horizon=2, info_weight=0.0, learn=False, rollouts=16)
        logs, _ = act_loop(tmaze(8), layer, prefs, config, 2, seed=3)
        for log in logs:
            assert len(log.steps) == 2 and not log.fallback_used
