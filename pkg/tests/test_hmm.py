import itertools

import numpy as np
import pytest

from worldblocks.distributions import DirichletCounts
from worldblocks.errors import ConfigError, DataError, ShapeError
from worldblocks.hmm import (
    HmmLayer,
    forward_backward,
    generalized_rollout,
    quantize,
    vb_em,
    vb_update,
    viterbi,
)
from worldblocks.rng import sample_categorical, stream


def enumerate_paths(layer, obs, actions=None, mode="mean"):
    """Brute-force path sum over every full assignment of every factor's
    every order.  Returns (log_evidence, per-factor joint marginals,
    per-factor pairwise marginals, best_path, best_logp) computed from
    first principles: order g steps with the table selected by order g+1's
    current state, observations depend on order-1 states only."""
    trans, obs_tab, init = layer.tables(mode)
    obs = np.atleast_2d(np.asarray(obs, dtype=int).T).T
    if obs.ndim == 1:
        obs = obs[:, None]
    t_steps = obs.shape[0]
    g_depth = layer.gen_depth
    n_fac = layer.num_factors
    sizes = layer.order_sizes
    per_step = [range(s) for f in range(n_fac) for s in sizes[f]]

    def factor_tuple(assign, f):
        base = f * g_depth
        return assign[base : base + g_depth]

    def step_prob(prev, nxt, a):
        p = 1.0
        for f in range(n_fac):
            pf, nf = factor_tuple(prev, f), factor_tuple(nxt, f)
            for g in range(g_depth):
                tab = trans[f][g]
                if (g + 1) in layer.controllable_orders:
                    tab = tab[..., a]
                if g < g_depth - 1:
                    p *= tab[nf[g], pf[g], pf[g + 1]]
                else:
                    p *= tab[nf[g], pf[g]]
        return p

    def obs_prob(assign, t):
        p = 1.0
        for m, facs in enumerate(layer.modality_factors):
            idx = tuple(assign[fi * g_depth] for fi in facs)
            p *= obs_tab[m][(obs[t, m],) + idx]
        return p

    def init_prob(assign):
        p = 1.0
        for f in range(n_fac):
            ft = factor_tuple(assign, f)
            for g in range(g_depth):
                p *= init[f][g][ft[g]]
        return p

    states = list(itertools.product(*per_step))
    f_sizes = [int(np.prod(sizes[f])) for f in range(n_fac)]

    def factor_index(assign, f):
        idx = 0
        for g in range(g_depth):
            idx = idx * sizes[f][g] + assign[f * g_depth + g]
        return idx

    total = 0.0
    marg = [np.zeros((t_steps, f_sizes[f])) for f in range(n_fac)]
    pair = [np.zeros((t_steps - 1, f_sizes[f], f_sizes[f])) for f in range(n_fac)]
    best_logp, best_path = -np.inf, None
    for path in itertools.product(states, repeat=t_steps):
        p = init_prob(path[0]) * obs_prob(path[0], 0)
        for t in range(1, t_steps):
            a = int(actions[t - 1]) if actions is not None else None
            p *= step_prob(path[t - 1], path[t], a) * obs_prob(path[t], t)
        total += p
        if p > 0 and np.log(p) > best_logp + 1e-15:
            best_logp, best_path = np.log(p), path
        for t in range(t_steps):
            for f in range(n_fac):
                marg[f][t, factor_index(path[t], f)] += p
        for t in range(t_steps - 1):
            for f in range(n_fac):
                pair[f][t, factor_index(path[t], f), factor_index(path[t + 1], f)] += p
    for f in range(n_fac):
        marg[f] /= total
        if t_steps > 1:
            pair[f] /= total
    return np.log(total), marg, pair, best_path, best_logp


def random_layer(rng, k, n_obs, t_controllable=False, n_actions=0):
    a_axis = (n_actions,) if t_controllable else ()
    trans = rng.uniform(0.2, 1.0, size=(k, k) + a_axis)
    trans /= trans.sum(axis=0, keepdims=True)
    obs_t = rng.uniform(0.2, 1.0, size=(n_obs, k))
    obs_t /= obs_t.sum(axis=0, keepdims=True)
    init = rng.dirichlet(np.ones(k) * 5)
    return HmmLayer.from_tables(trans, obs_t, init)


class TestForwardBackwardBasics:
    def test_single_state(self):
        layer = HmmLayer.from_tables(
            np.array([[1.0]]), np.array([[0.3], [0.7]]), np.array([1.0])
        )
        obs = np.array([0, 1, 1, 0])
        traj = forward_backward(layer, obs)
        np.testing.assert_allclose(traj.state_marginals(), np.ones((4, 1)))
        expected = np.log(0.3) * 2 + np.log(0.7) * 2
        np.testing.assert_allclose(traj.log_evidence, expected, rtol=1e-10)

    def test_uniform_tables_symmetry(self):
        layer = HmmLayer.uniform([2], [2])
        obs = np.array([0, 1, 0, 1, 1])
        traj = forward_backward(layer, obs)
        np.testing.assert_allclose(traj.state_marginals(), np.full((5, 2), 0.5), atol=1e-12)
        np.testing.assert_allclose(traj.log_evidence, 5 * np.log(0.5), rtol=1e-12)

    def test_k2_t3_matches_enumeration(self):
        a = np.array([[0.9, 0.3], [0.1, 0.7]])
        b = np.array([[0.8, 0.1], [0.2, 0.9]])
        d = np.array([0.6, 0.4])
        layer = HmmLayer.from_tables(a, b, d)
        obs = np.array([0, 1, 0])
        log_ev, marg, pair, _, _ = enumerate_paths(layer, obs)
        traj = forward_backward(layer, obs)
        np.testing.assert_allclose(traj.log_evidence, log_ev, atol=1e-10)
        np.testing.assert_allclose(traj.state_marginals(), marg[0], atol=1e-10)
        np.testing.assert_allclose(traj.factor_pairwise[0], pair[0], atol=1e-10)

    def test_out_of_alphabet_symbol(self):
        layer = HmmLayer.uniform([2], [2])
        with pytest.raises(DataError):
            forward_backward(layer, np.array([0, 2]))

    def test_action_length_mismatch(self):
        layer = HmmLayer.uniform([2], [2], controllable_orders={1}, num_actions=2)
        with pytest.raises(ShapeError):
            forward_backward(layer, np.array([0, 1, 0]), actions=np.array([0]))

    def test_passive_layer_rejects_actions(self):
        layer = HmmLayer.uniform([2], [2])
        with pytest.raises(ConfigError):
            forward_backward(layer, np.array([0, 1]), actions=np.array([0]))


class TestForwardBackwardOracle:
    def test_seeded_sweep_matches_enumeration(self):
        rng = np.random.default_rng(10)
        for trial in range(30):
            k = int(rng.integers(2, 5))
            n_obs = int(rng.integers(2, 4))
            t_steps = int(rng.integers(2, 6))
            controllable = trial % 2 == 1
            n_actions = 2 if controllable else 0
            if controllable:
                layer = HmmLayer.from_tables(
                    _rand_table(rng, (k, k, n_actions)),
                    _rand_table(rng, (n_obs, k)),
                    rng.dirichlet(np.ones(k)),
                )
                actions = rng.integers(0, n_actions, size=t_steps - 1)
            else:
                layer = random_layer(rng, k, n_obs)
                actions = None
            obs = rng.integers(0, n_obs, size=t_steps)
            log_ev, marg, pair, _, _ = enumerate_paths(layer, obs, actions)
            traj = forward_backward(layer, obs, actions)
            np.testing.assert_allclose(traj.log_evidence, log_ev, atol=1e-10)
            np.testing.assert_allclose(traj.state_marginals(), marg[0], atol=1e-10)
            if t_steps > 1:
                np.testing.assert_allclose(traj.factor_pairwise[0], pair[0], atol=1e-10)

    def test_generalized_depth_matches_enumeration(self):
        rng = np.random.default_rng(11)
        layer = HmmLayer.uniform([2], [2], gen_depth=2, path_sizes=((2,),))
        layer = _randomize_counts(layer, rng)
        obs = np.array([0, 1, 0])
        log_ev, marg, pair, _, _ = enumerate_paths(layer, obs)
        traj = forward_backward(layer, obs)
        np.testing.assert_allclose(traj.log_evidence, log_ev, atol=1e-10)
        np.testing.assert_allclose(traj.factor_marginals[0], marg[0], atol=1e-10)
        np.testing.assert_allclose(traj.factor_pairwise[0], pair[0], atol=1e-10)

    def test_factorial_matches_enumeration(self):
        rng = np.random.default_rng(12)
        layer = HmmLayer.uniform([2, 2], [3])
        layer = _randomize_counts(layer, rng)
        obs = np.array([0, 2, 1])
        log_ev, marg, pair, _, _ = enumerate_paths(layer, obs)
        traj = forward_backward(layer, obs)
        np.testing.assert_allclose(traj.log_evidence, log_ev, atol=1e-10)
        for f in range(2):
            np.testing.assert_allclose(traj.factor_marginals[f], marg[f], atol=1e-10)
            np.testing.assert_allclose(traj.factor_pairwise[f], pair[f], atol=1e-10)


class TestConsistencyAndSymmetry:
    def test_pairwise_marginalizes_to_singletons(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            layer = random_layer(rng, 3, 2)
            obs = rng.integers(0, 2, size=5)
            traj = forward_backward(layer, obs)
            xi = traj.factor_pairwise[0]
            gam = traj.factor_marginals[0]
            np.testing.assert_allclose(xi.sum(axis=2), gam[:-1], atol=1e-8)
            np.testing.assert_allclose(xi.sum(axis=1), gam[1:], atol=1e-8)

    def test_factorial_independent_modalities_decouple(self):
        # one modality per factor: posterior equals two independent runs
        rng = np.random.default_rng(14)
        layer = HmmLayer.uniform([2, 3], [2, 3], modality_factors=((0,), (1,)))
        layer = _randomize_counts(layer, rng)
        obs = np.stack([rng.integers(0, 2, size=6), rng.integers(0, 3, size=6)], axis=1)
        traj = forward_backward(layer, obs)
        for f in range(2):
            solo = HmmLayer(
                order_sizes=(layer.order_sizes[f],),
                num_obs=(layer.num_obs[f],),
                modality_factors=((0,),),
                controllable_orders=frozenset(),
                num_actions=0,
                trans_counts=(layer.trans_counts[f],),
                obs_counts=(layer.obs_counts[f],),
                init_counts=(layer.init_counts[f],),
            )
            solo_traj = forward_backward(solo, obs[:, f])
            np.testing.assert_allclose(
                traj.factor_marginals[f], solo_traj.factor_marginals[0], atol=1e-10
            )
        np.testing.assert_allclose(
            traj.log_evidence,
            sum(
                forward_backward(
                    HmmLayer(
                        order_sizes=(layer.order_sizes[f],),
                        num_obs=(layer.num_obs[f],),
                        modality_factors=((0,),),
                        controllable_orders=frozenset(),
                        num_actions=0,
                        trans_counts=(layer.trans_counts[f],),
                        obs_counts=(layer.obs_counts[f],),
                        init_counts=(layer.init_counts[f],),
                    ),
                    obs[:, f],
                ).log_evidence
                for f in range(2)
            ),
            atol=1e-10,
        )

    def test_state_permutation_invariance(self):
        rng = np.random.default_rng(15)
        a = _rand_table(rng, (3, 3))
        b = _rand_table(rng, (2, 3))
        d = rng.dirichlet(np.ones(3))
        layer = HmmLayer.from_tables(a, b, d)
        perm = np.array([2, 0, 1])
        layer_p = HmmLayer.from_tables(a[np.ix_(perm, perm)], b[:, perm], d[perm])
        obs = rng.integers(0, 2, size=5)
        t1 = forward_backward(layer, obs)
        t2 = forward_backward(layer_p, obs)
        np.testing.assert_allclose(t1.log_evidence, t2.log_evidence, atol=1e-10)
        np.testing.assert_allclose(
            t1.state_marginals()[:, perm], t2.state_marginals(), atol=1e-10
        )

    def test_mean_field_exact_when_factors_decoupled(self):
        rng = np.random.default_rng(16)
        layer = HmmLayer.uniform([2, 2], [2, 2], modality_factors=((0,), (1,)))
        layer = _randomize_counts(layer, rng)
        obs = np.stack([rng.integers(0, 2, size=5), rng.integers(0, 2, size=5)], axis=1)
        exact = forward_backward(layer, obs)
        mf = forward_backward(layer, obs, joint_limit=1)
        assert not mf.exact
        for f in range(2):
            np.testing.assert_allclose(
                mf.factor_marginals[f], exact.factor_marginals[f], atol=1e-8
            )
        np.testing.assert_allclose(mf.log_evidence, exact.log_evidence, atol=1e-8)

    def test_mean_field_elbo_lower_bounds_evidence(self):
        rng = np.random.default_rng(17)
        layer = HmmLayer.uniform([2, 2], [3])
        layer = _randomize_counts(layer, rng)
        obs = rng.integers(0, 3, size=6)
        exact = forward_backward(layer, obs)
        mf = forward_backward(layer, obs, joint_limit=1)
        assert mf.log_evidence <= exact.log_evidence + 1e-9


class TestViterbi:
    def test_deterministic_chain(self):
        k = 3
        a = np.roll(np.eye(k), 1, axis=0)  # s -> s+1 mod k
        b = np.eye(k)
        d = np.array([1.0, 0.0, 0.0])
        layer = HmmLayer.from_tables(a, b, d)
        obs = np.array([0, 1, 2, 0])
        path = viterbi(layer, obs)
        np.testing.assert_array_equal(path.order1(), [0, 1, 2, 0])

    def test_matches_enumeration(self):
        rng = np.random.default_rng(18)
        for _ in range(15):
            layer = random_layer(rng, 2, 2)
            obs = rng.integers(0, 2, size=4)
            _, _, _, best_path, best_logp = enumerate_paths(layer, obs)
            got = viterbi(layer, obs)
            np.testing.assert_allclose(got.log_prob, best_logp, atol=1e-10)
            # decoded path must itself achieve the maximum
            trans, obs_tab, init = layer.tables()
            path = got.order1()
            lp = np.log(init[0][0][path[0]]) + np.log(obs_tab[0][obs[0], path[0]])
            for t in range(1, len(obs)):
                lp += np.log(trans[0][0][path[t], path[t - 1]])
                lp += np.log(obs_tab[0][obs[t], path[t]])
            np.testing.assert_allclose(lp, best_logp, atol=1e-10)

    def test_uniform_ties_break_to_zero(self):
        layer = HmmLayer.uniform([3], [2])
        obs = np.array([0, 1, 0, 1])
        path = viterbi(layer, obs)
        np.testing.assert_array_equal(path.order1(), np.zeros(4, dtype=int))


class TestVbUpdate:
    def test_empty_batch_identity(self):
        layer = HmmLayer.uniform([2], [2])
        out = vb_update(layer, [], [])
        assert out is layer

    def test_twice_vs_batch_of_two(self):
        rng = np.random.default_rng(19)
        layer = random_layer(rng, 2, 2)
        obs = np.array([0, 1, 1, 0])
        traj = forward_backward(layer, obs)
        seq = vb_update(vb_update(layer, [traj], [obs]), [traj], [obs])
        bat = vb_update(layer, [traj, traj], [obs, obs])
        np.testing.assert_allclose(
            seq.trans_counts[0][0].counts, bat.trans_counts[0][0].counts, atol=1e-12
        )
        np.testing.assert_allclose(
            seq.obs_counts[0].counts, bat.obs_counts[0].counts, atol=1e-12
        )
        np.testing.assert_allclose(
            seq.init_counts[0][0].counts, bat.init_counts[0][0].counts, atol=1e-12
        )

    def test_recovers_generator_transitions(self):
        a_true = np.array([[0.9, 0.2], [0.1, 0.8]])
        b_true = np.array([[0.95, 0.05], [0.05, 0.95]])
        d_true = np.array([0.5, 0.5])
        gen = HmmLayer.from_tables(a_true, b_true, d_true)
        rng = stream(123, "hmm-recovery")
        states, obs, _ = generalized_rollout(gen, 10_000, rng)
        model = HmmLayer.from_tables(a_true, b_true, d_true)
        traj = forward_backward(model, obs[:, 0])
        learned = vb_update(HmmLayer.uniform([2], [2]), [traj], [obs[:, 0]])
        a_hat = learned.trans_counts[0][0].mean()
        np.testing.assert_allclose(a_hat, a_true, atol=0.02)

    def test_total_pseudocount_never_decreases(self):
        rng = np.random.default_rng(20)
        layer = HmmLayer.uniform([2], [2])
        obs = rng.integers(0, 2, size=8)
        traj = forward_backward(layer, obs)
        out = vb_update(layer, [traj], [obs])
        assert out.trans_counts[0][0].counts.sum() >= layer.trans_counts[0][0].counts.sum()
        assert out.obs_counts[0].counts.sum() >= layer.obs_counts[0].counts.sum()
        table = out.trans_counts[0][0].mean()
        np.testing.assert_allclose(table.sum(axis=0), np.ones(2), atol=1e-12)


class TestGeneralizedRollout:
    def test_plain_sampling_matches_hand_oracle(self):
        rng_a = stream(7, "rollout")
        rng_b = stream(7, "rollout")
        layer = random_layer(np.random.default_rng(21), 3, 2)
        states, obs, _ = generalized_rollout(layer, 50, rng_a)
        trans, obs_tab, init = layer.tables()
        s = sample_categorical(rng_b, init[0][0])
        o = sample_categorical(rng_b, obs_tab[0][:, s])
        assert states[0, 0, 0] == s and obs[0, 0] == o
        for t in range(1, 50):
            s = sample_categorical(rng_b, trans[0][0][:, s])
            o = sample_categorical(rng_b, obs_tab[0][:, s])
            assert states[t, 0, 0] == s and obs[t, 0] == o

    def test_frozen_increment_path_cycles(self):
        k = 3
        stay = np.eye(k)
        inc = np.roll(np.eye(k), 1, axis=0)
        order1 = np.stack([stay, inc], axis=2)  # (next, cur, path)
        order2 = np.array([[0.0, 0.0], [1.0, 1.0]])  # always path "increment"
        floor = 1e-12
        layer = HmmLayer(
            order_sizes=((k, 2),),
            num_obs=(k,),
            modality_factors=((0,),),
            controllable_orders=frozenset(),
            num_actions=0,
            trans_counts=(
                (DirichletCounts(order1 + floor), DirichletCounts(order2 + floor)),
            ),
            obs_counts=(DirichletCounts(np.eye(k) + floor),),
            init_counts=(
                (
                    DirichletCounts(np.array([1.0, floor, floor])),
                    DirichletCounts(np.array([floor, 1.0])),
                ),
            ),
        )
        states, obs, _ = generalized_rollout(layer, 9, stream(0, "cycle"))
        np.testing.assert_array_equal(states[:, 0, 0], np.arange(9) % k)
        np.testing.assert_array_equal(obs[:, 0], np.arange(9) % k)

    def test_empirical_frequencies_match_table(self):
        rng = np.random.default_rng(22)
        layer = random_layer(rng, 2, 2)
        states, _, _ = generalized_rollout(layer, 100_000, stream(3, "freq"))
        s = states[:, 0, 0]
        counts = np.zeros((2, 2))
        for t in range(len(s) - 1):
            counts[s[t + 1], s[t]] += 1
        emp = counts / counts.sum(axis=0, keepdims=True)
        expected = layer.tables()[0][0][0]
        np.testing.assert_allclose(emp, expected, atol=0.01)

    def test_controllable_requires_policy(self):
        layer = HmmLayer.uniform([2], [2], controllable_orders={1}, num_actions=2)
        with pytest.raises(ConfigError):
            generalized_rollout(layer, 5, stream(0, "x"))


class TestQuantize:
    def test_constant_sequence(self):
        codes, centers = quantize(np.full(10, 3.5), levels=4)
        np.testing.assert_array_equal(codes, np.zeros(10, dtype=int))
        np.testing.assert_allclose(centers, [3.5])
        np.testing.assert_allclose(centers[codes], np.full(10, 3.5))

    def test_two_levels_unit_range(self):
        codes, centers = quantize(np.array([0.0, 1.0]), levels=2)
        np.testing.assert_array_equal(codes, [0, 1])
        np.testing.assert_allclose(centers, [0.25, 0.75])

    def test_ramp_occupancy(self):
        v = np.linspace(0.0, 1.0, 400)
        codes, centers = quantize(v, levels=4)
        occ = np.bincount(codes, minlength=4)
        assert np.all(np.abs(occ - 100) <= 1)

    def test_round_trip_error_bound(self):
        rng = np.random.default_rng(23)
        v = rng.uniform(-5, 5, size=500)
        codes, centers = quantize(v, levels=8)
        width = (v.max() - v.min()) / 8
        assert np.max(np.abs(centers[codes] - v)) <= width / 2 + 1e-12

    def test_rejects_nonfinite(self):
        with pytest.raises(DataError):
            quantize(np.array([0.0, np.nan]), levels=2)


class TestVbEm:
    def test_trace_monotone(self):
        rng = stream(42, "vbem-data")
        gen = HmmLayer.from_tables(
            np.array([[0.85, 0.1], [0.15, 0.9]]),
            np.array([[0.9, 0.2], [0.1, 0.8]]),
            np.array([0.5, 0.5]),
        )
        _, obs, _ = generalized_rollout(gen, 120, rng)
        prior = HmmLayer.uniform([2], [2])
        _, trace = vb_em(prior, [obs[:, 0]], sweeps=12)
        diffs = np.diff(trace)
        assert np.all(diffs >= -1e-8)

    def test_fits_better_than_prior(self):
        rng = stream(43, "vbem-data2")
        gen = HmmLayer.from_tables(
            np.array([[0.95, 0.05], [0.05, 0.95]]),
            np.array([[0.95, 0.05], [0.05, 0.95]]),
            np.array([0.5, 0.5]),
        )
        _, obs, _ = generalized_rollout(gen, 200, rng)
        prior = HmmLayer.uniform([2], [2])
        _, trace = vb_em(prior, [obs[:, 0]], sweeps=15)
        assert trace[-1] > trace[0] + 10.0


def _rand_table(rng, shape):
    t = rng.uniform(0.1, 1.0, size=shape)
    return t / t.sum(axis=0, keepdims=True)


def _randomize_counts(layer, rng):
    from dataclasses import replace

    def jiggle(c):
        return DirichletCounts(rng.uniform(0.5, 3.0, size=c.counts.shape))

    return replace(
        layer,
        trans_counts=tuple(tuple(jiggle(t) for t in fac) for fac in layer.trans_counts),
        obs_counts=tuple(jiggle(o) for o in layer.obs_counts),
        init_counts=tuple(tuple(jiggle(i) for i in fac) for fac in layer.init_counts),
    )
