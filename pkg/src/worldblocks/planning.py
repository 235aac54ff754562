"""Finite-horizon control on learned models.

Candidate action sequences are scored by an expected-free-energy style
objective and the minimizer is chosen:

    EFE(policy) = preference cost - info_weight * information gain

where the preference cost is the negative expected log-preference of
the predicted observations and the information gain is the expected
KL between the state posterior and prior at each future step (the
mutual information between hidden state and observation under the
open-loop predictive), optionally plus the expected Dirichlet update
information of the count tables.  Discrete layers are scored by exact
forward propagation of beliefs; seeded Monte-Carlo rollouts cover
continuous and hierarchical models.  `act_loop` closes the loop:
infer, plan, act, observe, update.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import digamma, xlogy

from .composition import ModelGraph
from .distributions import CategoricalBelief, GaussianBelief
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .hmm import (
    DiscreteTrajectory,
    HmmLayer,
    _factor_init,
    _factor_transition,
    forward_backward,
    vb_update,
)
from .rng import sample_categorical, stream
from .slds import SldsLayer, simulate
from .structure import GrownMixture, grow_or_assign

POLICY_CAP = 1024


@dataclass(frozen=True)
class Preferences:
    """What the agent wants to observe.

    `log_prefs` maps a modality index to a vector of log-preference
    values over its symbols (discrete models).  `quad_mean` and
    `quad_precision` define a quadratic log-preference
    -(o - mean)' P (o - mean) / 2 over continuous observations.
    """

    log_prefs: dict = None
    quad_mean: np.ndarray = None
    quad_precision: np.ndarray = None

    def __post_init__(self):
        prefs = {} if self.log_prefs is None else dict(self.log_prefs)
        for m, vec in prefs.items():
            vec = np.asarray(vec, dtype=float)
            if vec.ndim != 1:
                raise ShapeError(f"modality {m}: preference vector must be 1-D")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"modality {m}: preference values must be finite")
            prefs[int(m)] = vec
        object.__setattr__(self, "log_prefs", prefs)
        if (self.quad_mean is None) != (self.quad_precision is None):
            raise ConfigError("quadratic preferences need both mean and precision")
        if self.quad_mean is not None:
            mean = np.asarray(self.quad_mean, dtype=float)
            prec = np.asarray(self.quad_precision, dtype=float)
            if mean.ndim != 1 or prec.shape != (mean.size, mean.size):
                raise ShapeError("quadratic preference shapes inconsistent")
            if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(prec))):
                raise DataError("quadratic preference values must be finite")
            if not np.allclose(prec, prec.T):
                raise ShapeError("preference precision must be symmetric")
            if np.min(np.linalg.eigvalsh(prec)) < -1e-9:
                raise ConfigError("preference precision must be positive-semidefinite")
            object.__setattr__(self, "quad_mean", mean)
            object.__setattr__(self, "quad_precision", prec)

    @classmethod
    def discrete(cls, log_prefs: dict) -> "Preferences":
        return cls(log_prefs=log_prefs)

    @classmethod
    def quadratic(cls, mean, precision) -> "Preferences":
        return cls(quad_mean=np.asarray(mean), quad_precision=np.asarray(precision))


@dataclass(frozen=True)
class PolicyEvaluation:
    """Per-policy decomposed scores; the chosen policy minimizes EFE."""

    policies: tuple
    preference_terms: np.ndarray
    info_gain_terms: np.ndarray
    info_weight: float
    horizon: int
    chosen: int
    standard_errors: np.ndarray = None

    @property
    def efe(self) -> np.ndarray:
        return self.preference_terms - self.info_weight * self.info_gain_terms

    @property
    def chosen_policy(self):
        return self.policies[self.chosen]


def enumerate_policies(num_actions: int, horizon: int, cap: int = POLICY_CAP) -> tuple:
    """All action sequences of the given length, in lexicographic order."""
    if num_actions < 1 or horizon < 1:
        raise ConfigError("need a non-empty action alphabet and horizon >= 1")
    if num_actions**horizon > cap:
        raise ConfigError(
            f"{num_actions}^{horizon} policies exceed the cap of {cap}"
        )
    return tuple(itertools.product(range(num_actions), repeat=horizon))


def _resolve_discrete(model) -> HmmLayer:
    if isinstance(model, HmmLayer):
        return model
    if isinstance(model, ModelGraph):
        discrete = [l for l in model.layers if isinstance(l, HmmLayer) and l.controllable]
        if len(discrete) != 1:
            raise ConfigError("graph must contain exactly one controllable discrete layer")
        return discrete[0]
    raise ConfigError(f"cannot plan on {type(model).__name__}")


def _check_policies(policies, num_actions: int) -> tuple:
    policies = tuple(tuple(int(a) for a in p) for p in policies)
    if not policies:
        raise ConfigError("need at least one policy")
    if len(policies) > POLICY_CAP:
        raise ConfigError(f"{len(policies)} policies exceed the cap of {POLICY_CAP}")
    horizon = len(policies[0])
    if horizon < 1:
        raise ConfigError("policies must contain at least one action")
    for p in policies:
        if len(p) != horizon:
            raise ConfigError("all policies must share one horizon")
        if any(not 0 <= a < num_actions for a in p):
            raise DataError("policy action outside the declared alphabet")
    return policies


def _belief_vector(layer: HmmLayer, belief, init_tables) -> np.ndarray:
    """Normalized joint belief over the layer's full configurations."""
    if belief is None:
        vec = _factor_init(layer, init_tables, 0)
        for f in range(1, layer.num_factors):
            vec = np.multiply.outer(vec, _factor_init(layer, init_tables, f))
        vec = vec.reshape(-1)
    elif isinstance(belief, DiscreteTrajectory):
        if belief.joint_marginals is not None:
            vec = belief.joint_marginals[-1].copy()
        else:
            vec = belief.factor_marginals[0][-1]
            for f in range(1, layer.num_factors):
                vec = np.multiply.outer(vec, belief.factor_marginals[f][-1])
            vec = vec.reshape(-1)
    else:
        vec = np.asarray(belief, dtype=float).reshape(-1)
        if vec.size != layer.joint_size:
            raise ShapeError(
                f"belief must cover {layer.joint_size} configurations; got {vec.size}"
            )
    if np.any(vec < -1e-12) or not np.all(np.isfinite(vec)):
        raise DataError("belief must be a finite non-negative vector")
    total = vec.sum()
    if total <= 0:
        raise DataError("belief must have positive mass")
    return np.clip(vec, 0.0, None) / total


def _joint_step(layer: HmmLayer, mats, q: np.ndarray) -> np.ndarray:
    """One action-conditioned push of the joint belief (factor chains)."""
    f_sizes = tuple(layer.factor_size(f) for f in range(layer.num_factors))
    grid = q.reshape(f_sizes)
    for f in range(layer.num_factors):
        grid = np.moveaxis(np.tensordot(mats[f], grid, axes=([1], [f])), 0, f)
    return grid.reshape(-1)


def _obs_tensors(layer: HmmLayer, obs_tables) -> list:
    """Per-modality (O_m, joint_size) conditional observation tables."""
    f_sizes = tuple(layer.factor_size(f) for f in range(layer.num_factors))
    grids = np.unravel_index(np.arange(layer.joint_size), f_sizes)
    order1 = [
        grids[f] // (f_sizes[f] // layer.order_sizes[f][0])
        for f in range(layer.num_factors)
    ]
    return [
        obs_tables[m][(slice(None),) + tuple(order1[fi] for fi in facs)]
        for m, facs in enumerate(layer.modality_factors)
    ]


def _joint_obs_tensor(tensors) -> np.ndarray:
    """(prod O_m, joint_size) likelihood of the full observation tuple."""
    full = tensors[0]
    for tab in tensors[1:]:
        full = np.einsum("os,ps->ops", full, tab).reshape(-1, tab.shape[1])
    return full


def _state_info_gain(q: np.ndarray, joint_obs: np.ndarray) -> float:
    """Mutual information between state and observation tuple."""
    weighted = joint_obs * q
    marg = weighted.sum(axis=1)
    return float(np.sum(xlogy(weighted, joint_obs)) - np.sum(xlogy(marg, marg)))


def _one_count_kls(counts: np.ndarray) -> np.ndarray:
    """KL(Dir(a + e_j) || Dir(a)) for every entry j, batched over columns."""
    total = counts.sum(axis=0, keepdims=True)
    return np.log(total) - np.log(counts) + digamma(counts + 1.0) - digamma(total + 1.0)


def _axis_marginal(layer: HmmLayer, q: np.ndarray, keep_axes) -> np.ndarray:
    """Marginal of the joint belief over selected (factor, order) axes."""
    shape = tuple(s for f in range(layer.num_factors) for s in layer.order_sizes[f])
    offsets = np.cumsum([0] + [len(layer.order_sizes[f]) for f in range(layer.num_factors)])
    keep = [offsets[f] + g for f, g in keep_axes]
    drop = tuple(i for i in range(len(shape)) if i not in keep)
    return q.reshape(shape).sum(axis=drop)


def _param_info_gain(layer, q_prev, q_now, obs_tensors, trans_tables, obs_tables, acts):
    """Expected Dirichlet-update information for one predicted step."""
    gain = 0.0
    for m, facs in enumerate(layer.modality_factors):
        marg = _axis_marginal(layer, q_now, [(f, 0) for f in facs]).reshape(-1)
        cols = layer.obs_counts[m].counts.reshape(layer.num_obs[m], -1)
        probs = obs_tables[m].reshape(layer.num_obs[m], -1)
        gain += float(np.sum(marg * np.sum(probs * _one_count_kls(cols), axis=0)))
    a = acts
    for f in range(layer.num_factors):
        sizes = layer.order_sizes[f]
        for g in range(len(sizes)):
            counts = layer.trans_counts[f][g].counts
            table = trans_tables[f][g]
            if (g + 1) in layer.controllable_orders:
                counts = counts[..., a]
                table = table[..., a]
            axes = [(f, g)] + ([(f, g + 1)] if g + 1 < len(sizes) else [])
            marg = _axis_marginal(layer, q_prev, axes).reshape(-1)
            cols = counts.reshape(sizes[g], -1)
            probs = table.reshape(sizes[g], -1)
            gain += float(np.sum(marg * np.sum(probs * _one_count_kls(cols), axis=0)))
    return gain


def _discrete_pref_vectors(layer: HmmLayer, prefs: Preferences) -> dict:
    if prefs.quad_mean is not None:
        raise ConfigError("quadratic preferences apply to continuous observations")
    out = {}
    for m, vec in prefs.log_prefs.items():
        if not 0 <= m < len(layer.num_obs):
            raise ConfigError(f"preference names unknown modality {m}")
        if vec.size != layer.num_obs[m]:
            raise ShapeError(
                f"modality {m}: preference vector must have {layer.num_obs[m]} entries"
            )
        out[m] = vec
    return out


def evaluate_policies_discrete(
    model,
    belief,
    policies,
    prefs: Preferences,
    *,
    info_weight: float = 1.0,
    param_gain: bool = False,
    mode: str = "mean",
) -> PolicyEvaluation:
    """Score each policy by exact open-loop belief propagation.

    The belief may be None (the layer's initial distribution), a
    smoothed trajectory (its final step is used), or a vector over the
    layer's joint configurations.  Ties go to the first policy listed.
    """
    layer = _resolve_discrete(model)
    if not layer.controllable:
        raise ConfigError("model takes no actions; nothing to plan")
    policies = _check_policies(policies, layer.num_actions)
    pref_vecs = _discrete_pref_vectors(layer, prefs)
    trans_tables, obs_tables, init_tables = layer.tables(mode)
    q0 = _belief_vector(layer, belief, init_tables)
    obs_tensors = _obs_tensors(layer, obs_tables)
    joint_obs = _joint_obs_tensor(obs_tensors)
    mats = {
        a: [
            _factor_transition(layer, trans_tables, f, a)
            for f in range(layer.num_factors)
        ]
        for a in range(layer.num_actions)
    }

    pref_terms = np.zeros(len(policies))
    gain_terms = np.zeros(len(policies))
    for i, policy in enumerate(policies):
        q = q0
        value = 0.0
        gain = 0.0
        for a in policy:
            q_next = _joint_step(layer, mats[a], q)
            for m, vec in pref_vecs.items():
                value += float(obs_tensors[m] @ q_next @ vec)
            gain += _state_info_gain(q_next, joint_obs)
            if param_gain:
                gain += _param_info_gain(
                    layer, q, q_next, obs_tensors, trans_tables, obs_tables, a
                )
            q = q_next
        pref_terms[i] = -value
        gain_terms[i] = gain
    efe = pref_terms - info_weight * gain_terms
    if not np.all(np.isfinite(efe)):
        raise NumericalError("policy scores are not finite")
    return PolicyEvaluation(
        policies=policies,
        preference_terms=pref_terms,
        info_gain_terms=gain_terms,
        info_weight=float(info_weight),
        horizon=len(policies[0]),
        chosen=int(np.argmin(efe)),
    )


def _rollout_discrete(layer, belief, policies, pref_vecs, num_rollouts, seed, info_weight):
    trans_tables, obs_tables, init_tables = layer.tables("mean")
    q0 = _belief_vector(layer, belief, init_tables)
    obs_tensors = _obs_tensors(layer, obs_tables)
    mats = {
        a: [_factor_transition(layer, trans_tables, f, a) for f in range(layer.num_factors)]
        for a in range(layer.num_actions)
    }
    horizon = len(policies[0])
    joint_mats = {}
    for a, fac_mats in mats.items():
        full = fac_mats[0]
        for m in fac_mats[1:]:
            full = np.kron(full, m)
        joint_mats[a] = full
    # open-loop marginals are deterministic per policy; precompute them
    open_loop = {}
    for policy in policies:
        qs = []
        q = q0
        for a in policy:
            q = joint_mats[a] @ q
            qs.append(q)
        open_loop[policy] = qs

    pref_terms = np.zeros(len(policies))
    gain_terms = np.zeros(len(policies))
    errors = np.zeros(len(policies))
    for i, policy in enumerate(policies):
        samples = np.zeros(num_rollouts)
        prefs_acc = 0.0
        gains_acc = 0.0
        for r in range(num_rollouts):
            rng = stream(seed, f"plan:{r}")
            s = sample_categorical(rng, q0)
            value = 0.0
            gain = 0.0
            for step, a in enumerate(policy):
                s = sample_categorical(rng, joint_mats[a][:, s])
                q_open = open_loop[policy][step]
                lik = 1.0
                for m, tab in enumerate(obs_tensors):
                    o = sample_categorical(rng, tab[:, s])
                    if m in pref_vecs:
                        value += float(pref_vecs[m][o])
                    lik_m = tab[o]
                    gain += float(np.log(lik_m[s]))
                    lik = lik * lik_m
                gain -= float(np.log(lik @ q_open))
            samples[r] = -value - info_weight * gain
            prefs_acc += -value
            gains_acc += gain
        pref_terms[i] = prefs_acc / num_rollouts
        gain_terms[i] = gains_acc / num_rollouts
        errors[i] = (
            float(np.std(samples, ddof=1) / np.sqrt(num_rollouts))
            if num_rollouts > 1
            else 0.0
        )
    return pref_terms, gain_terms, errors, horizon


def _rollout_continuous(layer, belief, policies, prefs, num_rollouts, seed, info_weight):
    if prefs.quad_mean is None:
        raise ConfigError("continuous rollouts need quadratic preferences")
    if prefs.log_prefs:
        raise ConfigError("discrete preference vectors do not apply to continuous observations")
    if belief is not None:
        switch, state = belief
        if not isinstance(switch, CategoricalBelief) or not isinstance(state, GaussianBelief):
            raise ConfigError(
                "continuous belief must be (CategoricalBelief, GaussianBelief)"
            )
        layer = replace(layer, switch_init=switch, state_init=state)
    horizon = len(policies[0])
    width = layer.control_dim
    checked = []
    for p in policies:
        arr = np.asarray(p, dtype=float)
        if arr.ndim == 1 and width == 1:
            arr = arr[:, None]
        if arr.shape != (horizon, width):
            raise ShapeError(f"each policy must be ({horizon}, {width}) controls")
        checked.append(arr)
    mean, prec = prefs.quad_mean, prefs.quad_precision
    if mean.size != layer.obs_dim:
        raise ShapeError("preference mean must match the observation dimension")
    pref_terms = np.zeros(len(policies))
    errors = np.zeros(len(policies))
    for i, controls in enumerate(checked):
        samples = np.zeros(num_rollouts)
        for r in range(num_rollouts):
            rng = stream(seed, f"plan:{r}")
            # control row t drives the transition into step t + 1, so the
            # H policy rows cover exactly the H predicted steps
            _, _, obs = simulate(layer, horizon + 1, rng, controls=controls)
            resid = obs[1:] - mean
            samples[r] = 0.5 * float(np.einsum("ti,ij,tj->", resid, prec, resid))
        pref_terms[i] = samples.mean()
        errors[i] = (
            float(np.std(samples, ddof=1) / np.sqrt(num_rollouts))
            if num_rollouts > 1
            else 0.0
        )
    return pref_terms, np.zeros(len(policies)), errors, horizon


def _rollout_graph(graph, belief, policies, prefs, num_rollouts, seed, info_weight):
    if belief is not None:
        raise ConfigError("hierarchical rollouts start from the model prior; belief must be None")
    if len(graph.roots) != 1:
        raise ConfigError("hierarchical rollouts need a single root layer")
    root_idx = graph.roots[0]
    root = graph.layers[root_idx]
    if not (isinstance(root, HmmLayer) and root.controllable):
        raise ConfigError("hierarchical rollouts require a controllable discrete root layer")
    takers = [
        l for l in graph.layers if getattr(l, "controllable", False) or getattr(l, "control_dim", 0)
    ]
    if len(takers) != 1:
        raise ConfigError("exactly one layer may take actions in a hierarchical rollout")
    from .composition import generate

    pref_vecs = _discrete_pref_vectors(root, prefs)
    policies = _check_policies(policies, root.num_actions)
    horizon = len(policies[0])
    pref_terms = np.zeros(len(policies))
    errors = np.zeros(len(policies))
    for i, policy in enumerate(policies):
        samples = np.zeros(num_rollouts)
        for r in range(num_rollouts):
            rng = stream(seed, f"plan:{r}")
            sample = generate(graph, horizon + 1, rng, actions=np.asarray(policy))[root_idx]
            value = 0.0
            for m, vec in pref_vecs.items():
                value += float(vec[sample.obs[1:, m]].sum())
            samples[r] = -value
        pref_terms[i] = samples.mean()
        errors[i] = (
            float(np.std(samples, ddof=1) / np.sqrt(num_rollouts))
            if num_rollouts > 1
            else 0.0
        )
    return pref_terms, np.zeros(len(policies)), errors, horizon


def evaluate_policies_rollout(
    model,
    belief,
    policies,
    prefs: Preferences,
    num_rollouts: int,
    seed: int,
    *,
    info_weight: float = 1.0,
) -> PolicyEvaluation:
    """Score policies by seeded Monte-Carlo rollouts.

    Rollout r uses the same random stream for every policy (common
    random numbers), so policies are compared on coupled futures.  For
    discrete layers the information gain is estimated by sampled
    per-step log-likelihood ratios against the open-loop predictive
    (converging to the exact mutual information); continuous and
    hierarchical rollouts score preferences only.  Standard errors are
    per-policy estimator errors of the EFE mean (0 for one rollout).
    """
    if num_rollouts < 1:
        raise ConfigError("need at least one rollout")
    if isinstance(model, ModelGraph) and model.num_layers == 1:
        model = model.layers[0]
    if isinstance(model, HmmLayer):
        if not model.controllable:
            raise ConfigError("model takes no actions; nothing to plan")
        policies = _check_policies(policies, model.num_actions)
        pref_vecs = _discrete_pref_vectors(model, prefs)
        pref, gain, err, horizon = _rollout_discrete(
            model, belief, policies, pref_vecs, num_rollouts, seed, info_weight
        )
    elif isinstance(model, SldsLayer):
        if not model.control_dim:
            raise ConfigError("model takes no controls; nothing to plan")
        if not policies:
            raise ConfigError("need at least one policy")
        pref, gain, err, horizon = _rollout_continuous(
            model, belief, list(policies), prefs, num_rollouts, seed, info_weight
        )
        policies = tuple(
            tuple(map(tuple, np.atleast_2d(np.asarray(p, dtype=float).T).T))
            for p in policies
        )
    elif isinstance(model, ModelGraph):
        pref, gain, err, horizon = _rollout_graph(
            model, belief, policies, prefs, num_rollouts, seed, info_weight
        )
        policies = _check_policies(policies, model.layers[model.roots[0]].num_actions)
    else:
        raise ConfigError(f"cannot plan on {type(model).__name__}")
    efe = pref - info_weight * gain
    if not np.all(np.isfinite(efe)):
        raise NumericalError("rollout produced non-finite policy scores")
    return PolicyEvaluation(
        policies=tuple(policies),
        preference_terms=pref,
        info_gain_terms=gain,
        info_weight=float(info_weight),
        horizon=horizon,
        chosen=int(np.argmin(efe)),
        standard_errors=err,
    )


# ---------------------------------------------------------------------------
# the closed loop


@dataclass(frozen=True)
class PlannerConfig:
    """How the acting agent plans and learns.

    plan_horizon 0 disables planning: actions are drawn uniformly and
    each log record carries a fallback flag.  rollouts 0 uses exact
    discrete evaluation; a positive value switches to the Monte-Carlo
    scorer with that many rollouts per step.
    """

    plan_horizon: int = 2
    info_weight: float = 1.0
    param_gain: bool = False
    learn: bool = True
    rollouts: int = 0
    grow: bool = False
    growth: object = None
    growth_base: object = None

    def __post_init__(self):
        if self.plan_horizon < 0:
            raise ConfigError("plan horizon must be >= 0")
        if self.rollouts < 0:
            raise ConfigError("rollouts must be >= 0")
        if self.grow and (self.growth is None or self.growth_base is None):
            raise ConfigError("growth needs a GrowthConfig and a base component prior")


@dataclass(frozen=True)
class PlanStep:
    """One closed-loop step: what was seen, chosen, and scored."""

    t: int
    observation: tuple
    action: int
    reward: float
    elbo: float
    efe: float
    micros: int
    fallback: bool


@dataclass(frozen=True)
class EpisodeLog:
    steps: tuple
    total_reward: float
    fallback_used: bool
    components: int = None


def _check_env_model(env, layer: HmmLayer):
    spec = env.spec
    if spec.obs_kind != "discrete":
        raise ConfigError("the acting loop drives discrete environments")
    if not layer.controllable:
        raise ConfigError("acting needs a controllable model")
    if layer.num_actions != spec.num_actions:
        raise ConfigError(
            f"model takes {layer.num_actions} actions but the environment offers {spec.num_actions}"
        )
    if tuple(layer.num_obs) != tuple(spec.obs_sizes):
        raise ConfigError(
            f"model observes {layer.num_obs} but the environment emits {spec.obs_sizes}"
        )


def act_loop(env, layer: HmmLayer, prefs: Preferences, config: PlannerConfig, episodes: int, *, seed: int = 0):
    """Run seeded closed-loop episodes: infer, plan, act, learn.

    Returns (episode logs, final layer).  Each step smooths the episode
    so far, scores all action sequences of the configured horizon, and
    takes the first action of the minimizer; after each episode the
    layer's counts absorb the episode's expected statistics when
    learning is on.
    """
    if episodes < 1:
        raise ConfigError("need at least one episode")
    _check_env_model(env, layer)
    logs = []
    for ep in range(episodes):
        ep_rng = stream(seed, f"act:{ep}")
        obs_rows = [env.reset(ep)]
        acts = []
        steps = []
        mixture = (
            GrownMixture.empty(config.growth_base) if config.grow else None
        )
        fallback_used = False
        while True:
            t0 = time.perf_counter_ns()
            traj = forward_backward(
                layer, np.asarray(obs_rows), np.asarray(acts) if acts else None
            )
            if mixture is not None:
                mixture, _ = grow_or_assign(
                    mixture, np.asarray(obs_rows[-1], dtype=float), config.growth
                )
            if config.plan_horizon == 0:
                action = int(ep_rng.integers(layer.num_actions))
                efe = float("nan")
                fallback = True
            else:
                policies = enumerate_policies(layer.num_actions, config.plan_horizon)
                if config.rollouts:
                    ev = evaluate_policies_rollout(
                        layer,
                        traj,
                        policies,
                        prefs,
                        config.rollouts,
                        seed * 1_000_003 + ep * 1_009 + len(acts),
                        info_weight=config.info_weight,
                    )
                else:
                    ev = evaluate_policies_discrete(
                        layer,
                        traj,
                        policies,
                        prefs,
                        info_weight=config.info_weight,
                        param_gain=config.param_gain,
                    )
                action = ev.chosen_policy[0]
                efe = float(ev.efe[ev.chosen])
                fallback = False
            fallback_used = fallback_used or fallback
            rec = env.step(action)
            micros = (time.perf_counter_ns() - t0) // 1000
            obs_rows.append(rec.observation)
            acts.append(action)
            steps.append(
                PlanStep(
                    t=rec.t,
                    observation=rec.observation,
                    action=action,
                    reward=rec.reward,
                    elbo=float(traj.log_evidence),
                    efe=efe,
                    micros=int(micros),
                    fallback=fallback,
                )
            )
            if rec.terminal:
                break
        if config.learn:
            obs_arr = np.asarray(obs_rows)
            traj = forward_backward(layer, obs_arr, np.asarray(acts))
            layer = vb_update(layer, [traj], [obs_arr], [np.asarray(acts)])
        logs.append(
            EpisodeLog(
                steps=tuple(steps),
                total_reward=float(sum(s.reward for s in steps)),
                fallback_used=fallback_used,
                components=mixture.num_components if mixture is not None else None,
            )
        )
    return logs, layer


def write_episode_log(path, logs):
    """Line-per-step record of the loop, byte-stable for fixed seeds.

    Columns: episode, t, observation symbols (comma joined), action,
    reward, smoothing ELBO, EFE of the chosen policy, fallback flag.
    Wall-clock timings go to a separate sidecar (`write_timing_sidecar`)
    so the main log stays reproducible.
    """
    lines = ["episode\tt\tobs\taction\treward\telbo\tefe\tfallback"]
    for ep, log in enumerate(logs):
        for s in log.steps:
            lines.append(
                "\t".join(
                    [
                        str(ep),
                        str(s.t),
                        ",".join(str(int(o)) for o in s.observation),
                        str(s.action),
                        repr(float(s.reward)),
                        repr(float(s.elbo)),
                        repr(float(s.efe)),
                        str(int(s.fallback)),
                    ]
                )
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_timing_sidecar(path, logs):
    """Per-step wall-clock microseconds, kept apart from the replayable log."""
    lines = ["episode\tt\tmicros"]
    for ep, log in enumerate(logs):
        for s in log.steps:
            lines.append(f"{ep}\t{s.t}\t{s.micros}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
