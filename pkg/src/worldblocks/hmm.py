"""Discrete building block: generalized, factorial, controllable HMMs.

A layer holds F independent factorial chains.  Each chain carries G
generalized orders: order 1 is the observed-through-likelihood state and
order g+1 is a categorical "path" variable that selects which transition
table order g applies this step (the discrete analogue of velocity).
Declaring an order controllable adds an action axis to its transition
table; controlling order 1 turns the layer into a POMDP.

Inference is exact on the joint chain whenever the full product state
space is small (= `joint_limit`); beyond that, factors are decoupled by
mean-field sweeps while each factor's own orders stay exactly coupled.

Parameter handling has two modes throughout:
  - "mean":      tables are normalized pseudo-counts (plain inference);
  - "geometric": tables are exp(E[log p]) under the Dirichlet posterior
                 (sub-normalized; used inside variational EM, where the
                 forward pass log-normalizer enters the bound).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .distributions import DirichletCounts, dirichlet_expected_log, dirichlet_kl
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .rng import sample_categorical

_LETTERS = "abcdefghijklmnop"


def _normalize_obs(obs, num_modalities: int) -> np.ndarray:
    o = np.asarray(obs)
    if o.ndim == 1:
        o = o[:, None]
    if o.ndim != 2 or o.shape[1] != num_modalities:
        raise ShapeError(
            f"observations must be (T, {num_modalities}); got shape {o.shape}"
        )
    if o.size and not np.issubdtype(o.dtype, np.integer):
        if not np.all(o == np.floor(o)):
            raise DataError("observation symbols must be integers")
        o = o.astype(int)
    return o.astype(int)


@dataclass(frozen=True)
class HmmLayer:
    """Factorial, generalized, optionally controllable hidden Markov layer.

    order_sizes[f] lists the per-order state-space sizes of factor f,
    order 1 first.  Transition tables are stored as Dirichlet counts:
      order g < G : (S_g', S_g, S_{g+1})  — next, current, current path
      order G     : (S_G', S_G)
    with a trailing action axis when the order is controllable.
    Observation tables join each modality to the order-1 states of its
    attached factors: (O_m, K_f1, K_f2, ...).
    """

    order_sizes: tuple
    num_obs: tuple
    modality_factors: tuple
    controllable_orders: frozenset
    num_actions: int
    trans_counts: tuple
    obs_counts: tuple
    init_counts: tuple
    prior_count: float = 0.1

    def __post_init__(self):
        object.__setattr__(
            self, "order_sizes", tuple(tuple(int(s) for s in f) for f in self.order_sizes)
        )
        object.__setattr__(self, "num_obs", tuple(int(o) for o in self.num_obs))
        object.__setattr__(
            self, "modality_factors", tuple(tuple(int(i) for i in m) for m in self.modality_factors)
        )
        object.__setattr__(self, "controllable_orders", frozenset(int(g) for g in self.controllable_orders))
        if not self.order_sizes or any(len(f) == 0 for f in self.order_sizes):
            raise ConfigError("need at least one factor with at least one order")
        depths = {len(f) for f in self.order_sizes}
        if len(depths) != 1:
            raise ConfigError("all factors must share the same generalized depth")
        g_depth = depths.pop()
        if any(s < 1 for f in self.order_sizes for s in f):
            raise ConfigError("state-space sizes must be >= 1")
        if self.controllable_orders and not self.controllable_orders <= set(range(1, g_depth + 1)):
            raise ConfigError("controllable orders must lie in 1..gen_depth")
        if bool(self.controllable_orders) != (self.num_actions > 0):
            raise ConfigError("action alphabet declared iff some order is controllable")
        if len(self.modality_factors) != len(self.num_obs):
            raise ConfigError("one factor list per modality required")
        for m, facs in enumerate(self.modality_factors):
            if not facs or list(facs) != sorted(set(facs)):
                raise ConfigError(f"modality {m}: factor list must be sorted and non-empty")
            if max(facs) >= len(self.order_sizes):
                raise ConfigError(f"modality {m}: factor index out of range")
        if len(self.trans_counts) != len(self.order_sizes):
            raise ShapeError("one transition-table list per factor required")
        for f, sizes in enumerate(self.order_sizes):
            if len(self.trans_counts[f]) != g_depth or len(self.init_counts[f]) != g_depth:
                raise ShapeError(f"factor {f}: need one transition and one init table per order")
            for g in range(g_depth):
                expect = self._trans_shape(f, g + 1)
                got = self.trans_counts[f][g].counts.shape
                if got != expect:
                    raise ShapeError(
                        f"factor {f} order {g + 1}: transition counts shape {got}, expected {expect}"
                    )
                if self.init_counts[f][g].counts.shape != (sizes[g],):
                    raise ShapeError(f"factor {f} order {g + 1}: bad init counts shape")
        for m, facs in enumerate(self.modality_factors):
            expect = (self.num_obs[m],) + tuple(self.order_sizes[fi][0] for fi in facs)
            got = self.obs_counts[m].counts.shape
            if got != expect:
                raise ShapeError(f"modality {m}: observation counts shape {got}, expected {expect}")

    def _trans_shape(self, f: int, g: int) -> tuple:
        sizes = self.order_sizes[f]
        shape = (sizes[g - 1], sizes[g - 1])
        if g < len(sizes):
            shape = shape + (sizes[g],)
        if g in self.controllable_orders:
            shape = shape + (self.num_actions,)
        return shape

    @property
    def num_factors(self) -> int:
        return len(self.order_sizes)

    @property
    def gen_depth(self) -> int:
        return len(self.order_sizes[0])

    @property
    def num_states(self) -> tuple:
        return tuple(f[0] for f in self.order_sizes)

    @property
    def controllable(self) -> bool:
        return bool(self.controllable_orders)

    def factor_size(self, f: int) -> int:
        return int(np.prod(self.order_sizes[f]))

    @property
    def joint_size(self) -> int:
        return int(np.prod([self.factor_size(f) for f in range(self.num_factors)]))

    @classmethod
    def uniform(
        cls,
        num_states,
        num_obs,
        *,
        gen_depth: int = 1,
        path_sizes=None,
        modality_factors=None,
        controllable_orders=(),
        num_actions: int = 0,
        prior: float = 0.1,
    ) -> "HmmLayer":
        """Layer with every table at a flat pseudo-count of `prior`.

        `num_states` gives order-1 sizes per factor; `path_sizes` (one
        tuple per factor, orders 2..G) defaults to repeating the order-1
        size.  Modalities attach to all factors unless told otherwise.
        """
        num_states = tuple(int(k) for k in np.atleast_1d(num_states))
        num_obs = tuple(int(o) for o in np.atleast_1d(num_obs))
        if path_sizes is None:
            path_sizes = tuple((k,) * (gen_depth - 1) for k in num_states)
        order_sizes = tuple(
            (num_states[f],) + tuple(path_sizes[f]) for f in range(len(num_states))
        )
        if modality_factors is None:
            modality_factors = tuple(tuple(range(len(num_states))) for _ in num_obs)
        layer_shape = cls(
            order_sizes=order_sizes,
            num_obs=num_obs,
            modality_factors=tuple(tuple(m) for m in modality_factors),
            controllable_orders=frozenset(controllable_orders),
            num_actions=num_actions,
            trans_counts=tuple(
                tuple(
                    DirichletCounts.uniform(
                        cls._static_trans_shape(order_sizes, f, g + 1, frozenset(controllable_orders), num_actions),
                        prior,
                    )
                    for g in range(gen_depth)
                )
                for f in range(len(num_states))
            ),
            obs_counts=tuple(
                DirichletCounts.uniform(
                    (num_obs[m],) + tuple(order_sizes[fi][0] for fi in modality_factors[m]), prior
                )
                for m in range(len(num_obs))
            ),
            init_counts=tuple(
                tuple(DirichletCounts.uniform((order_sizes[f][g],), prior) for g in range(gen_depth))
                for f in range(len(num_states))
            ),
            prior_count=prior,
        )
        return layer_shape

    @staticmethod
    def _static_trans_shape(order_sizes, f, g, controllable, num_actions):
        sizes = order_sizes[f]
        shape = (sizes[g - 1], sizes[g - 1])
        if g < len(sizes):
            shape = shape + (sizes[g],)
        if g in controllable:
            shape = shape + (num_actions,)
        return shape

    @classmethod
    def from_tables(cls, trans, obs, init, *, floor: float = 1e-12) -> "HmmLayer":
        """Single-factor, depth-1 layer whose expected tables equal the
        given probability tables (a tiny floor keeps counts positive).

        trans: (K, K) as [next, current], or (K, K, A) for a POMDP;
        obs: (O, K); init: (K,).
        """
        trans = np.asarray(trans, dtype=float)
        obs = np.asarray(obs, dtype=float)
        init = np.asarray(init, dtype=float)
        controllable = trans.ndim == 3
        k = init.size
        return cls(
            order_sizes=((k,),),
            num_obs=(obs.shape[0],),
            modality_factors=((0,),),
            controllable_orders=frozenset({1}) if controllable else frozenset(),
            num_actions=trans.shape[2] if controllable else 0,
            trans_counts=((DirichletCounts(trans + floor),),),
            obs_counts=(DirichletCounts(obs + floor),),
            init_counts=((DirichletCounts(init + floor),),),
        )

    def tables(self, mode: str = "mean"):
        """Normalized (mean) or exp-expected-log (geometric) tables.

        Returns (trans, obs, init) mirroring the count nesting.
        """
        if mode == "mean":
            conv = lambda c: c.mean()
        elif mode == "geometric":
            conv = lambda c: np.exp(dirichlet_expected_log(c))
        else:
            raise ConfigError(f"unknown parameter mode {mode!r}")
        trans = tuple(tuple(conv(t) for t in fac) for fac in self.trans_counts)
        obs = tuple(conv(o) for o in self.obs_counts)
        init = tuple(tuple(conv(i) for i in fac) for fac in self.init_counts)
        return trans, obs, init


@dataclass
class DiscreteTrajectory:
    """Smoothed posterior over a layer's hidden chains.

    factor_marginals[f][t] is the posterior over factor f's joint order
    tuple (raveled C-order, order 1 slowest); factor_pairwise[f][t] is
    the (current, next) pairwise marginal between steps t and t+1.
    joint_marginals holds the full cross-factor posterior when inference
    was exact.  log_evidence is the exact log marginal likelihood in the
    exact regime and an evidence lower bound in the mean-field regime.
    """

    factor_marginals: list
    factor_pairwise: list
    log_evidence: float
    order_sizes: tuple
    joint_marginals: np.ndarray = None
    exact: bool = True

    @property
    def horizon(self) -> int:
        return self.factor_marginals[0].shape[0]

    def order_marginal(self, f: int, g: int) -> np.ndarray:
        """(T, S_g) marginal of factor f's order-g variable."""
        sizes = self.order_sizes[f]
        t = self.factor_marginals[f].shape[0]
        cube = self.factor_marginals[f].reshape((t,) + tuple(sizes))
        axes = tuple(i + 1 for i in range(len(sizes)) if i != g - 1)
        return cube.sum(axis=axes) if axes else cube.reshape(t, sizes[0])

    def state_marginals(self, f: int = 0) -> np.ndarray:
        """(T, K) posterior over factor f's order-1 state."""
        return self.order_marginal(f, 1)


def _factor_transition(layer: HmmLayer, trans_tables, f: int, action) -> np.ndarray:
    """(S_f, S_f) one-step matrix [next, current] over factor f's order tuple."""
    sizes = layer.order_sizes[f]
    g_depth = len(sizes)
    full = np.ones(tuple(sizes) * 2)
    for g in range(g_depth):
        tab = trans_tables[f][g]
        if (g + 1) in layer.controllable_orders:
            if action is None:
                raise ConfigError("controllable layer requires actions")
            tab = tab[..., action]
        shape = [1] * (2 * g_depth)
        shape[g] = sizes[g]
        shape[g_depth + g] = sizes[g]
        if g < g_depth - 1:
            shape[g_depth + g + 1] = sizes[g + 1]
        full = full * tab.reshape(shape)
    s = layer.factor_size(f)
    return full.reshape(s, s)


def _factor_init(layer: HmmLayer, init_tables, f: int) -> np.ndarray:
    sizes = layer.order_sizes[f]
    vec = np.ones(())
    for g in range(len(sizes)):
        vec = np.multiply.outer(vec, init_tables[f][g])
    return vec.reshape(layer.factor_size(f))


def _obs_loglik_tensor(layer: HmmLayer, obs_tables, obs_row) -> np.ndarray:
    """Broadcastable per-step log-likelihood over all factor/order axes.

    Axes are (factor 0 order 1, ..., factor F-1 order G); only attached
    order-1 axes are materialized, everything else stays singleton.
    """
    g_depth = layer.gen_depth
    n_axes = layer.num_factors * g_depth
    with np.errstate(divide="ignore"):
        out = np.zeros((1,) * n_axes)
        for m, facs in enumerate(layer.modality_factors):
            sym = int(obs_row[m])
            if not 0 <= sym < layer.num_obs[m]:
                raise DataError(f"modality {m}: symbol {sym} outside alphabet of size {layer.num_obs[m]}")
            slab = np.log(obs_tables[m][sym])
            shape = [1] * n_axes
            for fi in facs:
                shape[fi * g_depth] = layer.order_sizes[fi][0]
            out = out + slab.reshape(shape)
    return out


def _check_actions(layer: HmmLayer, actions, t_steps: int):
    if layer.controllable:
        if actions is None:
            if t_steps <= 1:
                return np.zeros(0, dtype=int)
            raise ConfigError("layer is controllable: provide an action sequence")
        a = np.asarray(actions, dtype=int)
        if a.shape != (max(t_steps - 1, 0),):
            raise ShapeError(f"need {t_steps - 1} actions for {t_steps} observations; got {a.shape}")
        if a.size and (a.min() < 0 or a.max() >= layer.num_actions):
            raise DataError("action index outside the declared alphabet")
        return a
    if actions is not None and len(actions) > 0:
        raise ConfigError("layer is passive: actions not accepted")
    return np.zeros(max(t_steps - 1, 0), dtype=int)


def _lse(arr, axis=None):
    """Stable log-sum-exp kept local to avoid per-step dispatch overhead
    in the time loops (scipy's version costs ~50x more per call)."""
    if axis is None:
        m = float(np.max(arr))
        if not np.isfinite(m):
            m = 0.0
        with np.errstate(divide="ignore"):
            return float(np.log(np.sum(np.exp(arr - m))) + m)
    m = np.max(arr, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(arr - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


def _log_forward_backward(log_init, log_trans_seq, log_lik):
    """Log-space smoothing on one chain.

    log_trans_seq[t] is the [next, current] log-transition used between
    steps t and t+1.  Returns (gamma, xi, log_evidence) with xi indexed
    [t, current, next].
    """
    t_steps, s = log_lik.shape
    la = np.empty((t_steps, s))
    la[0] = log_init + log_lik[0]
    for t in range(1, t_steps):
        la[t] = log_lik[t] + _lse(log_trans_seq[t - 1] + la[t - 1][None, :], axis=1)
    log_z = _lse(la[-1])
    if not np.isfinite(log_z):
        raise NumericalError("observation sequence has zero probability under the model")
    lb = np.zeros((t_steps, s))
    for t in range(t_steps - 2, -1, -1):
        lb[t] = _lse(log_trans_seq[t] + (log_lik[t + 1] + lb[t + 1])[:, None], axis=0)
    gamma = np.exp(la + lb - log_z)
    gamma /= gamma.sum(axis=1, keepdims=True)
    xi = np.empty((max(t_steps - 1, 0), s, s))
    for t in range(t_steps - 1):
        lx = (
            la[t][:, None]
            + log_trans_seq[t].T
            + (log_lik[t + 1] + lb[t + 1])[None, :]
        )
        x = np.exp(lx - _lse(lx))
        xi[t] = x / x.sum()
    return gamma, xi, log_z


def forward_backward(
    layer: HmmLayer,
    obs,
    actions=None,
    *,
    mode: str = "mean",
    joint_limit: int = 1024,
    mf_sweeps: int = 10,
) -> DiscreteTrajectory:
    """Smoothed posterior over all chains given one observation sequence.

    Exact over the joint product space when it has at most `joint_limit`
    configurations; otherwise factors are decoupled with `mf_sweeps`
    mean-field sweeps (each factor's orders stay exactly coupled) and
    log_evidence reports the variational lower bound instead.
    """
    obs = _normalize_obs(obs, len(layer.num_obs))
    t_steps = obs.shape[0]
    if t_steps < 1:
        raise DataError("need at least one observation")
    acts = _check_actions(layer, actions, t_steps)
    trans_tables, obs_tables, init_tables = layer.tables(mode)

    f_sizes = [layer.factor_size(f) for f in range(layer.num_factors)]
    log_lik_cube = np.stack([_obs_loglik_tensor(layer, obs_tables, obs[t]) for t in range(t_steps)])

    if layer.joint_size <= joint_limit:
        return _fb_exact(layer, trans_tables, init_tables, log_lik_cube, acts, f_sizes)
    return _fb_mean_field(layer, trans_tables, init_tables, log_lik_cube, acts, f_sizes, mf_sweeps)


def _joint_log_init(layer, init_tables):
    """Log initial distribution over the full joint configuration space."""
    with np.errstate(divide="ignore"):
        log_init = np.zeros(())
        for f in range(layer.num_factors):
            log_init = np.add.outer(log_init, np.log(_factor_init(layer, init_tables, f)))
    return log_init.reshape(layer.joint_size)


def _fb_exact(layer, trans_tables, init_tables, log_lik_cube, acts, f_sizes):
    log_init = _joint_log_init(layer, init_tables)
    return _fb_joint(layer, trans_tables, log_lik_cube, acts, f_sizes, log_init)


def _fb_joint(layer, trans_tables, log_lik_cube, acts, f_sizes, log_init, extra_log_lik=None):
    """Exact smoothing on the joint configuration chain under a caller
    supplied (possibly unnormalized) log initial distribution, optionally
    with extra per-step joint log-likelihood terms added in."""
    t_steps = log_lik_cube.shape[0]
    n_joint = layer.joint_size
    full_shape = tuple(s for f in range(layer.num_factors) for s in layer.order_sizes[f])
    log_lik = np.ascontiguousarray(
        np.broadcast_to(log_lik_cube, (t_steps,) + full_shape)
    ).reshape(t_steps, n_joint)
    if extra_log_lik is not None:
        log_lik = log_lik + extra_log_lik

    with np.errstate(divide="ignore"):
        def joint_trans(a):
            mat = np.ones((1, 1))
            for f in range(layer.num_factors):
                mat = np.kron(mat, _factor_transition(layer, trans_tables, f, a))
            return np.log(mat)

        cache = {}
        log_trans_seq = []
        for t in range(t_steps - 1):
            a = int(acts[t]) if layer.controllable else None
            if a not in cache:
                cache[a] = joint_trans(a)
            log_trans_seq.append(cache[a])

    gamma, xi, log_z = _log_forward_backward(log_init, log_trans_seq, log_lik)

    factor_marginals = []
    factor_pairwise = []
    for f in range(layer.num_factors):
        cube = gamma.reshape((t_steps,) + tuple(f_sizes))
        axes = tuple(i + 1 for i in range(layer.num_factors) if i != f)
        factor_marginals.append(cube.sum(axis=axes) if axes else cube.reshape(t_steps, f_sizes[0]))
        pair = np.empty((max(t_steps - 1, 0), f_sizes[f], f_sizes[f]))
        for t in range(t_steps - 1):
            x = xi[t].reshape(tuple(f_sizes) * 2)
            keep = (f, layer.num_factors + f)
            axes_sum = tuple(i for i in range(2 * layer.num_factors) if i not in keep)
            pair[t] = x.sum(axis=axes_sum) if axes_sum else x
        factor_pairwise.append(pair)
    return DiscreteTrajectory(
        factor_marginals=factor_marginals,
        factor_pairwise=factor_pairwise,
        log_evidence=log_z,
        order_sizes=layer.order_sizes,
        joint_marginals=gamma,
        exact=True,
    )


def _fb_mean_field(layer, trans_tables, init_tables, log_lik_cube, acts, f_sizes, sweeps):
    t_steps = log_lik_cube.shape[0]
    n_fac = layer.num_factors
    g_depth = layer.gen_depth
    n_axes = n_fac * g_depth
    axis_of = [f * g_depth for f in range(n_fac)]  # order-1 axis per factor
    q = [np.full((t_steps, s), 1.0 / s) for s in f_sizes]

    with np.errstate(divide="ignore"):
        log_trans_f = []
        for f in range(n_fac):
            cache = {}
            seq = []
            for t in range(t_steps - 1):
                a = int(acts[t]) if layer.controllable else None
                if a not in cache:
                    cache[a] = np.log(_factor_transition(layer, trans_tables, f, a))
                seq.append(cache[a])
            log_trans_f.append(seq)
        log_init_f = [np.log(_factor_init(layer, init_tables, f)) for f in range(n_fac)]

    def order1_weights(f):
        # (T, K_f) marginal over the order-1 axis of q[f]
        cube = q[f].reshape((t_steps,) + tuple(layer.order_sizes[f]))
        axes = tuple(i + 2 for i in range(g_depth - 1))
        return cube.sum(axis=axes) if axes else cube

    def contract_factor(expect, f2):
        # weighted sum over factor f2's order-1 axis, per time step
        ax = axis_of[f2] + 1
        if expect.shape[ax] == 1:
            return expect
        moved = np.moveaxis(expect, ax, -1)
        w = order1_weights(f2)
        w_b = w.reshape((t_steps,) + (1,) * (moved.ndim - 2) + (w.shape[1],))
        w_b = np.broadcast_to(w_b, moved.shape)
        prod = np.where(w_b > 0, moved * w_b, 0.0)
        return np.expand_dims(prod.sum(axis=-1), ax)

    gamma_xi = [None] * n_fac
    for _ in range(max(1, sweeps)):
        for f in range(n_fac):
            # E_{q(-f)}[log p(o_t | all order-1 states)], factor f axes kept
            expect = log_lik_cube
            for f2 in range(n_fac):
                if f2 != f:
                    expect = contract_factor(expect, f2)
            target = [t_steps] + [1] * n_axes
            for i, s in enumerate(layer.order_sizes[f]):
                target[axis_of[f] + 1 + i] = s
            ll_f = np.ascontiguousarray(np.broadcast_to(expect, target)).reshape(
                t_steps, f_sizes[f]
            )
            gamma, xi, log_z = _log_forward_backward(log_init_f[f], log_trans_f[f], ll_f)
            q[f] = gamma
            gamma_xi[f] = (gamma, xi, log_z, ll_f)

    # ELBO: each chain's log-normalizer minus the pseudo-likelihood it
    # absorbed gives its prior-and-entropy terms; the observation
    # expectation is then added back exactly once.
    elbo = 0.0
    for f in range(n_fac):
        gamma, _, log_z, ll_f = gamma_xi[f]
        finite = np.where(np.isfinite(ll_f), ll_f, 0.0)
        elbo += log_z - float(np.sum(gamma * finite))
    expect = log_lik_cube
    for f in range(n_fac):
        expect = contract_factor(expect, f)
    elbo += float(expect.sum())

    return DiscreteTrajectory(
        factor_marginals=[gamma_xi[f][0] for f in range(n_fac)],
        factor_pairwise=[gamma_xi[f][1] for f in range(n_fac)],
        log_evidence=float(elbo),
        order_sizes=layer.order_sizes,
        joint_marginals=None,
        exact=False,
    )


@dataclass
class ViterbiPath:
    """Most probable joint assignment and its log-probability."""

    joint: np.ndarray            # (T,) joint configuration indices
    per_factor: list             # per factor (T, G) per-order states
    log_prob: float

    def order1(self, f: int = 0) -> np.ndarray:
        return self.per_factor[f][:, 0]


def viterbi(layer: HmmLayer, obs, actions=None, *, mode: str = "mean") -> ViterbiPath:
    """Max-probability path over the joint chain; ties break toward the
    lowest state index (canonical C-order over factors and orders)."""
    obs = _normalize_obs(obs, len(layer.num_obs))
    t_steps = obs.shape[0]
    if t_steps < 1:
        raise DataError("need at least one observation")
    acts = _check_actions(layer, actions, t_steps)
    if layer.joint_size > 4096:
        raise ConfigError("joint space too large for exact decoding")
    trans_tables, obs_tables, init_tables = layer.tables(mode)
    f_sizes = [layer.factor_size(f) for f in range(layer.num_factors)]
    n_joint = layer.joint_size
    log_lik = np.stack(
        [_obs_loglik_tensor(layer, obs_tables, obs[t]).reshape(n_joint) for t in range(t_steps)]
    )
    with np.errstate(divide="ignore"):
        cache = {}
        def lt(a):
            if a not in cache:
                mat = np.ones((1, 1))
                for f in range(layer.num_factors):
                    mat = np.kron(mat, _factor_transition(layer, trans_tables, f, a))
                cache[a] = np.log(mat)
            return cache[a]
        log_init = np.zeros(())
        for f in range(layer.num_factors):
            log_init = np.add.outer(log_init, np.log(_factor_init(layer, init_tables, f)))
        log_init = log_init.reshape(n_joint)

    delta = log_init + log_lik[0]
    back = np.zeros((t_steps, n_joint), dtype=int)
    for t in range(1, t_steps):
        a = int(acts[t - 1]) if layer.controllable else None
        scores = lt(a) + delta[None, :]
        back[t] = np.argmax(scores, axis=1)
        delta = log_lik[t] + np.max(scores, axis=1)
    path = np.zeros(t_steps, dtype=int)
    path[-1] = int(np.argmax(delta))
    log_prob = float(delta[path[-1]])
    for t in range(t_steps - 2, -1, -1):
        path[t] = back[t + 1][path[t + 1]]
    per_factor = []
    for f in range(layer.num_factors):
        div = int(np.prod(f_sizes[f + 1 :]))
        idx_f = (path // div) % f_sizes[f]
        states = np.zeros((t_steps, layer.gen_depth), dtype=int)
        r = idx_f.copy()
        for g in range(layer.gen_depth - 1, -1, -1):
            states[:, g] = r % layer.order_sizes[f][g]
            r //= layer.order_sizes[f][g]
        per_factor.append(states)
    return ViterbiPath(joint=path, per_factor=per_factor, log_prob=log_prob)


def vb_update(layer: HmmLayer, trajectories, obs_batch, actions_batch=None, weights=None) -> HmmLayer:
    """Add each trajectory's expected sufficient statistics to the counts.

    Initial-state and observation counts take the smoothed singleton
    marginals; transition counts take the pairwise marginals, split per
    order (and per action on controllable orders).  The existing counts
    — including the prior floor — are preserved underneath.
    """
    trajectories = list(trajectories)
    if not trajectories:
        return layer
    obs_batch = [_normalize_obs(o, len(layer.num_obs)) for o in obs_batch]
    if len(obs_batch) != len(trajectories):
        raise ShapeError("one observation sequence per trajectory required")
    if actions_batch is None:
        actions_batch = [None] * len(trajectories)
    if weights is None:
        weights = np.ones(len(trajectories))
    weights = np.asarray(weights, dtype=float)

    g_depth = layer.gen_depth
    trans_delta = [
        [np.zeros(layer.trans_counts[f][g].counts.shape) for g in range(g_depth)]
        for f in range(layer.num_factors)
    ]
    obs_delta = [np.zeros(layer.obs_counts[m].counts.shape) for m in range(len(layer.num_obs))]
    init_delta = [
        [np.zeros(layer.order_sizes[f][g]) for g in range(g_depth)] for f in range(layer.num_factors)
    ]

    for traj, obs, actions, w in zip(trajectories, obs_batch, actions_batch, weights):
        t_steps = obs.shape[0]
        acts = _check_actions(layer, actions, t_steps)
        for f in range(layer.num_factors):
            sizes = layer.order_sizes[f]
            gamma0 = traj.factor_marginals[f][0].reshape(sizes)
            for g in range(g_depth):
                axes = tuple(i for i in range(g_depth) if i != g)
                init_delta[f][g] += w * (gamma0.sum(axis=axes) if axes else gamma0)
            pair = traj.factor_pairwise[f]
            cur = _LETTERS[:g_depth]
            nxt = _LETTERS[g_depth : 2 * g_depth]
            for g in range(g_depth):
                out_sub = nxt[g] + cur[g] + (cur[g + 1] if g < g_depth - 1 else "")
                shaped = pair.reshape((pair.shape[0],) + tuple(sizes) * 2)
                if (g + 1) in layer.controllable_orders:
                    for t in range(pair.shape[0]):
                        contrib = np.einsum(cur + nxt + "->" + out_sub, shaped[t])
                        trans_delta[f][g][..., int(acts[t])] += w * contrib
                else:
                    if pair.shape[0]:
                        contrib = np.einsum("t" + cur + nxt + "->" + out_sub, shaped)
                        trans_delta[f][g] += w * contrib
        for m, facs in enumerate(layer.modality_factors):
            joint = _order1_joint(layer, traj, facs)
            for t in range(t_steps):
                obs_delta[m][int(obs[t, m])] += w * joint[t]

    return replace(
        layer,
        trans_counts=tuple(
            tuple(layer.trans_counts[f][g].added(trans_delta[f][g]) for g in range(g_depth))
            for f in range(layer.num_factors)
        ),
        obs_counts=tuple(
            layer.obs_counts[m].added(obs_delta[m]) for m in range(len(layer.num_obs))
        ),
        init_counts=tuple(
            tuple(layer.init_counts[f][g].added(init_delta[f][g]) for g in range(g_depth))
            for f in range(layer.num_factors)
        ),
    )


def _order1_joint(layer: HmmLayer, traj: DiscreteTrajectory, facs) -> np.ndarray:
    """(T, K_f1, K_f2, ...) posterior over the order-1 states of `facs`.

    Uses the full joint when available (exact inference), otherwise the
    mean-field product of per-factor marginals.
    """
    t_steps = traj.factor_marginals[0].shape[0]
    if len(facs) == 1 or traj.joint_marginals is None:
        res = None
        for fi in facs:
            sizes = layer.order_sizes[fi]
            cube = traj.factor_marginals[fi].reshape((t_steps,) + tuple(sizes))
            axes = tuple(i + 2 for i in range(len(sizes) - 1))
            marg = cube.sum(axis=axes) if axes else cube
            res = marg if res is None else res[..., None] * marg.reshape(
                (t_steps,) + (1,) * (res.ndim - 1) + (sizes[0],)
            )
        return res
    f_sizes = [layer.factor_size(f) for f in range(layer.num_factors)]
    cube = traj.joint_marginals.reshape(
        (t_steps,) + tuple(s for f in range(layer.num_factors) for s in layer.order_sizes[f])
    )
    g_depth = layer.gen_depth
    keep = tuple(fi * g_depth + 1 for fi in facs)
    axes = tuple(i for i in range(1, cube.ndim) if i not in keep)
    return cube.sum(axis=axes)


def generalized_rollout(layer: HmmLayer, horizon: int, rng, policy=None, *, mode: str = "mean"):
    """Ancestral sample of `horizon` steps from the layer.

    Sampling order per step (the contract replay tests rely on): for each
    factor in index order, orders are sampled top-down (order G first);
    then each modality's observation in index order.  `policy` is an
    action array of length horizon-1 or a callable (t, states) -> action.

    Returns (states, obs): states is (T, F, G) and obs is (T, M).
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    trans_tables, obs_tables, init_tables = layer.tables(mode)
    if layer.controllable and policy is None:
        raise ConfigError("controllable layer requires a policy")
    if not layer.controllable and policy is not None:
        raise ConfigError("passive layer takes no policy")
    policy_fn = policy if callable(policy) else None
    policy_arr = None
    if policy is not None and not callable(policy):
        policy_arr = np.asarray(policy, dtype=int)
        if policy_arr.shape != (horizon - 1,):
            raise ShapeError(f"policy must supply {horizon - 1} actions")

    g_depth = layer.gen_depth
    states = np.zeros((horizon, layer.num_factors, g_depth), dtype=int)
    obs = np.zeros((horizon, len(layer.num_obs)), dtype=int)
    actions = np.zeros(max(horizon - 1, 0), dtype=int)

    for f in range(layer.num_factors):
        for g in range(g_depth - 1, -1, -1):
            states[0, f, g] = sample_categorical(rng, init_tables[f][g])
    for m, facs in enumerate(layer.modality_factors):
        idx = tuple(states[0, fi, 0] for fi in facs)
        obs[0, m] = sample_categorical(rng, obs_tables[m][(slice(None),) + idx])

    for t in range(1, horizon):
        if layer.controllable:
            a = int(policy_fn(t - 1, states[t - 1])) if policy_fn else int(policy_arr[t - 1])
            if not 0 <= a < layer.num_actions:
                raise DataError("action outside the declared alphabet")
            actions[t - 1] = a
        else:
            a = None
        for f in range(layer.num_factors):
            for g in range(g_depth - 1, -1, -1):
                tab = trans_tables[f][g]
                if (g + 1) in layer.controllable_orders:
                    tab = tab[..., a]
                col = tab[:, states[t - 1, f, g], states[t - 1, f, g + 1]] if g < g_depth - 1 else tab[:, states[t - 1, f, g]]
                states[t, f, g] = sample_categorical(rng, col)
        for m, facs in enumerate(layer.modality_factors):
            idx = tuple(states[t, fi, 0] for fi in facs)
            obs[t, m] = sample_categorical(rng, obs_tables[m][(slice(None),) + idx])
    return states, obs, actions


def quantize(values, levels: int):
    """Uniform-bin scalar quantizer over the empirical range.

    Returns (codes, centers).  A zero-range input collapses to a single
    center so the round-trip is exact; otherwise round-trip error is at
    most half a bin width.
    """
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise DataError("quantize requires finite values")
    if levels < 2:
        raise ConfigError("levels must be >= 2")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=int), np.array([lo])
    width = (hi - lo) / levels
    codes = np.clip(((v - lo) / width).astype(int), 0, levels - 1)
    centers = lo + (np.arange(levels) + 0.5) * width
    return codes, centers


def vb_em(prior_layer: HmmLayer, obs_batch, actions_batch=None, *, sweeps: int = 20):
    """Variational EM on a batch of sequences.

    E-steps run forward_backward under geometric (exp-expected-log)
    tables of the current posterior counts; M-steps reset counts to
    prior + expected statistics.  The returned trace is the variational
    bound log Z-tilde minus the Dirichlet KL to the prior, evaluated
    each sweep; it is non-decreasing.
    """
    if sweeps < 1:
        raise ConfigError("sweeps must be >= 1")
    obs_batch = [_normalize_obs(o, len(prior_layer.num_obs)) for o in obs_batch]
    if actions_batch is None:
        actions_batch = [None] * len(obs_batch)
    layer = prior_layer
    trace = []
    for _ in range(sweeps):
        log_z_total = 0.0
        trajs = []
        for obs, acts in zip(obs_batch, actions_batch):
            traj = forward_backward(layer, obs, acts, mode="geometric")
            log_z_total += traj.log_evidence
            trajs.append(traj)
        trace.append(log_z_total - _kl_to_prior(layer, prior_layer))
        fresh = prior_layer
        fresh = vb_update(fresh, trajs, obs_batch, actions_batch)
        layer = fresh
    return layer, np.array(trace)


def _kl_to_prior(layer: HmmLayer, prior_layer: HmmLayer) -> float:
    total = 0.0
    for f in range(layer.num_factors):
        for g in range(layer.gen_depth):
            total += dirichlet_kl(
                layer.trans_counts[f][g].counts, prior_layer.trans_counts[f][g].counts
            )
            total += dirichlet_kl(
                layer.init_counts[f][g].counts, prior_layer.init_counts[f][g].counts
            )
    for m in range(len(layer.num_obs)):
        total += dirichlet_kl(layer.obs_counts[m].counts, prior_layer.obs_counts[m].counts)
    return total
