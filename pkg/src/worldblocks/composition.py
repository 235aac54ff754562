"""Hierarchical stacking of layers into a tree-structured model graph.

A link makes an upper layer's state set the stochastic initial
conditions — initial state and path — of non-overlapping windows of a
lower layer, one upper step governing exactly `stride` lower steps.
Three link patterns are supported: discrete over discrete through a
conditional count table on the child's full starting configuration,
discrete over continuous through per-parent-state initial Gaussians
(optionally with initial mode probabilities), and continuous over
continuous through an affine-plus-noise map on the child's initial
state.  A continuous parent over a discrete child is rejected.

`generate` samples layers root to leaf with a documented draw order so
replay oracles can reproduce it.  `hierarchical_infer` runs mean-field
coordinate ascent between per-window chain posteriors, sweeping layers
bottom-up and then top-down; every window update is an exact chain
update (discrete windows and single-mode continuous windows) or a
warm-started surrogate ascent (mode-switching continuous windows), so
the reported evidence lower bound never decreases across sweeps.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp, xlogy

from .distributions import JITTER, CategoricalBelief, DirichletCounts, GaussianBelief
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .hmm import (
    HmmLayer,
    _check_actions,
    _fb_joint,
    _joint_log_init,
    _normalize_obs,
    _obs_loglik_tensor,
    forward_backward,
    generalized_rollout,
)
from .rng import sample_categorical
from .slds import (
    LOG2PI,
    HybridTrajectory,
    SldsLayer,
    _build_chain,
    _normalize_controls,
    _solve_chain,
    kalman_smooth,
    recurrence_logits,
    simulate,
    structured_vi,
)

# linked discrete layers run exact joint-configuration chains per window;
# this caps the configuration count so those chains stay desk-sized
MAX_LINKED_CONFIGS = 4096


def _is_discrete(layer) -> bool:
    return isinstance(layer, HmmLayer)


def _order1_size(layer: HmmLayer) -> int:
    """Number of cross-factor order-1 configurations of a discrete layer."""
    return int(np.prod(layer.num_states))


def layer_depths(layer):
    """(factorial, generalized) depth contributed by one layer.

    A continuous layer counts as a single chain whose mode variable sits
    one order above the state it steers, hence (1, 2).
    """
    if _is_discrete(layer):
        return layer.num_factors, layer.gen_depth
    if isinstance(layer, SldsLayer):
        return 1, 2
    raise ConfigError(f"unsupported layer type {type(layer).__name__}")


@dataclass(frozen=True)
class DepthConfig:
    """Sizes of the four structural axes of a hierarchy.

    temporal[l] counts the steps layer l advances per top-level step,
    hierarchical is the number of layers, factorial[l] the independent
    chains within layer l, and generalized[l] the stacked orders within
    layer l.
    """

    temporal: tuple
    hierarchical: int
    factorial: tuple
    generalized: tuple

    def __post_init__(self):
        object.__setattr__(self, "temporal", tuple(int(x) for x in self.temporal))
        object.__setattr__(self, "hierarchical", int(self.hierarchical))
        object.__setattr__(self, "factorial", tuple(int(x) for x in self.factorial))
        object.__setattr__(self, "generalized", tuple(int(x) for x in self.generalized))
        if self.hierarchical < 1:
            raise ConfigError("need at least one layer")
        for name in ("temporal", "factorial", "generalized"):
            axis = getattr(self, name)
            if len(axis) != self.hierarchical:
                raise ShapeError(f"{name} needs one entry per layer")
            if any(x < 1 for x in axis):
                raise ConfigError(f"{name} entries must be >= 1")


@dataclass(frozen=True)
class GaussianInitTable:
    """Per-parent-state initial condition for a continuous child.

    Row k holds the child's initial-state Gaussian (means[k], covs[k])
    and, when switch_probs is given, its initial mode probabilities;
    without switch_probs the child keeps its own initial mode belief.
    """

    means: np.ndarray
    covs: np.ndarray
    switch_probs: np.ndarray = None

    def __post_init__(self):
        m = np.asarray(self.means, dtype=float)
        c = np.asarray(self.covs, dtype=float)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", c)
        if m.ndim != 2 or m.shape[0] < 1:
            raise ShapeError("means must be (parent states, child dim)")
        n, d = m.shape
        if c.shape != (n, d, d):
            raise ShapeError("covs must be (parent states, child dim, child dim)")
        for k in range(n):
            if np.max(np.abs(c[k] - c[k].T), initial=0.0) > 1e-9:
                raise ConfigError(f"initial covariance {k} not symmetric")
            try:
                np.linalg.cholesky(c[k] + JITTER * np.eye(d))
            except np.linalg.LinAlgError as exc:
                raise ConfigError(f"initial covariance {k} not positive-definite") from exc
        if self.switch_probs is not None:
            p = np.asarray(self.switch_probs, dtype=float)
            object.__setattr__(self, "switch_probs", p)
            if p.ndim != 2 or p.shape[0] != n:
                raise ShapeError("switch_probs needs one row per parent state")
            if np.any(p < -1e-12) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-9:
                raise ConfigError("switch_probs rows must lie on the simplex")

    @property
    def num_parent_states(self) -> int:
        return self.means.shape[0]

    @property
    def child_dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class AffineInitMap:
    """Affine-plus-noise initial condition for a continuous child of a
    continuous parent: x_child,0 | x_parent ~ N(mat @ x_parent + offset,
    noise).  Only the child's initial state is mapped; its dynamics stay
    its own.
    """

    mat: np.ndarray
    offset: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.mat, dtype=float)
        b = np.asarray(self.offset, dtype=float)
        r = np.asarray(self.noise, dtype=float)
        object.__setattr__(self, "mat", a)
        object.__setattr__(self, "offset", b)
        object.__setattr__(self, "noise", r)
        if a.ndim != 2:
            raise ShapeError("mat must be (child dim, parent dim)")
        d = a.shape[0]
        if b.shape != (d,):
            raise ShapeError("offset must match the child dimension")
        if r.shape != (d, d):
            raise ShapeError("noise must be (child dim, child dim)")
        if np.max(np.abs(r - r.T), initial=0.0) > 1e-9:
            raise ConfigError("noise not symmetric")
        try:
            np.linalg.cholesky(r + JITTER * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise ConfigError("noise must be positive-definite") from exc

    @property
    def child_dim(self) -> int:
        return self.mat.shape[0]

    @property
    def parent_dim(self) -> int:
        return self.mat.shape[1]


@dataclass(frozen=True)
class Link:
    """Directed edge: layer `upper` sets the initial conditions of
    non-overlapping `stride`-step windows of layer `lower`."""

    upper: int
    lower: int
    table: object
    stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "upper", int(self.upper))
        object.__setattr__(self, "lower", int(self.lower))
        object.__setattr__(self, "stride", int(self.stride))
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")


def _validate_link(layers, link: Link):
    up, lo = layers[link.upper], layers[link.lower]
    if not _is_discrete(up) and _is_discrete(lo):
        raise ConfigError(
            f"link {link.upper}->{link.lower}: continuous states cannot index a "
            "discrete initial-condition table"
        )
    if _is_discrete(up) and _is_discrete(lo):
        if not isinstance(link.table, DirichletCounts):
            raise ConfigError(
                f"link {link.upper}->{link.lower}: discrete pairs need a DirichletCounts table"
            )
        expect = (lo.joint_size, _order1_size(up))
        if link.table.counts.shape != expect:
            raise ShapeError(
                f"link {link.upper}->{link.lower}: table shape "
                f"{link.table.counts.shape}, expected (child configurations, "
                f"parent states) = {expect}"
            )
        if lo.joint_size > MAX_LINKED_CONFIGS:
            raise ConfigError(
                f"link {link.upper}->{link.lower}: child configuration space "
                f"{lo.joint_size} exceeds the linked limit {MAX_LINKED_CONFIGS}"
            )
    elif _is_discrete(up):
        if not isinstance(link.table, GaussianInitTable):
            raise ConfigError(
                f"link {link.upper}->{link.lower}: a continuous child of a discrete "
                "parent needs a GaussianInitTable"
            )
        if link.table.num_parent_states != _order1_size(up):
            raise ShapeError(
                f"link {link.upper}->{link.lower}: table has "
                f"{link.table.num_parent_states} rows for {_order1_size(up)} parent states"
            )
        if link.table.child_dim != lo.state_dim:
            raise ShapeError(
                f"link {link.upper}->{link.lower}: table dimension "
                f"{link.table.child_dim} does not match child state dimension {lo.state_dim}"
            )
        if link.table.switch_probs is not None and link.table.switch_probs.shape[1] != lo.num_modes:
            raise ShapeError(
                f"link {link.upper}->{link.lower}: switch_probs width must equal "
                f"the child's {lo.num_modes} modes"
            )
    else:
        if not isinstance(link.table, AffineInitMap):
            raise ConfigError(
                f"link {link.upper}->{link.lower}: continuous pairs need an AffineInitMap"
            )
        if link.table.child_dim != lo.state_dim or link.table.parent_dim != up.state_dim:
            raise ShapeError(
                f"link {link.upper}->{link.lower}: affine map is "
                f"({link.table.child_dim}, {link.table.parent_dim}) for child dim "
                f"{lo.state_dim} and parent dim {up.state_dim}"
            )


@dataclass(frozen=True)
class ModelGraph:
    """Tree of layers joined by initial-condition links.

    Layers are ordered; every link points from an upper layer to a lower
    one, and each layer has at most one parent link, so the links form a
    forest rooted at the unlinked layers.
    """

    layers: tuple
    links: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "links", tuple(self.links))
        if not self.layers:
            raise ConfigError("need at least one layer")
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, (HmmLayer, SldsLayer)):
                raise ConfigError(f"layer {i}: unsupported layer type {type(layer).__name__}")
        n = len(self.layers)
        seen_lower = set()
        for link in self.links:
            if not isinstance(link, Link):
                raise ConfigError("links must be Link instances")
            if not (0 <= link.upper < n and 0 <= link.lower < n):
                raise ConfigError(f"link {link.upper}->{link.lower}: endpoint out of range")
            if link.upper == link.lower:
                raise ConfigError("a layer cannot be its own parent")
            if link.lower in seen_lower:
                raise ConfigError(f"layer {link.lower} already has a parent link")
            seen_lower.add(link.lower)
            _validate_link(self.layers, link)
        parent = {link.lower: link.upper for link in self.links}
        for start in range(n):
            node, seen = start, set()
            while node in parent:
                if node in seen:
                    raise ConfigError("links must form a tree (cycle detected)")
                seen.add(node)
                node = parent[node]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def parent_link(self, l: int):
        for link in self.links:
            if link.lower == l:
                return link
        return None

    def child_links(self, l: int) -> tuple:
        return tuple(sorted((k for k in self.links if k.upper == l), key=lambda k: k.lower))

    @property
    def roots(self) -> tuple:
        linked = {link.lower for link in self.links}
        return tuple(l for l in range(self.num_layers) if l not in linked)

    def topo_order(self) -> tuple:
        """Layer indices with every parent before its children (roots in
        index order, then breadth-first by child index)."""
        order = list(self.roots)
        i = 0
        while i < len(order):
            for link in self.child_links(order[i]):
                order.append(link.lower)
            i += 1
        return tuple(order)

    def span(self, l: int) -> int:
        """Steps layer l advances per top-level step (stride product)."""
        total = 1
        link = self.parent_link(l)
        while link is not None:
            total *= link.stride
            link = self.parent_link(link.upper)
        return total

    def horizons(self, top_horizon: int) -> tuple:
        if top_horizon < 1:
            raise ConfigError("top_horizon must be >= 1")
        return tuple(int(top_horizon) * self.span(l) for l in range(self.num_layers))

    @property
    def depth(self) -> DepthConfig:
        pairs = [layer_depths(layer) for layer in self.layers]
        return DepthConfig(
            temporal=tuple(self.span(l) for l in range(self.num_layers)),
            hierarchical=self.num_layers,
            factorial=tuple(p[0] for p in pairs),
            generalized=tuple(p[1] for p in pairs),
        )


def compose(upper, lower, table, stride: int = 1, *, upper_index=None) -> ModelGraph:
    """Hang `lower` below `upper` with the given link table and stride.

    `upper` may be a layer (producing a two-layer graph) or an existing
    ModelGraph, in which case `lower` is appended and linked from
    `upper_index` (default: the most recently added layer).  Returns a
    new validated graph; a single-layer hierarchy is just
    ``ModelGraph((layer,))``.
    """
    if isinstance(upper, ModelGraph):
        idx = upper.num_layers - 1 if upper_index is None else int(upper_index)
        if not 0 <= idx < upper.num_layers:
            raise ConfigError(f"upper_index {idx} out of range")
        new_link = Link(idx, upper.num_layers, table, stride)
        return ModelGraph(upper.layers + (lower,), upper.links + (new_link,))
    if upper_index is not None:
        raise ConfigError("upper_index only applies when extending a graph")
    return ModelGraph((upper, lower), (Link(0, 1, table, stride),))


# --- generation ---------------------------------------------------------


@dataclass
class LayerSample:
    """One layer's sampled trajectory inside a hierarchy rollout.

    Discrete layers carry states (T, F, G) order tuples and obs (T, M)
    symbols; continuous layers carry states (T, D), obs (T, P) and
    modes (T,).  `actions` echoes the consumed action or control rows.
    """

    states: np.ndarray
    obs: np.ndarray
    modes: np.ndarray = None
    actions: np.ndarray = None


def _takes_actions(layer) -> bool:
    if _is_discrete(layer):
        return layer.controllable
    return layer.control_dim > 0


def _split_actions(graph: ModelGraph, actions) -> dict:
    """Resolve the actions argument to {layer index: raw sequence}."""
    if actions is None:
        return {}
    if isinstance(actions, dict):
        out = {}
        for key, val in actions.items():
            idx = int(key)
            if not 0 <= idx < graph.num_layers:
                raise ConfigError(f"actions given for unknown layer {idx}")
            out[idx] = val
        return out
    takers = [l for l in range(graph.num_layers) if _takes_actions(graph.layers[l])]
    if len(takers) != 1:
        raise ConfigError(
            "pass actions as a dict keyed by layer index unless exactly one layer takes them"
        )
    return {takers[0]: actions}


def _order1_index(layer: HmmLayer, states_row) -> int:
    """Ravel a (F, G) state tuple's order-1 entries to a configuration index."""
    return int(np.ravel_multi_index(tuple(int(s) for s in states_row[:, 0]), layer.num_states))


def _sample_root(layer, horizon, rng, actions) -> LayerSample:
    if _is_discrete(layer):
        states, obs, acts = generalized_rollout(layer, horizon, rng, policy=actions)
        return LayerSample(states=states, obs=obs, actions=acts if layer.controllable else None)
    modes, states, obs = simulate(layer, horizon, rng, controls=actions)
    echo = _normalize_controls(layer, actions, horizon) if layer.control_dim else None
    return LayerSample(states=states, obs=obs, modes=modes, actions=echo)


def _sample_linked_discrete(layer, link, up_layer, up_sample, t_l, rng, actions) -> LayerSample:
    tau = link.stride
    acts = _check_actions(layer, actions, t_l)
    trans_tables, obs_tables, _ = layer.tables("mean")
    link_probs = link.table.mean()
    g_depth = layer.gen_depth
    full_shape = tuple(s for sizes in layer.order_sizes for s in sizes)
    states = np.zeros((t_l, layer.num_factors, g_depth), dtype=int)
    obs = np.zeros((t_l, len(layer.num_obs)), dtype=int)

    def emit(t):
        for m, facs in enumerate(layer.modality_factors):
            sel = tuple(states[t, fi, 0] for fi in facs)
            obs[t, m] = sample_categorical(rng, obs_tables[m][(slice(None),) + sel])

    for w in range(t_l // tau):
        t0 = w * tau
        pa = _order1_index(up_layer, up_sample.states[w])
        cfg = sample_categorical(rng, link_probs[:, pa])
        idx = np.unravel_index(cfg, full_shape)
        for f in range(layer.num_factors):
            for g in range(g_depth):
                states[t0, f, g] = idx[f * g_depth + g]
        emit(t0)
        for t in range(t0 + 1, t0 + tau):
            a = int(acts[t - 1]) if layer.controllable else None
            for f in range(layer.num_factors):
                for g in range(g_depth - 1, -1, -1):
                    tab = trans_tables[f][g]
                    if (g + 1) in layer.controllable_orders:
                        tab = tab[..., a]
                    if g < g_depth - 1:
                        col = tab[:, states[t - 1, f, g], states[t - 1, f, g + 1]]
                    else:
                        col = tab[:, states[t - 1, f, g]]
                    states[t, f, g] = sample_categorical(rng, col)
            emit(t)
    return LayerSample(states=states, obs=obs, actions=acts if layer.controllable else None)


def _sample_linked_continuous(layer, link, up_layer, up_sample, t_l, rng, actions) -> LayerSample:
    tau = link.stride
    u = _normalize_controls(layer, actions, t_l)
    d, p = layer.state_dim, layer.obs_dim
    chol_noise = np.linalg.cholesky(layer.noise + JITTER * np.eye(d))
    chol_obs = np.linalg.cholesky(layer.obs_noise + JITTER * np.eye(p))
    table = link.table
    if isinstance(table, GaussianInitTable):
        chol_init = np.stack(
            [
                np.linalg.cholesky(table.covs[k] + JITTER * np.eye(d))
                for k in range(table.num_parent_states)
            ]
        )
    else:
        chol_link = np.linalg.cholesky(table.noise + JITTER * np.eye(d))

    modes = np.zeros(t_l, dtype=int)
    states = np.zeros((t_l, d))
    obs = np.zeros((t_l, p))
    for w in range(t_l // tau):
        t0 = w * tau
        if isinstance(table, GaussianInitTable):
            pa = _order1_index(up_layer, up_sample.states[w])
            pi0 = table.switch_probs[pa] if table.switch_probs is not None else layer.switch_init.probs
            modes[t0] = sample_categorical(rng, pi0)
            states[t0] = table.means[pa] + chol_init[pa] @ rng.standard_normal(d)
        else:
            modes[t0] = sample_categorical(rng, layer.switch_init.probs)
            states[t0] = (
                table.mat @ up_sample.states[w] + table.offset + chol_link @ rng.standard_normal(d)
            )
        obs[t0] = layer.emission @ states[t0] + chol_obs @ rng.standard_normal(p)
        for t in range(t0 + 1, t0 + tau):
            logits = recurrence_logits(layer, states[t - 1])[:, modes[t - 1]]
            probs = np.exp(logits - logsumexp(logits))
            z = sample_categorical(rng, probs)
            modes[t] = z
            drift = layer.dynamics[z] @ states[t - 1]
            if layer.control_dim:
                drift = drift + layer.control_mats[z] @ u[t - 1]
            states[t] = drift + chol_noise[z] @ rng.standard_normal(d)
            obs[t] = layer.emission @ states[t] + chol_obs @ rng.standard_normal(p)
    return LayerSample(states=states, obs=obs, modes=modes, actions=u if layer.control_dim else None)


def generate(graph: ModelGraph, top_horizon: int, rng, actions=None) -> list:
    """Ancestral sample of every layer; one LayerSample per layer.

    Layers are sampled fully, one at a time, in `topo_order`.  A root
    runs its own sampler for its whole horizon.  A linked layer is
    sampled window by window in time order: window w starts from the
    link table evaluated at the parent's step-w state — a discrete start
    is one configuration draw followed by one draw per modality, a
    continuous start draws mode, then state, then observation — and the
    remaining stride-1 steps follow the layer's own dynamics with the
    single-layer draw order (discrete: per factor, orders top down, then
    modalities; continuous: mode, state, observation).  Action or
    control rows whose transition would cross a window boundary are
    ignored.  The bottom length is exactly top_horizon times the product
    of strides.
    """
    acts_by_layer = _split_actions(graph, actions)
    horizons = graph.horizons(top_horizon)
    samples = [None] * graph.num_layers
    for l in graph.topo_order():
        layer = graph.layers[l]
        link = graph.parent_link(l)
        a_l = acts_by_layer.get(l)
        if link is None:
            samples[l] = _sample_root(layer, horizons[l], rng, a_l)
        elif _is_discrete(layer):
            samples[l] = _sample_linked_discrete(
                layer, link, graph.layers[link.upper], samples[link.upper], horizons[l], rng, a_l
            )
        else:
            samples[l] = _sample_linked_continuous(
                layer, link, graph.layers[link.upper], samples[link.upper], horizons[l], rng, a_l
            )
    return samples


# --- inference ----------------------------------------------------------


def _order1_joint_probs(layer: HmmLayer, gamma) -> np.ndarray:
    """(T, N) marginal of a joint-configuration posterior over the
    cross-factor order-1 configuration."""
    t_steps = gamma.shape[0]
    full_shape = tuple(s for sizes in layer.order_sizes for s in sizes)
    cube = gamma.reshape((t_steps,) + full_shape)
    g_depth = layer.gen_depth
    path_axes = tuple(
        1 + f * g_depth + g
        for f in range(layer.num_factors)
        for g in range(1, g_depth)
    )
    if path_axes:
        cube = cube.sum(axis=path_axes)
    return cube.reshape(t_steps, -1)


def _expand_order1(layer: HmmLayer, vec) -> np.ndarray:
    """Broadcast a function of the order-1 joint configuration onto the
    full configuration space (constant across path orders)."""
    g_depth = layer.gen_depth
    shape = [1] * (layer.num_factors * g_depth)
    for f in range(layer.num_factors):
        shape[f * g_depth] = layer.num_states[f]
    full_shape = tuple(s for sizes in layer.order_sizes for s in sizes)
    return np.ascontiguousarray(
        np.broadcast_to(np.asarray(vec).reshape(shape), full_shape)
    ).reshape(layer.joint_size)


def _normalize_cont_obs(layer: SldsLayer, o) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(o, dtype=float))
    if arr.shape[0] == 1 and layer.obs_dim == 1 and arr.shape[1] > 1:
        arr = arr.T
    if arr.shape[1] != layer.obs_dim:
        raise ShapeError(f"observations must have {layer.obs_dim} columns")
    return arr


@dataclass
class HierarchyPosterior:
    """Per-layer window posteriors with the hierarchy's variational bound.

    windows[l] lists one posterior per window of layer l (a root has a
    single window spanning its horizon): DiscreteTrajectory for discrete
    layers, HybridTrajectory for continuous ones.  elbo_trace holds the
    bound after each sweep.
    """

    graph: ModelGraph
    windows: list
    elbo: float
    elbo_trace: np.ndarray
    horizons: tuple

    def layer_windows(self, l: int) -> list:
        return self.windows[int(l)]

    def order1_marginals(self, l: int) -> np.ndarray:
        """(T_l, N) posterior over a discrete layer's cross-factor
        order-1 configuration, concatenated across windows."""
        layer = self.graph.layers[int(l)]
        if not _is_discrete(layer):
            raise ConfigError("order1_marginals applies to discrete layers")
        return np.concatenate(
            [_order1_joint_probs(layer, w.joint_marginals) for w in self.windows[int(l)]]
        )

    def switch_marginals(self, l: int) -> np.ndarray:
        if _is_discrete(self.graph.layers[int(l)]):
            raise ConfigError("switch_marginals applies to continuous layers")
        return np.concatenate([w.switch_marginals for w in self.windows[int(l)]])

    def state_means(self, l: int) -> np.ndarray:
        if _is_discrete(self.graph.layers[int(l)]):
            raise ConfigError("state_means applies to continuous layers")
        return np.concatenate([w.means for w in self.windows[int(l)]])


def _link_prep(graph: ModelGraph) -> dict:
    """Precomputed per-link quantities reused across sweeps."""
    prep = {}
    for li, link in enumerate(graph.links):
        lo = graph.layers[link.lower]
        table = link.table
        if isinstance(table, DirichletCounts):
            prep[li] = {"kind": "dd", "log": np.log(table.mean())}
        elif isinstance(table, GaussianInitTable):
            d = lo.state_dim
            n = table.num_parent_states
            inv = np.empty((n, d, d))
            logdet2pi = np.empty(n)
            for k in range(n):
                c, low = cho_factor(table.covs[k] + JITTER * np.eye(d))
                inv[k] = cho_solve((c, low), np.eye(d))
                logdet2pi[k] = 2.0 * float(np.sum(np.log(np.diag(c)))) + d * LOG2PI
            entry = {
                "kind": "dc",
                "means": table.means,
                "inv": inv,
                "logdet2pi": logdet2pi,
                "switch": table.switch_probs,
            }
            if table.switch_probs is not None:
                with np.errstate(divide="ignore"):
                    entry["log_switch"] = np.log(table.switch_probs)
            prep[li] = entry
        else:
            d = lo.state_dim
            c, low = cho_factor(table.noise + JITTER * np.eye(d))
            rinv = cho_solve((c, low), np.eye(d))
            prep[li] = {
                "kind": "cc",
                "mat": table.mat,
                "offset": table.offset,
                "rinv": rinv,
                "logdet2pi": 2.0 * float(np.sum(np.log(np.diag(c)))) + d * LOG2PI,
                "mrt": table.mat.T @ rinv,
                "lam": table.mat.T @ rinv @ table.mat,
            }
    return prep


def _gauss_expected_log(mean, cov, mu0, sig0) -> float:
    """E[log N(x; mean, cov)] for x ~ N(mu0, sig0)."""
    d = mean.size
    c, low = cho_factor(cov)
    inv = cho_solve((c, low), np.eye(d))
    diff = mu0 - mean
    return -0.5 * (
        2.0 * float(np.sum(np.log(np.diag(c))))
        + d * LOG2PI
        + float(diff @ inv @ diff)
        + float(np.sum(inv * sig0))
    )


def _masked_dot(weights, values) -> float:
    """Sum of weights*values treating 0 * (-inf) as 0."""
    with np.errstate(invalid="ignore"):
        return float(np.sum(np.where(weights > 0, weights * values, 0.0)))


class _Infer:
    """Shared state for one hierarchical inference run."""

    def __init__(self, graph, obs_map, acts_map, horizons, inner_iters):
        self.graph = graph
        self.horizons = horizons
        self.inner_iters = inner_iters
        self.prep = _link_prep(graph)
        self.link_index = {link.lower: li for li, link in enumerate(graph.links)}
        self.st = []
        for l, layer in enumerate(graph.layers):
            t_l = horizons[l]
            link = graph.parent_link(l)
            win = link.stride if link is not None else t_l
            n_windows = t_l // win
            entry = {
                "win": win,
                "n_windows": n_windows,
                "windows": [None] * n_windows,
                "own": np.zeros(n_windows),
            }
            if _is_discrete(layer):
                if layer.joint_size > MAX_LINKED_CONFIGS:
                    raise ConfigError(
                        f"layer {l}: configuration space {layer.joint_size} exceeds "
                        f"the linked-inference limit {MAX_LINKED_CONFIGS}"
                    )
                tables = layer.tables("mean")
                n1 = _order1_size(layer)
                entry.update(
                    tables=tables,
                    f_sizes=[layer.factor_size(f) for f in range(layer.num_factors)],
                    order1=np.full((t_l, n1), 1.0 / n1),
                    cfg0=np.full((n_windows, layer.joint_size), 1.0 / layer.joint_size),
                    acts=_check_actions(layer, acts_map.get(l), t_l),
                    log_init_own=_joint_log_init(layer, tables[2]) if link is None else None,
                )
                if l in obs_map:
                    cube = np.stack(
                        [_obs_loglik_tensor(layer, tables[1], obs_map[l][t]) for t in range(t_l)]
                    )
                else:
                    n_axes = layer.num_factors * layer.gen_depth
                    cube = np.zeros((t_l,) + (1,) * n_axes)
                entry["cube"] = cube
            else:
                d, k = layer.state_dim, layer.num_modes
                entry.update(
                    means=np.zeros((t_l, d)),
                    covs=np.tile(np.eye(d), (t_l, 1, 1)),
                    switch=np.full((t_l, k), 1.0 / k),
                    obs=obs_map.get(l, np.full((t_l, layer.obs_dim), np.nan)),
                    u=_normalize_controls(layer, acts_map.get(l), t_l),
                    refs=[None] * n_windows,
                    warm=[None] * n_windows,
                )
            self.st.append(entry)

    # -- messages --

    def _child_extras(self, l, t0, win):
        """Messages from child windows starting at parent steps t0..t0+win-1.

        Discrete layer l: (win, joint) extra log-likelihood, or None.
        Continuous layer l: (prec, lin, const) triple, or None.
        """
        layer = self.graph.layers[l]
        child_links = self.graph.child_links(l)
        if not child_links:
            return None
        if _is_discrete(layer):
            extra = np.zeros((win, layer.joint_size))
            for link in child_links:
                li = self.link_index[link.lower]
                p = self.prep[li]
                cs = self.st[link.lower]
                for i in range(win):
                    n = t0 + i
                    if p["kind"] == "dd":
                        m = p["log"].T @ cs["cfg0"][n]
                    else:
                        start = n * link.stride
                        mu0 = cs["means"][start]
                        sig0 = cs["covs"][start]
                        diff = mu0[None, :] - p["means"]
                        quad = np.einsum("ka,kab,kb->k", diff, p["inv"], diff)
                        tr = np.einsum("kab,ab->k", p["inv"], sig0)
                        m = -0.5 * (p["logdet2pi"] + quad + tr)
                        if p["switch"] is not None:
                            m = m + xlogy(cs["switch"][start][None, :], p["switch"]).sum(axis=1)
                    extra[i] += _expand_order1(layer, m)
            return extra
        d = layer.state_dim
        prec = np.zeros((win, d, d))
        lin = np.zeros((win, d))
        const = 0.0
        for link in child_links:
            li = self.link_index[link.lower]
            p = self.prep[li]
            cs = self.st[link.lower]
            for i in range(win):
                start = (t0 + i) * link.stride
                mu0 = cs["means"][start]
                sig0 = cs["covs"][start]
                diff = mu0 - p["offset"]
                prec[i] += p["lam"]
                lin[i] += p["mrt"] @ diff
                const += -0.5 * (
                    p["logdet2pi"] + float(diff @ p["rinv"] @ diff) + float(np.sum(p["rinv"] * sig0))
                )
        return prec, lin, const

    def _down_message(self, l, w):
        """Initial-condition message from the parent for window w of layer l:
        a log vector over configurations (discrete l) or a replaced layer
        plus the subtraction terms flag (continuous l)."""
        link = self.graph.parent_link(l)
        li = self.link_index[l]
        p = self.prep[li]
        up = self.st[link.upper]
        layer = self.graph.layers[l]
        if _is_discrete(layer):
            return p["log"] @ up["order1"][w]
        if p["kind"] == "dc":
            gam = up["order1"][w]
            prec = np.einsum("k,kab->ab", gam, p["inv"])
            hvec = np.einsum("k,kab,kb->a", gam, p["inv"], p["means"])
            c, low = cho_factor(prec + JITTER * np.eye(layer.state_dim))
            cov = cho_solve((c, low), np.eye(layer.state_dim))
            mu = cov @ hvec
            replaced = {"state_init": GaussianBelief(mu, 0.5 * (cov + cov.T))}
            if p["switch"] is not None:
                with np.errstate(invalid="ignore"):
                    log_q = np.sum(
                        np.where(gam[:, None] > 0, gam[:, None] * p["log_switch"], 0.0),
                        axis=0,
                    )
                log_q = log_q - logsumexp(log_q)
                replaced["switch_init"] = CategoricalBelief(np.exp(log_q))
            return replaced
        mu_p = up["means"][w]
        mean0 = p["mat"] @ mu_p + p["offset"]
        return {"state_init": GaussianBelief(mean0, self.graph.links[li].table.noise)}

    # -- window updates --

    def _update_discrete_window(self, l, w):
        layer = self.graph.layers[l]
        s = self.st[l]
        win = s["win"]
        t0 = w * win
        sl = slice(t0, t0 + win)
        link = self.graph.parent_link(l)
        if link is None:
            log_init = s["log_init_own"]
        else:
            log_init = self._down_message(l, w)
        extra = self._child_extras(l, t0, win)
        traj = _fb_joint(
            layer,
            s["tables"][0],
            s["cube"][sl],
            s["acts"][t0 : t0 + win - 1],
            s["f_sizes"],
            log_init,
            extra,
        )
        gamma = traj.joint_marginals
        own = traj.log_evidence
        if link is not None:
            own -= _masked_dot(gamma[0], log_init)
        if extra is not None:
            own -= _masked_dot(gamma, extra)
        s["windows"][w] = traj
        s["own"][w] = own
        s["order1"][sl] = _order1_joint_probs(layer, gamma)
        s["cfg0"][w] = gamma[0]

    def _update_continuous_window(self, l, w):
        layer = self.graph.layers[l]
        s = self.st[l]
        win = s["win"]
        t0 = w * win
        sl = slice(t0, t0 + win)
        link = self.graph.parent_link(l)
        eff_layer = layer
        if link is not None:
            eff_layer = dataclasses.replace(layer, **self._down_message(l, w))
        obs_w = s["obs"][sl]
        u_w = s["u"][t0 : t0 + win - 1]
        controls = u_w if layer.control_dim else None
        extras = self._child_extras(l, t0, win)
        if extras is not None:
            means, covs, cross, loglik = kalman_smooth(
                eff_layer, obs_w, np.zeros(win, dtype=int), controls, extra=extras
            )
            traj = HybridTrajectory(
                switch_marginals=np.ones((win, 1)),
                switch_pairwise=np.ones((max(win - 1, 0), 1, 1)),
                means=means,
                covs=covs,
                cross_covs=cross,
                elbo=float(loglik),
                elbo_trace=np.array([loglik]),
            )
            e_prec, e_lin, e_const = extras
            quad = float(np.einsum("ta,tab,tb->", means, e_prec, means))
            tr = float(np.einsum("tab,tab->", e_prec, covs))
            own = loglik - (-0.5 * (quad + tr) + float(np.sum(e_lin * means)) + e_const)
        else:
            if s["refs"][w] is None:
                k = layer.num_modes
                resp0 = np.full((max(win - 1, 0), k), 1.0 / k)
                dd, oo, hh, _ = _build_chain(eff_layer, obs_w, resp0, u_w)
                s["refs"][w] = _solve_chain(dd, oo, hh)[0]
            traj = structured_vi(
                eff_layer,
                obs_w,
                controls=controls,
                iters=self.inner_iters,
                ref_states=s["refs"][w],
                init_resp=s["warm"][w],
            )
            s["warm"][w] = traj.switch_marginals[1:].copy()
            own = traj.elbo
        if link is not None:
            own -= _gauss_expected_log(
                eff_layer.state_init.mean,
                eff_layer.state_init.covariance,
                traj.means[0],
                traj.covs[0],
            )
            li = self.link_index[l]
            if self.prep[li]["kind"] == "dc" and self.prep[li]["switch"] is not None:
                with np.errstate(divide="ignore"):
                    own -= float(
                        xlogy(traj.switch_marginals[0], eff_layer.switch_init.probs).sum()
                    )
        s["windows"][w] = traj
        s["own"][w] = own
        s["means"][sl] = traj.means
        s["covs"][sl] = traj.covs
        s["switch"][sl] = traj.switch_marginals

    def update_layer(self, l):
        layer = self.graph.layers[l]
        try:
            for w in range(self.st[l]["n_windows"]):
                if _is_discrete(layer):
                    self._update_discrete_window(l, w)
                else:
                    self._update_continuous_window(l, w)
        except NumericalError as exc:
            raise NumericalError(f"layer {l}: {exc}") from exc

    # -- bound assembly --

    def cross_terms(self) -> float:
        total = 0.0
        for li, link in enumerate(self.graph.links):
            p = self.prep[li]
            up = self.st[link.upper]
            cs = self.st[link.lower]
            n_w = cs["n_windows"]
            if p["kind"] == "dd":
                total += _masked_dot(up["order1"], cs["cfg0"] @ p["log"])
                continue
            starts = np.arange(n_w) * link.stride
            mu0 = cs["means"][starts]
            sig0 = cs["covs"][starts]
            if p["kind"] == "dc":
                diff = mu0[:, None, :] - p["means"][None, :, :]
                quad = np.einsum("wka,kab,wkb->wk", diff, p["inv"], diff)
                tr = np.einsum("kab,wab->wk", p["inv"], sig0)
                m = -0.5 * (p["logdet2pi"][None, :] + quad + tr)
                if p["switch"] is not None:
                    m = m + xlogy(cs["switch"][starts][:, None, :], p["switch"][None, :, :]).sum(
                        axis=2
                    )
                total += _masked_dot(up["order1"], m)
            else:
                mu_p = up["means"][:n_w]
                sig_p = up["covs"][:n_w]
                diff = mu0 - mu_p @ p["mat"].T - p["offset"][None, :]
                quad = np.einsum("wa,ab,wb->w", diff, p["rinv"], diff)
                prop = np.einsum("ac,wcd,bd->wab", p["mat"], sig_p, p["mat"])
                tr = np.einsum("ab,wab->w", p["rinv"], sig0 + prop)
                total += float(np.sum(-0.5 * (p["logdet2pi"] + quad + tr)))
        return total

    def total_elbo(self) -> float:
        return float(sum(s["own"].sum() for s in self.st)) + self.cross_terms()


def hierarchical_infer(
    graph: ModelGraph, obs, actions=None, sweeps: int = 5, *, inner_iters: int = 10
) -> HierarchyPosterior:
    """Mean-field posterior over every layer of a hierarchy.

    `obs` holds the deepest layer's observations, or a dict
    {layer index: observations} when other layers are (also) observed;
    unobserved layers marginalize their emissions exactly.  Each sweep
    updates every window bottom-up and then top-down, children passing
    starting-condition evidence to parents as extra likelihoods and
    parents returning updated initial conditions, and the bound is
    recorded after each sweep; it is non-decreasing.  A single-layer
    graph delegates to the layer's own inference, where the sweep count
    does not matter.  Inference across an affine link requires a
    single-mode upper layer.
    """
    if sweeps < 1:
        raise ConfigError("sweeps must be >= 1")
    if inner_iters < 1:
        raise ConfigError("inner_iters must be >= 1")
    n = graph.num_layers

    if not isinstance(obs, dict):
        leaves = [l for l in range(n) if not graph.child_links(l)]
        if len(leaves) != 1:
            raise ConfigError(
                "pass observations as a dict keyed by layer index when the graph "
                "has several leaves"
            )
        obs_raw = {leaves[0]: obs}
    else:
        obs_raw = {int(k): v for k, v in obs.items()}
    if not obs_raw:
        raise ConfigError("at least one layer must be observed")
    for l in obs_raw:
        if not 0 <= l < n:
            raise ConfigError(f"observations given for unknown layer {l}")

    obs_map = {}
    for l, o in obs_raw.items():
        layer = graph.layers[l]
        if _is_discrete(layer):
            obs_map[l] = _normalize_obs(o, len(layer.num_obs))
        else:
            obs_map[l] = _normalize_cont_obs(layer, o)
        if obs_map[l].shape[0] < 1:
            raise DataError(f"layer {l}: need at least one observation")

    acts_map = _split_actions(graph, actions)

    top = None
    for l, o in obs_map.items():
        span = graph.span(l)
        rows = o.shape[0]
        if rows % span:
            raise DataError(
                f"layer {l}: observation length {rows} is not a multiple of its "
                f"total stride {span}"
            )
        cand = rows // span
        if top is None:
            top = cand
        elif top != cand:
            raise DataError("observed layers imply inconsistent top-level horizons")

    if n == 1:
        layer = graph.layers[0]
        if _is_discrete(layer):
            traj = forward_backward(layer, obs_map[0], acts_map.get(0))
            elbo = float(traj.log_evidence)
        else:
            traj = structured_vi(
                layer, obs_map[0], controls=acts_map.get(0), iters=inner_iters
            )
            elbo = float(traj.elbo)
        return HierarchyPosterior(
            graph=graph,
            windows=[[traj]],
            elbo=elbo,
            elbo_trace=np.full(sweeps, elbo),
            horizons=(obs_map[0].shape[0],),
        )

    for link in graph.links:
        if isinstance(link.table, AffineInitMap) and graph.layers[link.upper].num_modes > 1:
            raise ConfigError(
                f"link {link.upper}->{link.lower}: inference across an affine link "
                "requires a single-mode upper layer"
            )

    horizons = graph.horizons(top)
    for l, o in obs_map.items():
        if o.shape[0] != horizons[l]:
            raise DataError(f"layer {l}: observation length does not match the hierarchy")

    run = _Infer(graph, obs_map, acts_map, horizons, inner_iters)
    order = graph.topo_order()
    trace = []
    for _ in range(sweeps):
        for l in reversed(order):
            run.update_layer(l)
        for l in order:
            run.update_layer(l)
        elbo = run.total_elbo()
        if not np.isfinite(elbo):
            raise NumericalError("hierarchy bound is not finite")
        trace.append(elbo)
    return HierarchyPosterior(
        graph=graph,
        windows=[run.st[l]["windows"] for l in range(n)],
        elbo=float(trace[-1]),
        elbo_trace=np.array(trace),
        horizons=horizons,
    )
