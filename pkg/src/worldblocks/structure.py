"""Structure learning: growing models instead of fixing them up front.

Three mechanisms live here, ordered from local to global:

* online mixture growth — `grow_or_assign` routes each datum to the
  best existing Gaussian component or opens a fresh one when a prior
  ("novelty") component predicts the datum better by a configurable
  log-evidence margin, and `prune` retires components whose accumulated
  responsibility mass stays below a floor;
* bottom-up model building — `mi_grouping` merges channels that share
  mutual information, `svd_codebook` compresses continuous window
  patches into discrete codes, and `fsl_build` stacks both into a
  hierarchy: per-group layers over fixed windows, a parent symbol per
  distinct window pattern, recursively until the top is a single layer;
* depth search — `depth_search` scores a list of depth configurations
  (temporal, hierarchical, factorial, generalized) by variational EM on
  the corresponding graph skeletons and keeps the best, breaking exact
  ties toward the shallower model.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .composition import DepthConfig, Link, ModelGraph, hierarchical_infer
from .distributions import (
    DirichletCounts,
    NiwParams,
    dirichlet_kl,
    gaussian_log_predictive,
    niw_update,
)
from .errors import (
    ConfigError,
    DataError,
    GrowthStallError,
    NumericalError,
    ShapeError,
)
from .hmm import HmmLayer, _kl_to_prior, quantize, vb_update
from .rng import stream

# pseudo-count floor applied to all tables counted from data; small
# enough that counted structure stays effectively deterministic
COUNT_FLOOR = 1e-9


# ---------------------------------------------------------------------------
# online component growth


@dataclass(frozen=True)
class GrowthConfig:
    """Knobs for the grow/prune cycle.

    evidence_threshold is the log-predictive margin by which a fresh
    prior component must beat every existing component before a new
    slot is opened (+inf disables growth); prune_count is the minimum
    accumulated responsibility mass a component needs to survive.
    """

    evidence_threshold: float = 0.0
    max_components: int = 64
    prune_count: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "evidence_threshold", float(self.evidence_threshold))
        object.__setattr__(self, "max_components", int(self.max_components))
        object.__setattr__(self, "prune_count", float(self.prune_count))
        if np.isnan(self.evidence_threshold):
            raise ConfigError("evidence_threshold must not be NaN")
        if self.max_components < 1:
            raise ConfigError("max_components must be >= 1")
        if self.prune_count < 0:
            raise ConfigError("prune_count must be >= 0")


@dataclass(frozen=True)
class GrownMixture:
    """Gaussian mixture whose component list is decided by the data.

    `base` is the prior belief a fresh component starts from; `masses`
    accumulates one unit per hard assignment.  Mixing weights are the
    normalized masses, so pruning re-normalizes them implicitly.
    """

    base: NiwParams
    components: tuple = ()
    masses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        masses = np.asarray(self.masses, dtype=float)
        object.__setattr__(self, "masses", masses)
        if masses.shape != (len(self.components),):
            raise ShapeError("one mass per component required")
        if np.any(masses < 0):
            raise ConfigError("masses must be nonnegative")
        for comp in self.components:
            if comp.dim != self.base.dim:
                raise ShapeError("component dimension differs from the base prior")

    @classmethod
    def empty(cls, base: NiwParams) -> "GrownMixture":
        return cls(base=base)

    @property
    def num_components(self) -> int:
        return len(self.components)

    @property
    def weights(self) -> np.ndarray:
        total = float(self.masses.sum())
        if total == 0.0:
            return np.full(self.num_components, 1.0 / max(self.num_components, 1))
        return self.masses / total

    def log_predictives(self, datum) -> np.ndarray:
        """Log posterior-predictive density of the datum per component."""
        return np.array([gaussian_log_predictive(datum, c) for c in self.components])


@dataclass(frozen=True)
class GrowthDecision:
    """Record of one grow_or_assign step."""

    component: int
    grew: bool
    saturated: bool
    log_predictives: np.ndarray
    novel_log_predictive: float


def _seed_component(base: NiwParams, datum: np.ndarray) -> NiwParams:
    """Fresh component: the base prior re-centered on the datum, then
    conjugately updated with it, so its mean is exactly the datum."""
    return niw_update(replace(base, mean=datum), datum[None, :])


def grow_or_assign(model: GrownMixture, datum, cfg: GrowthConfig):
    """Assign one datum, opening a new component if novelty wins.

    The datum goes to the arg-max posterior-predictive component unless
    a fresh prior component's log predictive beats every existing one
    by more than cfg.evidence_threshold; then a new component seeded at
    the datum is appended (when the slot budget allows — otherwise the
    best existing component absorbs it and the decision is flagged as
    saturated).  Returns (updated model, GrowthDecision).
    """
    datum = np.asarray(datum, dtype=float)
    novel = gaussian_log_predictive(datum, model.base)
    if model.num_components == 0:
        grown = replace(
            model, components=(_seed_component(model.base, datum),), masses=np.ones(1)
        )
        return grown, GrowthDecision(0, True, False, np.zeros(0), novel)
    scores = model.log_predictives(datum)
    demand = novel > float(scores.max()) + cfg.evidence_threshold
    if demand and model.num_components < cfg.max_components:
        grown = replace(
            model,
            components=model.components + (_seed_component(model.base, datum),),
            masses=np.append(model.masses, 1.0),
        )
        return grown, GrowthDecision(model.num_components, True, False, scores, novel)
    best = int(np.argmax(scores))
    comps = list(model.components)
    comps[best] = niw_update(comps[best], datum[None, :])
    masses = model.masses.copy()
    masses[best] += 1.0
    updated = replace(model, components=tuple(comps), masses=masses)
    return updated, GrowthDecision(best, False, demand, scores, novel)


def prune(model: GrownMixture, cfg: GrowthConfig) -> GrownMixture:
    """Drop components whose accumulated mass is below cfg.prune_count."""
    if model.num_components == 0:
        raise ConfigError("cannot prune an empty mixture")
    keep = model.masses >= cfg.prune_count
    if not np.any(keep):
        raise ConfigError("pruning would remove every component")
    if np.all(keep):
        return model
    return replace(
        model,
        components=tuple(c for c, k in zip(model.components, keep) if k),
        masses=model.masses[keep],
    )


# ---------------------------------------------------------------------------
# SVD codebook


@dataclass(frozen=True)
class SvdCodebook:
    """Rank-truncated window compression with discrete codes.

    `basis` holds the leading right singular vectors (rows); window w
    projects to `projections[w] = patches[w] @ basis.T`.  Codes index
    the distinct per-dimension-quantized projections; `tail_energy` is
    the squared reconstruction error the truncation commits to.
    """

    basis: np.ndarray
    singular_values: np.ndarray
    projections: np.ndarray
    codes: np.ndarray
    code_points: np.ndarray
    tail_energy: float

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    @property
    def num_codes(self) -> int:
        return self.code_points.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.projections @ self.basis


def svd_codebook(patches, rank: int, *, levels: int = 16) -> SvdCodebook:
    """Compress window rows to `rank` dimensions and quantize to codes.

    The Frobenius reconstruction error of the rank-truncated matrix
    equals the tail singular-value energy; codes are indices of the
    distinct uniformly-quantized projection vectors (`levels` bins per
    retained dimension).
    """
    x = np.atleast_2d(np.asarray(patches, dtype=float))
    if x.size == 0:
        raise DataError("patch matrix is empty")
    if not np.all(np.isfinite(x)):
        raise DataError("patch matrix must be finite")
    rank = int(rank)
    if rank < 1:
        raise ConfigError("rank must be >= 1")
    if rank > min(x.shape):
        raise ConfigError(f"rank {rank} exceeds min(matrix dims) {min(x.shape)}")
    _, svals, vt = np.linalg.svd(x, full_matrices=False)
    basis = vt[:rank]
    projections = x @ basis.T
    tail = float(np.sum(svals[rank:] ** 2))
    quantized = np.empty_like(projections)
    for j in range(rank):
        codes_j, centers_j = quantize(projections[:, j], levels)
        quantized[:, j] = centers_j[codes_j]
    code_points, codes = np.unique(quantized, axis=0, return_inverse=True)
    return SvdCodebook(
        basis=basis,
        singular_values=svals,
        projections=projections,
        codes=codes.astype(int),
        code_points=code_points,
        tail_energy=tail,
    )


# ---------------------------------------------------------------------------
# mutual-information grouping


@dataclass(frozen=True)
class GroupingReport:
    """Partition of discrete channels by pairwise mutual information.

    `mi_matrix[i, j]` is the plug-in estimate in nats (the diagonal is
    each channel's marginal entropy); channels with MI >= threshold are
    linked and groups are the connected components.  Each group carries
    a joint codebook (the distinct observed value tuples, lex-sorted)
    and the corresponding coded sequence.
    """

    mi_matrix: np.ndarray
    groups: tuple
    codebooks: tuple
    codes: tuple
    threshold: float

    @property
    def num_channels(self) -> int:
        return self.mi_matrix.shape[0]


def _normalize_channels(data):
    arr = data
    if isinstance(arr, np.ndarray) and arr.ndim == 2:
        channels = [arr[i] for i in range(arr.shape[0])]
    else:
        channels = [np.asarray(c) for c in arr]
    if len(channels) == 0:
        raise DataError("need at least one channel")
    out = []
    length = None
    for i, ch in enumerate(channels):
        ch = np.asarray(ch)
        if ch.ndim != 1:
            raise ShapeError(f"channel {i} must be one-dimensional")
        if ch.size == 0:
            raise DataError(f"channel {i} is empty")
        if not np.issubdtype(ch.dtype, np.integer):
            as_float = ch.astype(float)
            if not np.all(np.isfinite(as_float)) or np.any(as_float != np.round(as_float)):
                raise DataError(f"channel {i} is not discrete")
            ch = as_float.astype(int)
        if np.any(ch < 0):
            raise DataError(f"channel {i} has negative symbols")
        if length is None:
            length = ch.size
        elif ch.size != length:
            raise ShapeError("channels must share a common length")
        out.append(ch.astype(int))
    return out


def _pair_mi(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) from the joint histogram."""
    joint = np.zeros((int(a.max()) + 1, int(b.max()) + 1))
    np.add.at(joint, (a, b), 1.0)
    p = joint / a.size
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log((pa * pb)[nz]))))


def mi_grouping(channels, threshold: float = 0.05) -> GroupingReport:
    """Group channels whose pairwise mutual information clears threshold.

    Grouping is by connected components of the MI >= threshold graph;
    each group is collapsed to a single channel over its distinct
    observed value tuples.
    """
    chans = _normalize_channels(channels)
    n = len(chans)
    mi = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            mi[i, j] = mi[j, i] = _pair_mi(chans[i], chans[j])

    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if mi[i, j] >= threshold:
                parent[find(i)] = find(j)
    by_root = {}
    for i in range(n):
        by_root.setdefault(find(i), []).append(i)
    groups = tuple(tuple(sorted(g)) for g in sorted(by_root.values(), key=min))

    codebooks = []
    codes = []
    for group in groups:
        rows = np.column_stack([chans[c] for c in group])
        book, inverse = np.unique(rows, axis=0, return_inverse=True)
        codebooks.append(book)
        codes.append(inverse.astype(int))
    return GroupingReport(
        mi_matrix=mi,
        groups=groups,
        codebooks=tuple(codebooks),
        codes=tuple(codes),
        threshold=float(threshold),
    )


# ---------------------------------------------------------------------------
# bottom-up hierarchy building


def _counted(counts: np.ndarray) -> DirichletCounts:
    return DirichletCounts(counts + COUNT_FLOOR)


def _child_layer(codes, book, raw_channels, tau, patterns, pattern_ids):
    """Windowed layer for one channel group.

    Order-1 state is the group's joint code; a second ("path") order
    indexes the window pattern, so transitions conditioned on the path
    replay each pattern deterministically from its first symbol.
    """
    k = book.shape[0]
    n_pat = patterns.shape[0]
    rows = codes.reshape(-1, tau)
    trans1 = np.zeros((k, k, n_pat))
    for j in range(1, tau):
        np.add.at(trans1, (rows[:, j], rows[:, j - 1], pattern_ids), 1.0)
    trans2 = np.zeros((n_pat, n_pat))
    trans2[np.arange(n_pat), np.arange(n_pat)] = (tau - 1) * np.bincount(
        pattern_ids, minlength=n_pat
    )
    init1 = np.bincount(rows[:, 0], minlength=k).astype(float)
    init2 = np.bincount(pattern_ids, minlength=n_pat).astype(float)
    obs_counts = []
    num_obs = []
    for raw in raw_channels:
        size = int(raw.max()) + 1
        table = np.zeros((size, k))
        np.add.at(table, (raw, codes), 1.0)
        obs_counts.append(_counted(table))
        num_obs.append(size)
    return HmmLayer(
        order_sizes=((k, n_pat),),
        num_obs=tuple(num_obs),
        modality_factors=tuple((0,) for _ in raw_channels),
        controllable_orders=frozenset(),
        num_actions=0,
        trans_counts=((_counted(trans1), _counted(trans2)),),
        obs_counts=tuple(obs_counts),
        init_counts=((_counted(init1), _counted(init2)),),
        prior_count=COUNT_FLOOR,
    )


def _root_layer(channels, report: GroupingReport):
    """Unwindowed top layer: one factor per channel group, emitting
    every channel through its group's codebook."""
    factor_of = {}
    for g, group in enumerate(report.groups):
        for c in group:
            factor_of[c] = g
    trans_counts = []
    init_counts = []
    for g in range(len(report.groups)):
        codes = report.codes[g]
        k = report.codebooks[g].shape[0]
        big = np.zeros((k, k))
        if codes.size > 1:
            np.add.at(big, (codes[1:], codes[:-1]), 1.0)
        init = np.zeros(k)
        init[codes[0]] = 1.0
        trans_counts.append((_counted(big),))
        init_counts.append((_counted(init),))
    obs_counts = []
    num_obs = []
    for c, chan in enumerate(channels):
        g = factor_of[c]
        size = int(chan.max()) + 1
        table = np.zeros((size, report.codebooks[g].shape[0]))
        np.add.at(table, (chan, report.codes[g]), 1.0)
        obs_counts.append(_counted(table))
        num_obs.append(size)
    return HmmLayer(
        order_sizes=tuple((b.shape[0],) for b in report.codebooks),
        num_obs=tuple(num_obs),
        modality_factors=tuple((factor_of[c],) for c in range(len(channels))),
        controllable_orders=frozenset(),
        num_actions=0,
        trans_counts=tuple(trans_counts),
        obs_counts=tuple(obs_counts),
        init_counts=tuple(init_counts),
        prior_count=COUNT_FLOOR,
    )


def _count_link(owner, parent_seq, n_parent):
    counts = np.zeros((owner["joint"], n_parent))
    np.add.at(counts, (owner["cfg"], parent_seq), 1.0)
    return Link(
        upper=owner["upper"],
        lower=owner["layer"],
        table=_counted(counts),
        stride=owner["stride"],
    )


def fsl_build(
    data,
    strides,
    *,
    mi_threshold: float = 0.05,
    pattern_cap: int = 256,
) -> ModelGraph:
    """Grow a layered model from discrete channels, bottom up.

    Each level groups its channels by mutual information, learns one
    windowed layer per group by direct counting (stride taken from
    `strides`), and summarizes every window as its distinct pattern;
    the pattern streams become the next level's channels.  The last
    level (strides exhausted, or all channels constant) becomes an
    unwindowed root with one factor per remaining group.  Counting a
    deterministic sequence yields an effectively deterministic model,
    so generation replays the training data.
    """
    channels = _normalize_channels(data)
    strides_left = [int(s) for s in list(strides)] if strides is not None else []
    if any(s < 1 for s in strides_left):
        raise ConfigError("strides must be >= 1")
    if pattern_cap < 1:
        raise ConfigError("pattern_cap must be >= 1")

    layers = []
    links = []
    owners = [None] * len(channels)
    level = 0
    while True:
        report = mi_grouping(channels, mi_threshold)
        constant = all(book.shape[0] == 1 for book in report.codebooks)
        if not strides_left or constant:
            root_idx = len(layers)
            layers.append(_root_layer(channels, report))
            dims = tuple(book.shape[0] for book in report.codebooks)
            joint_seq = np.ravel_multi_index(tuple(report.codes), dims)
            for c, owner in enumerate(owners):
                if owner is not None:
                    owner["upper"] = root_idx
                    links.append(_count_link(owner, joint_seq, int(np.prod(dims))))
            break
        tau = strides_left.pop(0)
        t_len = channels[0].size
        if t_len % tau:
            raise DataError(
                f"level {level}: length {t_len} is not a multiple of stride {tau}"
            )
        new_channels = []
        new_owners = []
        for g, group in enumerate(report.groups):
            codes = report.codes[g]
            book = report.codebooks[g]
            rows = codes.reshape(-1, tau)
            patterns, pattern_ids = np.unique(rows, axis=0, return_inverse=True)
            pattern_ids = pattern_ids.astype(int)
            if patterns.shape[0] > pattern_cap:
                raise GrowthStallError(
                    f"level {level}: {patterns.shape[0]} distinct window patterns "
                    f"exceed the cap of {pattern_cap}"
                )
            idx = len(layers)
            layers.append(
                _child_layer(codes, book, [channels[c] for c in group], tau, patterns, pattern_ids)
            )
            for c in group:
                if owners[c] is not None:
                    owners[c]["upper"] = idx
                    links.append(_count_link(owners[c], codes, book.shape[0]))
            new_channels.append(pattern_ids)
            new_owners.append(
                {
                    "layer": idx,
                    "cfg": rows[:, 0] * patterns.shape[0] + pattern_ids,
                    "stride": tau,
                    "joint": book.shape[0] * patterns.shape[0],
                }
            )
        channels = new_channels
        owners = new_owners
        level += 1
    return ModelGraph(tuple(layers), tuple(links))


# ---------------------------------------------------------------------------
# depth search


@dataclass(frozen=True)
class DepthScore:
    """One scored depth candidate."""

    config: DepthConfig
    score: float
    elbo: float
    params: int
    seconds: float
    failed: bool = False


@dataclass(frozen=True)
class DepthSearchResult:
    """Scores for every candidate plus the winning configuration."""

    candidates: tuple
    selected: DepthConfig
    margins: np.ndarray


def total_depth(cfg: DepthConfig) -> int:
    """Scalar size of a depth configuration, used to break score ties."""
    return int(
        sum(cfg.temporal) + cfg.hierarchical + sum(cfg.factorial) + sum(cfg.generalized)
    )


def select_best(scored) -> DepthScore:
    """Pick the maximal-score candidate; exact ties go to the smaller
    total depth, then to the lexicographically smaller configuration
    (so the choice never depends on candidate order)."""
    alive = [s for s in scored if not s.failed and np.isfinite(s.score)]
    if not alive:
        raise NumericalError("every depth candidate failed")
    return min(
        alive,
        key=lambda s: (
            -s.score,
            total_depth(s.config),
            (s.config.temporal, s.config.factorial, s.config.generalized),
        ),
    )


def _normalize_dataset(dataset):
    if isinstance(dataset, np.ndarray) or (
        len(dataset) > 0 and np.isscalar(dataset[0])
    ):
        seqs = [dataset]
    else:
        seqs = list(dataset)
    out = []
    width = None
    for s, seq in enumerate(seqs):
        arr = np.asarray(seq)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise DataError(f"sequence {s} must be a non-empty (steps, channels) array")
        as_float = arr.astype(float)
        if not np.all(np.isfinite(as_float)) or np.any(as_float != np.round(as_float)):
            raise DataError(f"sequence {s} is not discrete")
        arr = as_float.astype(int)
        if np.any(arr < 0):
            raise DataError(f"sequence {s} has negative symbols")
        if width is None:
            width = arr.shape[1]
        elif arr.shape[1] != width:
            raise ShapeError("sequences must share the channel count")
        out.append(arr)
    if not out:
        raise DataError("dataset is empty")
    return out


def _jiggled(counts: DirichletCounts, rng) -> DirichletCounts:
    return DirichletCounts(counts.counts * rng.uniform(0.5, 1.5, size=counts.counts.shape))


def _jiggle_graph(graph: ModelGraph, rng) -> ModelGraph:
    """Break the symmetry of a uniform skeleton so EM can leave it."""
    layers = tuple(
        replace(
            layer,
            trans_counts=tuple(
                tuple(_jiggled(t, rng) for t in fac) for fac in layer.trans_counts
            ),
            obs_counts=tuple(_jiggled(o, rng) for o in layer.obs_counts),
            init_counts=tuple(
                tuple(_jiggled(i, rng) for i in fac) for fac in layer.init_counts
            ),
        )
        for layer in graph.layers
    )
    links = tuple(
        replace(link, table=_jiggled(link.table, rng)) for link in graph.links
    )
    return ModelGraph(layers, links)


def _skeleton(alphabets, cfg: DepthConfig, upper_states: int) -> ModelGraph:
    """Graph skeleton realizing a depth configuration.

    The bottom layer splits the channels into `factorial[0]` contiguous
    blocks, one factor per block whose size is the product of its
    channels' alphabets; upper layers get `factorial[l]` factors of
    `upper_states` states each and no emissions.  Strides between
    levels are the ratios of consecutive temporal depths.
    """
    n_chan = len(alphabets)
    if cfg.temporal[0] != 1:
        raise ConfigError("temporal depth of the bottom level must be 1")
    for lo, hi in zip(cfg.temporal, cfg.temporal[1:]):
        if hi % lo:
            raise ConfigError("temporal depths must be successive multiples")
    if cfg.factorial[0] > n_chan:
        raise ConfigError(
            f"{cfg.factorial[0]} bottom factors for {n_chan} channels"
        )
    blocks = np.array_split(np.arange(n_chan), cfg.factorial[0])
    block_of = np.zeros(n_chan, dtype=int)
    for b, block in enumerate(blocks):
        block_of[block] = b
    bottom = HmmLayer.uniform(
        tuple(int(np.prod([alphabets[c] for c in block])) for block in blocks),
        tuple(alphabets),
        gen_depth=cfg.generalized[0],
        modality_factors=tuple((int(block_of[c]),) for c in range(n_chan)),
    )
    layers = [bottom]
    links = []
    for level in range(1, cfg.hierarchical):
        upper = HmmLayer.uniform(
            (upper_states,) * cfg.factorial[level],
            (),
            gen_depth=cfg.generalized[level],
            modality_factors=(),
        )
        child = layers[-1]
        table = DirichletCounts.uniform(
            (child.joint_size, int(np.prod(upper.num_states)))
        )
        links.append(
            Link(
                upper=level,
                lower=level - 1,
                table=table,
                stride=cfg.temporal[level] // cfg.temporal[level - 1],
            )
        )
        layers.append(upper)
    return ModelGraph(tuple(layers), tuple(links))


def _segment_labels(length: int, size: int, rng) -> np.ndarray:
    """Piecewise-constant random labels (expected segment length 8)."""
    labels = np.zeros(length, dtype=int)
    cur = int(rng.integers(size))
    for t in range(length):
        if rng.uniform() < 0.125:
            cur = int(rng.integers(size))
        labels[t] = cur
    return labels


def _warm_bottom(layer: HmmLayer, cfg: DepthConfig, seqs, alphabets, rng) -> HmmLayer:
    """Data-driven start for the observed layer.

    Each factor's order-1 state is seeded to decode its channel block
    (identity-style observation counts plus observed-code bigrams);
    path orders get a segmentwise-random completion so their transition
    counts reflect contiguous chunks of data, which breaks the path
    symmetry far more effectively than parameter noise alone.
    """
    blocks = np.array_split(np.arange(len(alphabets)), cfg.factorial[0])
    sizes_per_factor = layer.order_sizes
    trans_delta = [
        [np.zeros(t.counts.shape) for t in fac] for fac in layer.trans_counts
    ]
    obs_delta = [np.zeros(o.counts.shape) for o in layer.obs_counts]
    for seq in seqs:
        for f, block in enumerate(blocks):
            dims = tuple(alphabets[c] for c in block)
            codes = np.ravel_multi_index(tuple(seq[:, c] for c in block), dims)
            sizes = sizes_per_factor[f]
            labels = [
                _segment_labels(seq.shape[0], sizes[g], rng)
                for g in range(1, len(sizes))
            ]
            chains = [codes] + labels
            for g in range(len(sizes)):
                if g < len(sizes) - 1:
                    np.add.at(
                        trans_delta[f][g],
                        (chains[g][1:], chains[g][:-1], chains[g + 1][:-1]),
                        1.0,
                    )
                else:
                    np.add.at(trans_delta[f][g], (chains[g][1:], chains[g][:-1]), 1.0)
            for c in block:
                np.add.at(obs_delta[c], (seq[:, c], codes), 1.0)
    jig = lambda c: _jiggled(c, rng)
    return replace(
        layer,
        trans_counts=tuple(
            tuple(
                layer.trans_counts[f][g].added(trans_delta[f][g])
                for g in range(len(layer.order_sizes[f]))
            )
            for f in range(layer.num_factors)
        ),
        obs_counts=tuple(
            layer.obs_counts[m].added(obs_delta[m]) for m in range(len(layer.num_obs))
        ),
        init_counts=tuple(
            tuple(jig(i) for i in fac) for fac in layer.init_counts
        ),
    )


def _warm_graph(prior: ModelGraph, cfg: DepthConfig, seqs, alphabets, rng) -> ModelGraph:
    jiggled = _jiggle_graph(prior, rng)
    layers = (_warm_bottom(prior.layers[0], cfg, seqs, alphabets, rng),) + jiggled.layers[1:]
    return ModelGraph(layers, jiggled.links)


def _graph_params(graph: ModelGraph) -> int:
    total = 0
    for layer in graph.layers:
        for fac in layer.trans_counts:
            total += sum(t.counts.size for t in fac)
        total += sum(o.counts.size for o in layer.obs_counts)
        for fac in layer.init_counts:
            total += sum(i.counts.size for i in fac)
    total += sum(link.table.counts.size for link in graph.links)
    return total


def _graph_kl(graph: ModelGraph, prior: ModelGraph) -> float:
    total = sum(
        _kl_to_prior(layer, prior_layer)
        for layer, prior_layer in zip(graph.layers, prior.layers)
    )
    total += sum(
        dirichlet_kl(link.table.counts, prior_link.table.counts)
        for link, prior_link in zip(graph.links, prior.links)
    )
    return float(total)


def _window_cfg0(traj) -> np.ndarray:
    if traj.joint_marginals is not None:
        return traj.joint_marginals[0]
    out = np.ones(())
    for marg in traj.factor_marginals:
        out = np.multiply.outer(out, marg[0])
    return out.reshape(-1)


def _graph_m_step(graph: ModelGraph, prior: ModelGraph, posts) -> ModelGraph:
    """Reset every count table to its prior plus expected statistics
    from the posteriors of a batch of sequences."""
    new_layers = []
    for l, layer in enumerate(graph.layers):
        trajs = []
        obs_windows = []
        for post, obs in posts:
            windows = post.layer_windows(l)
            win = post.horizons[l] // len(windows)
            layer_obs = obs.get(l)
            for w, traj in enumerate(windows):
                trajs.append(traj)
                if layer_obs is None:
                    obs_windows.append(np.zeros((win, len(layer.num_obs)), dtype=int))
                else:
                    obs_windows.append(layer_obs[w * win : (w + 1) * win])
        new_layers.append(vb_update(prior.layers[l], trajs, obs_windows))
    new_links = []
    for li, link in enumerate(graph.links):
        delta = np.zeros(prior.links[li].table.counts.shape)
        for post, _ in posts:
            up_marg = post.order1_marginals(link.upper)
            for w, traj in enumerate(post.layer_windows(link.lower)):
                delta += np.outer(_window_cfg0(traj), up_marg[w])
        new_links.append(
            replace(link, table=prior.links[li].table.added(delta))
        )
    return ModelGraph(tuple(new_layers), tuple(new_links))


def _evaluate_candidate(seqs, alphabets, cfg, budget, upper_states, e_sweeps, seed, restarts):
    start = time.perf_counter()
    try:
        prior = _skeleton(alphabets, cfg, upper_states)
        best = -np.inf
        for restart in range(restarts):
            rng = stream(
                seed,
                f"depth:{cfg.temporal}:{cfg.factorial}:{cfg.generalized}:{restart}",
            )
            graph = _warm_graph(prior, cfg, seqs, alphabets, rng)
            bound = np.nan
            for _ in range(budget):
                posts = []
                elbo_total = 0.0
                for seq in seqs:
                    obs = {0: seq}
                    post = hierarchical_infer(graph, obs, sweeps=e_sweeps)
                    elbo_total += post.elbo
                    posts.append((post, obs))
                bound = elbo_total - _graph_kl(graph, prior)
                if not np.isfinite(bound):
                    raise NumericalError("candidate bound is not finite")
                graph = _graph_m_step(graph, prior, posts)
            best = max(best, float(bound))
        n_points = sum(seq.size for seq in seqs)
        seconds = time.perf_counter() - start
        return DepthScore(
            config=cfg,
            score=best / n_points,
            elbo=best,
            params=_graph_params(prior),
            seconds=seconds,
            failed=False,
        )
    except (ConfigError, DataError, NumericalError, GrowthStallError):
        return DepthScore(
            config=cfg,
            score=float("nan"),
            elbo=float("nan"),
            params=0,
            seconds=time.perf_counter() - start,
            failed=True,
        )


def _write_report(path, scored):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(
            ["temporal", "hierarchical", "factorial", "generalized", "score", "elbo", "params", "seconds", "failed"]
        )
        for s in scored:
            writer.writerow(
                [
                    ",".join(map(str, s.config.temporal)),
                    s.config.hierarchical,
                    ",".join(map(str, s.config.factorial)),
                    ",".join(map(str, s.config.generalized)),
                    repr(s.score),
                    repr(s.elbo),
                    s.params,
                    f"{s.seconds:.6f}",
                    int(s.failed),
                ]
            )


def depth_search(
    dataset,
    candidates,
    budget: int,
    *,
    upper_states: int = 4,
    e_sweeps: int = 2,
    seed: int = 0,
    restarts: int = 3,
    jobs: int = 1,
    report_path=None,
) -> DepthSearchResult:
    """Score depth configurations by variational EM and keep the best.

    Every candidate is evaluated the same way: build its graph skeleton,
    run `budget` EM sweeps with `hierarchical_infer` E-steps and
    count-table M-steps from `restarts` symmetry-broken starts (seeded
    by the configuration itself, so results do not depend on list
    order), and score the best final evidence bound (data bound minus
    count-KL to the prior) per observed scalar.  Candidates that raise
    or go non-finite are marked failed and excluded from selection.
    """
    seqs = _normalize_dataset(dataset)
    candidates = list(candidates)
    if not candidates:
        raise ConfigError("need at least one depth candidate")
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    alphabets = [
        int(max(seq[:, c].max() for seq in seqs)) + 1 for c in range(seqs[0].shape[1])
    ]

    def run(cfg):
        return _evaluate_candidate(
            seqs, alphabets, cfg, budget, upper_states, e_sweeps, seed, restarts
        )

    if jobs == 1 or len(candidates) == 1:
        scored = [run(cfg) for cfg in candidates]
    else:
        with ThreadPoolExecutor(max_workers=min(jobs, len(candidates))) as pool:
            scored = list(pool.map(run, candidates))
    best = select_best(scored)
    margins = np.array(
        [best.score - s.score if not s.failed else np.nan for s in scored]
    )
    if report_path is not None:
        _write_report(report_path, scored)
    return DepthSearchResult(
        candidates=tuple(scored), selected=best.config, margins=margins
    )
