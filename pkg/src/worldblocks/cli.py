"""Command-line front end: train, generate, infer, plan, search, inspect.

Every command reads one JSON config file, draws randomness only from
named streams of the run seed, and writes its primary outputs as
deterministic text, so a fixed (config, seed) pair reproduces every
file byte for byte.  Wall-clock measurements never enter a primary
output; they go to `timing.tsv` sidecars.  Library errors map onto
exit codes: 2 configuration, 3 data, 4 numerical, 5 archive version.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .composition import DepthConfig, ModelGraph, generate, hierarchical_infer
from .distributions import DirichletCounts
from .envs import (
    Gridworld,
    MiniArcade,
    TMaze,
    arcade_model,
    gridworld_model,
    tmaze_model,
)
from .errors import (
    ConfigError,
    DataError,
    GrowthStallError,
    NumericalError,
    VersionError,
    WorldBlocksError,
)
from .hmm import HmmLayer, forward_backward, generalized_rollout, vb_update
from .planning import (
    PlannerConfig,
    Preferences,
    act_loop,
    write_episode_log,
    write_timing_sidecar,
)
from .rng import stream
from .serialize import (
    ModelArchive,
    file_digest,
    load_archive,
    read_dataset,
    save_archive,
    write_dataset,
)
from .slds import SldsLayer, simulate, structured_vi, vb_learn
from .structure import depth_search, fsl_build, mi_grouping

COMMANDS = ("train", "generate", "infer", "plan", "search", "inspect")

_ERROR_CODES = (
    (VersionError, 5),
    (GrowthStallError, 4),
    (NumericalError, 4),
    (DataError, 3),
    (ConfigError, 2),
    (WorldBlocksError, 2),
)


def _fmt(x) -> str:
    return repr(float(x))


def _write_text(path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """One parsed CLI invocation: command, seed, output dir, options."""

    command: str
    seed: int
    out: str
    jobs: int
    options: dict = field(default_factory=dict)
    base: str = "."

    def path(self, key: str, default=None) -> str:
        """Resolve a path-valued option against the config file's directory."""
        raw = self.options.get(key, default)
        if raw is None:
            raise ConfigError(f"{self.command}: config needs a {key!r} path")
        if not isinstance(raw, str) or not raw:
            raise ConfigError(f"{self.command}: {key!r} must be a non-empty path string")
        return raw if os.path.isabs(raw) else os.path.normpath(os.path.join(self.base, raw))

    def integer(self, key: str, default=None, minimum: int = 1) -> int:
        raw = self.options.get(key, default)
        if raw is None:
            raise ConfigError(f"{self.command}: config needs an integer {key!r}")
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"{self.command}: {key!r} must be an integer")
        if raw < minimum:
            raise ConfigError(f"{self.command}: {key!r} must be >= {minimum}")
        return int(raw)

    def number(self, key: str, default=None):
        raw = self.options.get(key, default)
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{self.command}: {key!r} must be a number")
        return float(raw)

    def out_path(self, name: str) -> str:
        os.makedirs(self.out, exist_ok=True)
        return os.path.join(self.out, name)


def parse_run_config(command: str, config_path: str, *, seed=None, out=None, jobs=None) -> RunConfig:
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {config_path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {config_path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"config {config_path} must hold a JSON object")
    declared = raw.get("command")
    if declared is not None and declared != command:
        raise ConfigError(
            f"config declares command {declared!r} but {command!r} was invoked"
        )
    cfg = RunConfig(
        command=command,
        seed=0,
        out=".",
        jobs=1,
        options=raw,
        base=os.path.dirname(os.path.abspath(config_path)),
    )
    cfg.seed = cfg.integer("seed", 0, minimum=0) if seed is None else int(seed)
    cfg.jobs = cfg.integer("jobs", 1, minimum=1) if jobs is None else int(jobs)
    if jobs is not None and cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    if out is not None:
        cfg.out = out
    elif isinstance(raw.get("out"), str) and raw["out"]:
        cfg.out = cfg.path("out")
    return cfg


# ---------------------------------------------------------------------------
# train


def _jiggled(layer: HmmLayer, rng, scale: float = 0.01) -> HmmLayer:
    """Break the symmetry of flat tables so EM can leave the uniform
    fixed point; the perturbation is tiny and seed-deterministic."""

    def j(dc: DirichletCounts) -> DirichletCounts:
        return DirichletCounts(dc.counts + rng.uniform(0.0, scale, size=dc.counts.shape))

    return replace(
        layer,
        trans_counts=tuple(tuple(j(c) for c in per) for per in layer.trans_counts),
        obs_counts=tuple(j(c) for c in layer.obs_counts),
        init_counts=tuple(tuple(j(c) for c in per) for per in layer.init_counts),
    )


def _require_kind(meta: dict, kind: str, what: str) -> None:
    if meta["kind"] != kind:
        raise DataError(f"{what} needs a {kind} dataset; got {meta['kind']}")


def _train_hmm(cfg: RunConfig, seqs, meta):
    _require_kind(meta, "discrete", "hmm training")
    sweeps = cfg.integer("sweeps", 5)
    states = cfg.options.get("states", [max(meta["sizes"])])
    if isinstance(states, int):
        states = [states]
    gen_depth = cfg.integer("gen_depth", 1)
    base = HmmLayer.uniform(
        states,
        meta["sizes"],
        gen_depth=gen_depth,
        prior=cfg.number("prior", 0.1),
    )
    prior_layer = _jiggled(base, stream(cfg.seed, "cli:train"))
    layer = prior_layer
    elbos = []
    for sweep in range(sweeps):
        trajs = [forward_backward(layer, seq) for seq in seqs]
        elbo = float(sum(t.log_evidence for t in trajs))
        if not np.isfinite(elbo):
            raise NumericalError(f"training ELBO not finite at sweep {sweep}")
        elbos.append(elbo)
        layer = vb_update(prior_layer, trajs, seqs)
    depth = DepthConfig((1,), 1, (len(states),), (gen_depth,))
    return layer, depth, elbos


def _fsl_observed_obs(graph: ModelGraph, seq, groups):
    """Map dataset channels onto the graph's observed (bottom) layers."""
    if graph.num_layers == 1:
        cols = [c for g in groups for c in g]
        return {0: seq[:, cols]}
    return {g: seq[:, list(groups[g])] for g in range(len(groups))}


def _train_fsl(cfg: RunConfig, seqs, meta):
    _require_kind(meta, "discrete", "pattern-layer training")
    if len(seqs) != 1:
        raise DataError(
            f"pattern-layer training uses a single sequence; dataset has {len(seqs)}"
        )
    strides = cfg.options.get("strides")
    if not isinstance(strides, list) or not strides:
        raise ConfigError("train: 'strides' must be a non-empty list of integers")
    mi_threshold = cfg.number("mi_threshold", 0.05)
    pattern_cap = cfg.integer("pattern_cap", 256)
    channels = np.asarray(seqs[0]).T
    graph = fsl_build(
        channels, strides, mi_threshold=mi_threshold, pattern_cap=pattern_cap
    )
    groups = mi_grouping(channels, mi_threshold).groups
    obs = _fsl_observed_obs(graph, seqs[0], groups)
    post = hierarchical_infer(graph, obs, sweeps=cfg.integer("sweeps", 3))
    for sweep, elbo in enumerate(np.asarray(post.elbo_trace, dtype=float)):
        if not np.isfinite(elbo):
            raise NumericalError(f"training ELBO not finite at sweep {sweep}")
    return graph, None, [float(e) for e in post.elbo_trace]


def _train_slds(cfg: RunConfig, seqs, meta):
    _require_kind(meta, "continuous", "slds training")
    init = load_archive(cfg.path("init_model"))
    if not isinstance(init.model, SldsLayer):
        raise ConfigError("train: 'init_model' must hold a continuous layer")
    layer, trace = vb_learn(
        init.model,
        seqs,
        cfg.integer("sweeps", 4),
        inner_iters=cfg.integer("inner_iters", 3),
    )
    for sweep, elbo in enumerate(np.asarray(trace, dtype=float)):
        if not np.isfinite(elbo):
            raise NumericalError(f"training ELBO not finite at sweep {sweep}")
    return layer, None, [float(e) for e in trace]


_TRAIN_MODES = {"hmm": _train_hmm, "fsl": _train_fsl, "slds": _train_slds}


def cmd_train(cfg: RunConfig) -> int:
    mode = cfg.options.get("mode", "hmm")
    if mode not in _TRAIN_MODES:
        raise ConfigError(f"train: unknown mode {mode!r}; pick one of {sorted(_TRAIN_MODES)}")
    dataset_path = cfg.path("dataset")
    seqs, meta = read_dataset(dataset_path)
    model, depth, elbos = _TRAIN_MODES[mode](cfg, seqs, meta)
    save_archive(
        cfg.out_path("model.json"),
        ModelArchive(
            model,
            depth=depth,
            seed=cfg.seed,
            dataset_digest=file_digest(dataset_path),
        ),
    )
    _write_text(
        cfg.out_path("metrics.tsv"),
        ["sweep\telbo"] + [f"{i}\t{_fmt(e)}" for i, e in enumerate(elbos)],
    )
    return 0


# ---------------------------------------------------------------------------
# generate


def _graph_observed_layers(graph: ModelGraph):
    uppers = {link.upper for link in graph.links}
    return [l for l in range(graph.num_layers) if l not in uppers]


def cmd_generate(cfg: RunConfig) -> int:
    archive = load_archive(cfg.path("model"))
    model = archive.model
    if isinstance(model, ModelGraph) and model.num_layers == 1 and not model.links:
        model = model.layers[0]
    horizon = cfg.integer("horizon")
    rng = stream(cfg.seed, "cli:generate")
    if isinstance(model, HmmLayer):
        policy = None
        if model.controllable:
            policy = lambda t, states: int(rng.integers(model.num_actions))
        _, obs, _ = generalized_rollout(model, horizon, rng, policy=policy)
        write_dataset(cfg.out_path("data.tsv"), [obs], sizes=model.num_obs)
    elif isinstance(model, SldsLayer):
        controls = None
        if model.control_dim:
            controls = np.zeros((max(horizon - 1, 1), model.control_dim))
        _, _, obs = simulate(model, horizon, rng, controls=controls)
        write_dataset(cfg.out_path("data.tsv"), [obs])
    else:
        samples = generate(model, horizon, rng)
        observed = _graph_observed_layers(model)
        blocks = [np.asarray(samples[l].obs) for l in observed]
        if len({b.shape[0] for b in blocks}) != 1:
            raise ConfigError("generate: observed layers disagree on horizon")
        obs = np.concatenate(blocks, axis=1)
        sizes = [o for l in observed for o in model.layers[l].num_obs]
        write_dataset(cfg.out_path("data.tsv"), [obs], sizes=sizes)
    return 0


# ---------------------------------------------------------------------------
# infer


def _infer_hmm(cfg: RunConfig, layer: HmmLayer, seqs, meta):
    _require_kind(meta, "discrete", "inference")
    if layer.controllable:
        raise ConfigError("infer: dataset carries no actions; model must be passive")
    posterior = ["seq\tt\tfactor\tmap_state\tprob"]
    metrics = ["seq\tlog_evidence"]
    for i, seq in enumerate(seqs):
        traj = forward_backward(layer, seq)
        for f in range(layer.num_factors):
            marg = traj.state_marginals(f)
            for t in range(marg.shape[0]):
                k = int(np.argmax(marg[t]))
                posterior.append(f"{i}\t{t}\t{f}\t{k}\t{_fmt(marg[t, k])}")
        metrics.append(f"{i}\t{_fmt(traj.log_evidence)}")
    return posterior, metrics


def _infer_graph(cfg: RunConfig, graph: ModelGraph, seqs, meta):
    _require_kind(meta, "discrete", "inference")
    observed = _graph_observed_layers(graph)
    if observed != [0]:
        raise ConfigError("infer: the graph must observe exactly its first layer")
    posterior = ["seq\tlayer\tt\tmap_config\tprob"]
    metrics = ["seq\tsweep\telbo"]
    sweeps = cfg.integer("sweeps", 3)
    for i, seq in enumerate(seqs):
        post = hierarchical_infer(graph, {0: seq}, sweeps=sweeps)
        for l in range(graph.num_layers):
            marg = post.order1_marginals(l)
            for t in range(marg.shape[0]):
                k = int(np.argmax(marg[t]))
                posterior.append(f"{i}\t{l}\t{t}\t{k}\t{_fmt(marg[t, k])}")
        for sweep, elbo in enumerate(np.asarray(post.elbo_trace, dtype=float)):
            metrics.append(f"{i}\t{sweep}\t{_fmt(elbo)}")
    return posterior, metrics


def _infer_slds(cfg: RunConfig, layer: SldsLayer, seqs, meta):
    _require_kind(meta, "continuous", "inference")
    if layer.control_dim:
        raise ConfigError("infer: dataset carries no controls; model must be passive")
    posterior = ["seq\tt\tmap_mode\tprob"]
    metrics = ["seq\telbo"]
    for i, seq in enumerate(seqs):
        traj = structured_vi(layer, seq, iters=cfg.integer("iters", 10))
        for t in range(traj.switch_marginals.shape[0]):
            k = int(np.argmax(traj.switch_marginals[t]))
            posterior.append(f"{i}\t{t}\t{k}\t{_fmt(traj.switch_marginals[t, k])}")
        metrics.append(f"{i}\t{_fmt(traj.elbo)}")
    return posterior, metrics


def cmd_infer(cfg: RunConfig) -> int:
    archive = load_archive(cfg.path("model"))
    seqs, meta = read_dataset(cfg.path("dataset"))
    model = archive.model
    if isinstance(model, HmmLayer):
        posterior, metrics = _infer_hmm(cfg, model, seqs, meta)
    elif isinstance(model, ModelGraph):
        posterior, metrics = _infer_graph(cfg, model, seqs, meta)
    else:
        posterior, metrics = _infer_slds(cfg, model, seqs, meta)
    _write_text(cfg.out_path("posterior.tsv"), posterior)
    _write_text(cfg.out_path("metrics.tsv"), metrics)
    return 0


# ---------------------------------------------------------------------------
# plan


_BUILTIN_MODELS = {
    "tmaze_model": tmaze_model,
    "gridworld_model": gridworld_model,
    "arcade_model": arcade_model,
}


def _make_env(cfg: RunConfig):
    env_cfg = cfg.options.get("env")
    if not isinstance(env_cfg, dict) or "name" not in env_cfg:
        raise ConfigError("plan: config needs an 'env' object with a 'name'")
    name = env_cfg["name"]
    args = dict(env_cfg.get("args", {}))
    try:
        if name == "tmaze":
            return TMaze(cfg.seed, **args)
        if name == "gridworld":
            dims = tuple(args.pop("dims"))
            goal = tuple(args.pop("goal"))
            return Gridworld(dims, goal, cfg.seed, **args)
        if name == "mini-arcade":
            return MiniArcade(cfg.seed, **args)
    except KeyError as err:
        raise ConfigError(f"plan: env {name!r} needs argument {err.args[0]!r}") from err
    except TypeError as err:
        raise ConfigError(f"plan: bad arguments for env {name!r}: {err}") from err
    raise ConfigError(f"plan: unknown env {name!r}")


def _make_model(cfg: RunConfig) -> HmmLayer:
    raw = cfg.options.get("model")
    if isinstance(raw, dict):
        name = raw.get("builtin")
        if name not in _BUILTIN_MODELS:
            raise ConfigError(
                f"plan: unknown builtin model {name!r}; pick one of {sorted(_BUILTIN_MODELS)}"
            )
        args = dict(raw.get("args", {}))
        for key in ("dims", "goal"):
            if key in args:
                args[key] = tuple(args[key])
        try:
            model = _BUILTIN_MODELS[name](**args)
        except TypeError as err:
            raise ConfigError(f"plan: bad arguments for model {name!r}: {err}") from err
    else:
        model = load_archive(cfg.path("model")).model
    if not isinstance(model, HmmLayer):
        raise ConfigError("plan: the model must be a discrete layer")
    return model


def _make_preferences(cfg: RunConfig) -> Preferences:
    raw = cfg.options.get("preferences")
    if not isinstance(raw, dict) or "log" not in raw:
        raise ConfigError("plan: config needs 'preferences' with a 'log' table")
    try:
        log_prefs = {int(k): np.asarray(v, dtype=float) for k, v in raw["log"].items()}
    except (TypeError, ValueError) as err:
        raise ConfigError(f"plan: malformed preferences: {err}") from err
    return Preferences(log_prefs=log_prefs)


def _make_planner(cfg: RunConfig) -> PlannerConfig:
    raw = cfg.options.get("planner", {})
    if not isinstance(raw, dict):
        raise ConfigError("plan: 'planner' must be an object")
    allowed = {"plan_horizon", "info_weight", "param_gain", "learn", "rollouts"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"plan: unknown planner settings {sorted(unknown)}")
    return PlannerConfig(**raw)


def cmd_plan(cfg: RunConfig) -> int:
    env = _make_env(cfg)
    layer = _make_model(cfg)
    prefs = _make_preferences(cfg)
    planner = _make_planner(cfg)
    episodes = cfg.integer("episodes")
    logs, layer = act_loop(env, layer, prefs, planner, episodes, seed=cfg.seed)
    write_episode_log(cfg.out_path("episodes.tsv"), logs)
    write_timing_sidecar(cfg.out_path("timing.tsv"), logs)
    returns = np.array([log.total_reward for log in logs])
    sem = float(returns.std(ddof=1) / np.sqrt(len(returns))) if len(returns) > 1 else 0.0
    summary = ["episode\tsteps\treturn\tfallback"]
    for ep, log in enumerate(logs):
        summary.append(
            f"{ep}\t{len(log.steps)}\t{_fmt(log.total_reward)}\t{int(log.fallback_used)}"
        )
    mean = float(returns.mean())
    summary.append(f"# mean_return\t{_fmt(mean)}")
    summary.append(f"# ci95_low\t{_fmt(mean - 1.96 * sem)}")
    summary.append(f"# ci95_high\t{_fmt(mean + 1.96 * sem)}")
    summary.append(f"# mean_steps\t{_fmt(np.mean([len(log.steps) for log in logs]))}")
    _write_text(cfg.out_path("summary.tsv"), summary)
    save_archive(cfg.out_path("model.json"), ModelArchive(layer, seed=cfg.seed))
    return 0


# ---------------------------------------------------------------------------
# search


def _parse_candidates(cfg: RunConfig):
    raw = cfg.options.get("candidates")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("search: 'candidates' must be a non-empty list")
    out = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ConfigError(f"search: candidate {i} must be an object")
        try:
            out.append(
                DepthConfig(
                    temporal=tuple(item["temporal"]),
                    hierarchical=int(item["hierarchical"]),
                    factorial=tuple(item["factorial"]),
                    generalized=tuple(item["generalized"]),
                )
            )
        except KeyError as err:
            raise ConfigError(
                f"search: candidate {i} lacks {err.args[0]!r}"
            ) from err
    return out


def _depth_cols(c: DepthConfig):
    return [
        ",".join(map(str, c.temporal)),
        str(c.hierarchical),
        ",".join(map(str, c.factorial)),
        ",".join(map(str, c.generalized)),
    ]


def cmd_search(cfg: RunConfig) -> int:
    seqs, meta = read_dataset(cfg.path("dataset"))
    _require_kind(meta, "discrete", "depth search")
    candidates = _parse_candidates(cfg)
    result = depth_search(
        seqs,
        candidates,
        cfg.integer("budget"),
        upper_states=cfg.integer("upper_states", 4),
        e_sweeps=cfg.integer("e_sweeps", 2),
        seed=cfg.seed,
        restarts=cfg.integer("restarts", 3),
        jobs=cfg.jobs,
    )
    rows = sorted(
        zip(result.candidates, np.asarray(result.margins, dtype=float)),
        key=lambda pair: (
            pair[0].config.temporal,
            pair[0].config.hierarchical,
            pair[0].config.factorial,
            pair[0].config.generalized,
        ),
    )
    report = [
        "temporal\thierarchical\tfactorial\tgeneralized\tscore\telbo\tparams\tfailed\tselected\tmargin"
    ]
    timing = ["temporal\thierarchical\tfactorial\tgeneralized\tseconds"]
    for score, margin in rows:
        cols = _depth_cols(score.config)
        report.append(
            "\t".join(
                cols
                + [
                    _fmt(score.score),
                    _fmt(score.elbo),
                    str(int(score.params)),
                    str(int(score.failed)),
                    str(int(score.config == result.selected)),
                    _fmt(margin),
                ]
            )
        )
        timing.append("\t".join(cols + [f"{score.seconds:.6f}"]))
    _write_text(cfg.out_path("report.tsv"), report)
    _write_text(cfg.out_path("timing.tsv"), timing)
    return 0


# ---------------------------------------------------------------------------
# inspect


def _describe_model(model, lines, indent="  ") -> None:
    if isinstance(model, HmmLayer):
        lines.append(
            f"{indent}discrete layer: factors={model.num_factors}"
            f" gen_depth={model.gen_depth} actions={model.num_actions}"
        )
        for f, sizes in enumerate(model.order_sizes):
            lines.append(f"{indent}  factor {f}: order sizes {','.join(map(str, sizes))}")
        for m, size in enumerate(model.num_obs):
            facs = ",".join(map(str, model.modality_factors[m]))
            lines.append(f"{indent}  modality {m}: size {size} factors {facs}")
        total = sum(
            float(c.counts.sum()) for per in model.trans_counts for c in per
        ) + sum(float(c.counts.sum()) for c in model.obs_counts)
        lines.append(f"{indent}  total pseudo-counts {_fmt(total)}")
    elif isinstance(model, SldsLayer):
        lines.append(
            f"{indent}continuous layer: modes={model.num_modes} dim={model.state_dim}"
            f" obs_dim={model.obs_dim} control_dim={model.control_dim}"
        )
    else:
        lines.append(f"{indent}graph: {model.num_layers} layers, {len(model.links)} links")
        for l, layer in enumerate(model.layers):
            lines.append(f"{indent}layer {l}:")
            _describe_model(layer, lines, indent + "  ")
        for link in model.links:
            lines.append(
                f"{indent}link {link.upper}->{link.lower} stride {link.stride}"
            )


def cmd_inspect(cfg: RunConfig) -> int:
    path = cfg.path("model")
    archive = load_archive(path)
    lines = [
        f"format_version\t{1}",
        f"build_version\t{archive.build_version}",
        f"seed\t{archive.seed}",
        f"dataset_digest\t{archive.dataset_digest}",
    ]
    if archive.depth is None:
        lines.append("depth\tnone")
    else:
        lines.append("depth\t" + " ".join(_depth_cols(archive.depth)))
    _describe_model(archive.model, lines, indent="")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# entry point


_HANDLERS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "infer": cmd_infer,
    "plan": cmd_plan,
    "search": cmd_search,
    "inspect": cmd_inspect,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="worldblocks",
        description="Structured world-model toolkit: train, generate, infer, plan, search, inspect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--jobs", type=int, default=None, help="concurrency bound")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = parse_run_config(
            args.command, args.config, seed=args.seed, out=args.out, jobs=args.jobs
        )
        return _HANDLERS[args.command](cfg)
    except WorldBlocksError as err:
        print(f"worldblocks {args.command}: error: {err}", file=sys.stderr)
        for cls, code in _ERROR_CODES:
            if isinstance(err, cls):
                return code
        return 2


if __name__ == "__main__":
    sys.exit(main())
