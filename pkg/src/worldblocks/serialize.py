"""Versioned model archives and the shared dataset file format.

Archives are canonical JSON trees (sorted keys, one-space indent,
decimal floats as emitted by Python's shortest round-trip repr, which
is bit-faithful for doubles), so saving is deterministic and
save -> load -> save reproduces the file byte for byte.  Every node
carries a `kind` tag; the top level carries `format_version` plus
provenance (seed, dataset digest, build version).  Datasets are plain
tab-separated text: one header line describing the modalities, one
timestep per line, blank lines between sequences.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .composition import AffineInitMap, DepthConfig, GaussianInitTable, Link, ModelGraph
from .distributions import (
    CategoricalBelief,
    DirichletCounts,
    GaussianBelief,
)
from .errors import DataError, ShapeError, VersionError
from .hmm import HmmLayer
from .slds import SldsLayer

FORMAT_VERSION = 1
BUILD_VERSION = "0.1.0"
DATASET_MAGIC = "worldblocks-dataset"


# ---------------------------------------------------------------------------
# typed JSON tree encoding


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _encode(obj):
    if obj is None:
        return None
    if isinstance(obj, DirichletCounts):
        return {"kind": "dirichlet-counts", "counts": _arr(obj.counts)}
    if isinstance(obj, CategoricalBelief):
        return {"kind": "categorical-belief", "probs": _arr(obj.probs)}
    if isinstance(obj, GaussianBelief):
        return {
            "kind": "gaussian-belief",
            "mean": _arr(obj.mean),
            "covariance": _arr(obj.covariance),
        }
    if isinstance(obj, HmmLayer):
        return {
            "kind": "hmm-layer",
            "order_sizes": [list(map(int, sizes)) for sizes in obj.order_sizes],
            "num_obs": list(map(int, obj.num_obs)),
            "modality_factors": [list(map(int, f)) for f in obj.modality_factors],
            "controllable_orders": sorted(int(g) for g in obj.controllable_orders),
            "num_actions": int(obj.num_actions),
            "trans_counts": [[_encode(c) for c in per] for per in obj.trans_counts],
            "obs_counts": [_encode(c) for c in obj.obs_counts],
            "init_counts": [[_encode(c) for c in per] for per in obj.init_counts],
            "prior_count": float(obj.prior_count),
        }
    if isinstance(obj, SldsLayer):
        return {
            "kind": "slds-layer",
            "dynamics": _arr(obj.dynamics),
            "noise": _arr(obj.noise),
            "rec_base": _arr(obj.rec_base),
            "rec_weights": _arr(obj.rec_weights),
            "emission": _arr(obj.emission),
            "obs_noise": _arr(obj.obs_noise),
            "switch_init": _encode(obj.switch_init),
            "state_init": _encode(obj.state_init),
            "control_mats": None if obj.control_mats is None else _arr(obj.control_mats),
        }
    if isinstance(obj, GaussianInitTable):
        return {
            "kind": "gaussian-init-table",
            "means": _arr(obj.means),
            "covs": _arr(obj.covs),
            "switch_probs": None if obj.switch_probs is None else _arr(obj.switch_probs),
        }
    if isinstance(obj, AffineInitMap):
        return {
            "kind": "affine-init-map",
            "mat": _arr(obj.mat),
            "offset": _arr(obj.offset),
            "noise": _arr(obj.noise),
        }
    if isinstance(obj, Link):
        return {
            "kind": "link",
            "upper": int(obj.upper),
            "lower": int(obj.lower),
            "stride": int(obj.stride),
            "table": _encode(obj.table),
        }
    if isinstance(obj, ModelGraph):
        return {
            "kind": "model-graph",
            "layers": [_encode(l) for l in obj.layers],
            "links": [_encode(l) for l in obj.links],
        }
    if isinstance(obj, DepthConfig):
        return {
            "kind": "depth-config",
            "temporal": list(map(int, obj.temporal)),
            "hierarchical": int(obj.hierarchical),
            "factorial": list(map(int, obj.factorial)),
            "generalized": list(map(int, obj.generalized)),
        }
    raise DataError(f"cannot serialize {type(obj).__name__}")


def _need(tree: dict, key: str):
    if key not in tree:
        raise DataError(f"archive node of kind {tree.get('kind')!r} lacks {key!r}")
    return tree[key]


def _decode(tree):
    if tree is None:
        return None
    if not isinstance(tree, dict) or "kind" not in tree:
        raise DataError("malformed archive node: expected an object with a 'kind'")
    kind = tree["kind"]
    if kind == "dirichlet-counts":
        return DirichletCounts(np.asarray(_need(tree, "counts"), dtype=float))
    if kind == "categorical-belief":
        return CategoricalBelief(np.asarray(_need(tree, "probs"), dtype=float))
    if kind == "gaussian-belief":
        # Archived covariances are already regularized by the constructor;
        # restore them verbatim so decode is idempotent.
        mean = np.asarray(_need(tree, "mean"), dtype=float)
        cov = np.asarray(_need(tree, "covariance"), dtype=float)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DataError("gaussian-belief mean/covariance shapes inconsistent")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise DataError("gaussian-belief values must be finite")
        belief = object.__new__(GaussianBelief)
        object.__setattr__(belief, "mean", mean)
        object.__setattr__(belief, "covariance", cov)
        return belief
    if kind == "hmm-layer":
        return HmmLayer(
            order_sizes=tuple(tuple(s) for s in _need(tree, "order_sizes")),
            num_obs=tuple(_need(tree, "num_obs")),
            modality_factors=tuple(tuple(f) for f in _need(tree, "modality_factors")),
            controllable_orders=frozenset(_need(tree, "controllable_orders")),
            num_actions=int(_need(tree, "num_actions")),
            trans_counts=tuple(
                tuple(_decode(c) for c in per) for per in _need(tree, "trans_counts")
            ),
            obs_counts=tuple(_decode(c) for c in _need(tree, "obs_counts")),
            init_counts=tuple(
                tuple(_decode(c) for c in per) for per in _need(tree, "init_counts")
            ),
            prior_count=float(_need(tree, "prior_count")),
        )
    if kind == "slds-layer":
        ctrl = _need(tree, "control_mats")
        return SldsLayer(
            dynamics=np.asarray(_need(tree, "dynamics"), dtype=float),
            noise=np.asarray(_need(tree, "noise"), dtype=float),
            rec_base=np.asarray(_need(tree, "rec_base"), dtype=float),
            rec_weights=np.asarray(_need(tree, "rec_weights"), dtype=float),
            emission=np.asarray(_need(tree, "emission"), dtype=float),
            obs_noise=np.asarray(_need(tree, "obs_noise"), dtype=float),
            switch_init=_decode(_need(tree, "switch_init")),
            state_init=_decode(_need(tree, "state_init")),
            control_mats=None if ctrl is None else np.asarray(ctrl, dtype=float),
        )
    if kind == "gaussian-init-table":
        sw = _need(tree, "switch_probs")
        return GaussianInitTable(
            means=np.asarray(_need(tree, "means"), dtype=float),
            covs=np.asarray(_need(tree, "covs"), dtype=float),
            switch_probs=None if sw is None else np.asarray(sw, dtype=float),
        )
    if kind == "affine-init-map":
        return AffineInitMap(
            mat=np.asarray(_need(tree, "mat"), dtype=float),
            offset=np.asarray(_need(tree, "offset"), dtype=float),
            noise=np.asarray(_need(tree, "noise"), dtype=float),
        )
    if kind == "link":
        return Link(
            upper=int(_need(tree, "upper")),
            lower=int(_need(tree, "lower")),
            table=_decode(_need(tree, "table")),
            stride=int(_need(tree, "stride")),
        )
    if kind == "model-graph":
        return ModelGraph(
            layers=tuple(_decode(l) for l in _need(tree, "layers")),
            links=tuple(_decode(l) for l in _need(tree, "links")),
        )
    if kind == "depth-config":
        return DepthConfig(
            temporal=tuple(_need(tree, "temporal")),
            hierarchical=int(_need(tree, "hierarchical")),
            factorial=tuple(_need(tree, "factorial")),
            generalized=tuple(_need(tree, "generalized")),
        )
    raise DataError(f"unknown archive node kind {kind!r}")


# ---------------------------------------------------------------------------
# archives


@dataclass(frozen=True)
class ModelArchive:
    """A model with its structural config and provenance."""

    model: object
    depth: DepthConfig = None
    seed: int = None
    dataset_digest: str = None
    build_version: str = BUILD_VERSION

    def __post_init__(self):
        if not isinstance(self.model, (HmmLayer, SldsLayer, ModelGraph)):
            raise DataError(
                f"archive model must be a layer or graph, not {type(self.model).__name__}"
            )
        if self.depth is not None and not isinstance(self.depth, DepthConfig):
            raise DataError("archive depth must be a DepthConfig")


def archive_bytes(archive: ModelArchive) -> bytes:
    tree = {
        "format_version": FORMAT_VERSION,
        "model": _encode(archive.model),
        "depth": _encode(archive.depth),
        "provenance": {
            "seed": None if archive.seed is None else int(archive.seed),
            "dataset_digest": archive.dataset_digest,
            "build_version": archive.build_version,
        },
    }
    return (json.dumps(tree, sort_keys=True, indent=1, allow_nan=False) + "\n").encode()


def save_archive(path, archive: ModelArchive) -> None:
    with open(path, "wb") as fh:
        fh.write(archive_bytes(archive))


def load_archive(path) -> ModelArchive:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            tree = json.load(fh)
    except OSError as err:
        raise DataError(f"cannot read archive {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise DataError(f"archive {path} is not valid JSON: {err}") from err
    if not isinstance(tree, dict) or "format_version" not in tree:
        raise DataError(f"archive {path} lacks a format_version")
    version = tree["format_version"]
    if version != FORMAT_VERSION:
        raise VersionError(
            f"archive {path} uses format version {version}; this build reads {FORMAT_VERSION}"
        )
    prov = tree.get("provenance") or {}
    return ModelArchive(
        model=_decode(_need(tree, "model")),
        depth=_decode(tree.get("depth")),
        seed=prov.get("seed"),
        dataset_digest=prov.get("dataset_digest"),
        build_version=prov.get("build_version", BUILD_VERSION),
    )


def file_digest(path) -> str:
    try:
        with open(path, "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err


# ---------------------------------------------------------------------------
# datasets


def _clean_names(names, width) -> tuple:
    if names is None:
        names = [f"m{i}" for i in range(width)]
    names = [str(n) for n in names]
    if len(names) != width:
        raise ShapeError(f"need {width} modality names; got {len(names)}")
    for n in names:
        if not n or any(c in n for c in "\t\n,= "):
            raise DataError(f"modality name {n!r} contains reserved characters")
    return tuple(names)


def write_dataset(path, sequences, *, names=None, sizes=None) -> None:
    """Write sequences (list of (T, M) arrays) as tab-separated text.

    Integer arrays become a discrete dataset with per-modality alphabet
    sizes (inferred from the data unless given); float arrays become a
    continuous dataset.  Sequences are separated by blank lines.
    """
    seqs = [np.atleast_2d(np.asarray(s)) for s in sequences]
    if not seqs or any(s.size == 0 for s in seqs):
        raise DataError("dataset must contain at least one non-empty sequence")
    width = seqs[0].shape[1]
    if any(s.shape[1] != width for s in seqs):
        raise ShapeError("all sequences must share one modality count")
    discrete = all(np.issubdtype(s.dtype, np.integer) for s in seqs)
    names = _clean_names(names, width)
    if discrete:
        if any(s.min() < 0 for s in seqs):
            raise DataError("discrete symbols must be non-negative")
        if sizes is None:
            sizes = [int(max(s[:, m].max() for s in seqs)) + 1 for m in range(width)]
        sizes = [int(x) for x in sizes]
        if len(sizes) != width or any(x < 1 for x in sizes):
            raise ShapeError(f"need {width} positive alphabet sizes")
        for m in range(width):
            if any(s[:, m].max() >= sizes[m] for s in seqs):
                raise DataError(f"modality {m}: symbol outside its declared alphabet")
        header = "\t".join(
            [
                DATASET_MAGIC,
                "v1",
                "discrete",
                "sizes=" + ",".join(map(str, sizes)),
                "names=" + ",".join(names),
            ]
        )
        blocks = [
            "\n".join("\t".join(str(int(v)) for v in row) for row in s) for s in seqs
        ]
    else:
        for s in seqs:
            if not np.all(np.isfinite(np.asarray(s, dtype=float))):
                raise DataError("continuous dataset values must be finite")
        header = "\t".join(
            [
                DATASET_MAGIC,
                "v1",
                "continuous",
                f"dims={width}",
                "names=" + ",".join(names),
            ]
        )
        blocks = [
            "\n".join("\t".join(repr(float(v)) for v in row) for row in s) for s in seqs
        ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n" + "\n\n".join(blocks) + "\n")


def read_dataset(path):
    """Read a dataset file; returns (sequences, meta).

    meta holds kind ("discrete"/"continuous"), names, and sizes (an
    alphabet-size tuple, or observation dims for continuous data).
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise DataError(f"cannot read dataset {path}: {err}") from err
    lines = text.splitlines()
    if not lines:
        raise DataError(f"dataset {path} is empty")
    fields = lines[0].split("\t")
    if len(fields) != 5 or fields[0] != DATASET_MAGIC or fields[1] != "v1":
        raise DataError(f"dataset {path} has an unrecognized header")
    kind = fields[2]
    if kind not in ("discrete", "continuous"):
        raise DataError(f"dataset {path}: unknown kind {kind!r}")
    names = tuple(fields[4].removeprefix("names=").split(","))
    if kind == "discrete":
        sizes = tuple(int(x) for x in fields[3].removeprefix("sizes=").split(","))
    else:
        sizes = (int(fields[3].removeprefix("dims=")),)
    width = len(names)

    sequences = []
    block = []
    for line in lines[1:]:
        if not line.strip():
            if block:
                sequences.append(block)
                block = []
            continue
        block.append(line.split("\t"))
    if block:
        sequences.append(block)
    if not sequences:
        raise DataError(f"dataset {path} contains no timesteps")

    out = []
    for rows in sequences:
        if any(len(r) != width for r in rows):
            raise DataError(f"dataset {path}: row width differs from the header")
        try:
            if kind == "discrete":
                arr = np.array([[int(v) for v in r] for r in rows], dtype=int)
            else:
                arr = np.array([[float(v) for v in r] for r in rows], dtype=float)
        except ValueError as err:
            raise DataError(f"dataset {path}: unparsable value ({err})") from err
        if kind == "discrete":
            if arr.min() < 0 or np.any(arr >= np.asarray(sizes)):
                raise DataError(f"dataset {path}: symbol outside the declared alphabet")
        elif not np.all(np.isfinite(arr)):
            raise DataError(f"dataset {path}: non-finite value")
        out.append(arr)
    meta = {"kind": kind, "names": names, "sizes": sizes}
    return out, meta
