"""Archive and dataset serialization: canonical bytes, bit-faithful
round trips, version gating, and dataset format validation.

Oracles: byte equality of save -> load -> save, exact array equality of
model parameters and of inference results computed before and after a
round trip, and hashlib recomputation for digests.
"""

import hashlib
import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from worldblocks.composition import (
    AffineInitMap,
    DepthConfig,
    GaussianInitTable,
    Link,
    ModelGraph,
)
from worldblocks.distributions import CategoricalBelief, DirichletCounts, GaussianBelief
from worldblocks.envs import arcade_model, tmaze_model
from worldblocks.errors import DataError, VersionError
from worldblocks.hmm import HmmLayer, forward_backward
from worldblocks.rng import stream
from worldblocks.serialize import (
    FORMAT_VERSION,
    ModelArchive,
    archive_bytes,
    file_digest,
    load_archive,
    read_dataset,
    save_archive,
    write_dataset,
)
from worldblocks.slds import SldsLayer, simulate, structured_vi


def slds_layer(control=True):
    return SldsLayer(
        dynamics=np.stack([np.eye(2), np.array([[0.9, 1 / 3], [0.0, 0.7]])]),
        noise=np.stack([0.01 * np.eye(2)] * 2),
        rec_base=np.array([[0.2, -0.1], [0.0, 0.5]]),
        rec_weights=np.array([[0.3, 0.0], [-0.2, 0.1]]),
        emission=np.array([[1.0, 0.0]]),
        obs_noise=np.array([[0.05]]),
        switch_init=CategoricalBelief(np.array([0.75, 0.25])),
        state_init=GaussianBelief(np.zeros(2), np.eye(2)),
        control_mats=np.stack([np.eye(2)] * 2) if control else None,
    )


def hierarchy_graph():
    upper = HmmLayer.from_tables(
        trans=np.array([[0.8, 0.3], [0.2, 0.7]]),
        obs=np.array([[0.9, 0.2], [0.1, 0.8]]),
        init=np.array([0.6, 0.4]),
    )
    table = GaussianInitTable(
        means=np.array([[0.0, 0.0], [2.0, -1.0]]),
        covs=np.stack([np.eye(2)] * 2),
        switch_probs=np.array([[1.0, 0.0], [0.0, 1.0]]),
    )
    return ModelGraph(layers=(upper, slds_layer(control=False)), links=(Link(0, 1, table, stride=3),))


MODELS = {
    "pomdp": tmaze_model,
    "pomdp-grounded": arcade_model,
    "generalized": lambda: HmmLayer.uniform(
        (2, 3), (4,), gen_depth=2, controllable_orders=(1,), num_actions=2
    ),
    "slds": slds_layer,
    "slds-passive": lambda: slds_layer(control=False),
    "graph": hierarchy_graph,
}


class TestArchiveRoundTrip:
    @pytest.mark.parametrize("name", sorted(MODELS))
    def test_save_load_save_is_byte_identical(self, tmp_path, name):
        archive = ModelArchive(MODELS[name](), seed=7, dataset_digest="d" * 64)
        path = tmp_path / "model.json"
        save_archive(path, archive)
        first = path.read_bytes()
        reloaded = load_archive(path)
        save_archive(path, reloaded)
        assert path.read_bytes() == first
        # and a second generation stays fixed too
        save_archive(path, load_archive(path))
        assert path.read_bytes() == first

    def test_provenance_and_depth_survive(self, tmp_path):
        depth = DepthConfig((1, 4), 2, (1, 2), (2, 1))
        archive = ModelArchive(tmaze_model(), depth=depth, seed=11, dataset_digest="abc")
        path = tmp_path / "m.json"
        save_archive(path, archive)
        back = load_archive(path)
        assert back.depth == depth
        assert back.seed == 11
        assert back.dataset_digest == "abc"
        assert back.build_version == archive.build_version

    def test_adversarial_floats_bit_faithful(self, tmp_path):
        counts = np.array([[1 / 3, 1e-300], [6.02214076e23, 1 + 2**-52]])
        layer = HmmLayer.from_tables(
            trans=np.array([[0.9, 0.2], [0.1, 0.8]]),
            obs=np.array([[0.5, 0.5], [0.5, 0.5]]),
            init=np.array([0.5, 0.5]),
        )
        from dataclasses import replace

        layer = replace(layer, trans_counts=((DirichletCounts(counts),),))
        path = tmp_path / "m.json"
        save_archive(path, ModelArchive(layer))
        back = load_archive(path).model
        assert_array_equal(back.trans_counts[0][0].counts, counts)

    def test_discrete_inference_identical_after_reload(self, tmp_path):
        layer = tmaze_model()
        path = tmp_path / "m.json"
        save_archive(path, ModelArchive(layer))
        back = load_archive(path).model
        obs = np.array([[0, 0, 0], [3, 1, 0], [1, 0, 1]])
        acts = np.array([2, 0])
        a = forward_backward(layer, obs, acts)
        b = forward_backward(back, obs, acts)
        assert a.log_evidence == b.log_evidence
        for f in range(layer.num_factors):
            assert_array_equal(a.factor_marginals[f], b.factor_marginals[f])

    def test_continuous_inference_identical_after_reload(self, tmp_path):
        layer = slds_layer(control=False)
        path = tmp_path / "m.json"
        save_archive(path, ModelArchive(layer))
        back = load_archive(path).model
        _, _, obs = simulate(layer, 12, stream(3, "ser"))
        a = structured_vi(layer, obs, iters=4)
        b = structured_vi(back, obs, iters=4)
        assert a.elbo == b.elbo
        assert_array_equal(a.switch_marginals, b.switch_marginals)
        assert_array_equal(np.asarray(a.means), np.asarray(b.means))

    def test_simulation_identical_after_reload(self, tmp_path):
        layer = slds_layer()
        path = tmp_path / "m.json"
        save_archive(path, ModelArchive(layer))
        back = load_archive(path).model
        controls = stream(0, "u").normal(size=(9, 2))
        m1, s1, o1 = simulate(layer, 10, stream(1, "sim"), controls=controls)
        m2, s2, o2 = simulate(back, 10, stream(1, "sim"), controls=controls)
        assert_array_equal(m1, m2)
        assert_array_equal(s1, s2)
        assert_array_equal(o1, o2)


class TestArchiveRejections:
    def test_future_format_version(self, tmp_path):
        path = tmp_path / "m.json"
        save_archive(path, ModelArchive(tmaze_model()))
        tree = json.loads(path.read_text())
        tree["format_version"] = FORMAT_VERSION + 1
        path.write_text(json.dumps(tree))
        with pytest.raises(VersionError):
            load_archive(path)

    def test_missing_version_malformed_and_unknown_kind(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{}")
        with pytest.raises(DataError):
            load_archive(path)
        path.write_text("{not json")
        with pytest.raises(DataError):
            load_archive(path)
        save_archive(path, ModelArchive(tmaze_model()))
        tree = json.loads(path.read_text())
        tree["model"]["kind"] = "mystery-layer"
        path.write_text(json.dumps(tree))
        with pytest.raises(DataError):
            load_archive(path)

    def test_missing_file_and_bad_model(self, tmp_path):
        with pytest.raises(DataError):
            load_archive(tmp_path / "absent.json")
        with pytest.raises(DataError):
            ModelArchive(3.5)
        with pytest.raises(DataError):
            ModelArchive(tmaze_model(), depth=(1, 1))


class TestDatasets:
    def test_discrete_round_trip(self, tmp_path):
        path = tmp_path / "d.tsv"
        rng = stream(5, "data")
        seqs = [rng.integers(0, (4, 2), size=(t, 2)) for t in (6, 1, 9)]
        write_dataset(path, seqs, names=["sym", "flag"])
        out, meta = read_dataset(path)
        assert meta == {"kind": "discrete", "names": ("sym", "flag"), "sizes": (4, 2)}
        assert len(out) == 3
        for s, o in zip(seqs, out):
            assert_array_equal(s, o)

    def test_continuous_round_trip_exact(self, tmp_path):
        path = tmp_path / "d.tsv"
        vals = np.array([[1 / 3, -2.5e-17], [6.02e23, 1 + 2**-52], [0.1, -0.0]])
        write_dataset(path, [vals])
        out, meta = read_dataset(path)
        assert meta["kind"] == "continuous"
        assert meta["sizes"] == (2,)
        assert_array_equal(out[0], vals)

    def test_declared_sizes_override_inference(self, tmp_path):
        path = tmp_path / "d.tsv"
        write_dataset(path, [np.array([[0], [1]])], sizes=[5])
        _, meta = read_dataset(path)
        assert meta["sizes"] == (5,)

    def test_write_rejections(self, tmp_path):
        path = tmp_path / "d.tsv"
        with pytest.raises(DataError):
            write_dataset(path, [])
        with pytest.raises(DataError):
            write_dataset(path, [np.zeros((0, 2), dtype=int)])
        with pytest.raises(DataError):
            write_dataset(path, [np.array([[0.0, np.inf]])])
        with pytest.raises(DataError):
            write_dataset(path, [np.array([[-1]])])
        with pytest.raises(DataError):
            write_dataset(path, [np.array([[3]])], sizes=[3])
        with pytest.raises(DataError):
            write_dataset(path, [np.array([[0]])], names=["bad name"])

    def test_read_rejections(self, tmp_path):
        path = tmp_path / "d.tsv"
        path.write_text("")
        with pytest.raises(DataError):
            read_dataset(path)
        path.write_text("not-a-dataset\tv1\tdiscrete\tsizes=2\tnames=a\n0\n")
        with pytest.raises(DataError):
            read_dataset(path)
        # header only: zero timesteps
        path.write_text("worldblocks-dataset\tv1\tdiscrete\tsizes=2\tnames=a\n")
        with pytest.raises(DataError):
            read_dataset(path)
        # symbol outside the declared alphabet
        path.write_text("worldblocks-dataset\tv1\tdiscrete\tsizes=2\tnames=a\n2\n")
        with pytest.raises(DataError):
            read_dataset(path)
        # ragged row
        path.write_text("worldblocks-dataset\tv1\tdiscrete\tsizes=2,2\tnames=a,b\n0\t1\n0\n")
        with pytest.raises(DataError):
            read_dataset(path)
        # unparsable symbol
        path.write_text("worldblocks-dataset\tv1\tdiscrete\tsizes=2\tnames=a\nx\n")
        with pytest.raises(DataError):
            read_dataset(path)
        with pytest.raises(DataError):
            read_dataset(tmp_path / "absent.tsv")

    def test_file_digest_matches_hashlib(self, tmp_path):
        path = tmp_path / "blob.bin"
        payload = b"worldblocks digest check\n" * 7
        path.write_bytes(payload)
        assert file_digest(path) == hashlib.sha256(payload).hexdigest()
        with pytest.raises(DataError):
            file_digest(tmp_path / "absent.bin")
