import json

import numpy as np
import pytest

from opformer.container import ChecksumError, DescriptorError, TruncatedPayloadError, VersionError
from opformer.datasets import (IzhikevichDataConfig, LIFDataConfig, RiemannDataConfig, empty_dataset,
                               gen_izhikevich_dataset, gen_lif_dataset, gen_riemann_dataset, in_test_window,
                               load_dataset, save_dataset)


@pytest.fixture(scope="module")
def izh():
    return gen_izhikevich_dataset(IzhikevichDataConfig(n_train=60, n_test=12, n=101, substeps=10, seed=3))


@pytest.fixture(scope="module")
def lif1():
    return gen_lif_dataset(1, LIFDataConfig(n_train=12, n_test=4, n=64))


@pytest.fixture(scope="module")
def ipr():
    return gen_riemann_dataset("ipr", RiemannDataConfig(n_samples=40, n_train=30, n_x=64))


def assert_same(a, b):
    assert a.problem == b.problem
    assert a.normalizer == b.normalizer
    assert set(a.arrays) == set(b.arrays)
    for k in a.arrays:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k])
        assert a.arrays[k].tobytes() == b.arrays[k].tobytes()


class TestIzhikevich:
    def test_counts_and_shapes(self, izh):
        assert izh.count("train") == 60 and izh.count("test") == 12
        assert izh.get("train", "tokens").shape == (60, 101, 2)
        assert izh.get("test", "targets").shape == (12, 101, 1)

    def test_test_window_split(self, izh):
        t_train = izh.get("train", "params")[:, 1]
        t_test = izh.get("test", "params")[:, 1]
        assert not np.any(in_test_window(t_train))
        assert np.all(in_test_window(t_test))

    def test_forcing_token_matches_params(self, izh):
        tok, par = izh.get("train", "tokens")[5], izh.get("train", "params")[5]
        t, current = tok[:, 0], tok[:, 1]
        np.testing.assert_array_equal(current, np.where(t >= par[1], par[0], 0.0))


class TestLIF:
    def test_case_defaults(self):
        cfg = LIFDataConfig(case=1).resolved()
        assert (cfg.n_train, cfg.n_test, cfg.n) == (200, 20, 204)
        assert LIFDataConfig(case=3).resolved().sigma_range == (0.11, 2.0)
        with pytest.raises(ValueError):
            LIFDataConfig(case=4).resolved()

    def test_alpha_grid_and_tokens(self, lif1):
        alphas = np.sort(np.concatenate([lif1.get(s, "params")[:, 0] for s in ("train", "test")]))
        np.testing.assert_allclose(alphas, np.linspace(0.11, 0.99, 16), rtol=1e-15)
        assert lif1.token_names == ["t", "I", "alpha"]
        tok = lif1.get("train", "tokens")[0]
        np.testing.assert_array_equal(tok[:, 2], lif1.get("train", "params")[0, 0])
        np.testing.assert_array_equal(tok[:, 0], lif1.get("train", "queries")[0])

    def test_fixed_forcing_shared(self, lif1):
        cur = lif1.get("train", "tokens")[..., 1]
        assert np.all(cur == cur[0])

    def test_case3_tempered_tokens(self):
        ds = gen_lif_dataset(3, LIFDataConfig(n_train=4, n_test=2, n=40, n_forcings=3))
        assert ds.token_names == ["t", "I", "alpha", "sigma"]
        sig = ds.get("train", "params")[:, 1]
        assert np.all((sig >= 0.11) & (sig <= 2.0))


class TestRiemann:
    def test_spacing_and_split(self):
        ds = gen_riemann_dataset("ipr")
        assert ds.count("train") == 400 and ds.count("test") == 100
        p = np.sort(np.concatenate([ds.get(s, "params")[:, 0] for s in ("train", "test")]))
        np.testing.assert_allclose(np.diff(p), 50 / 499, rtol=1e-9)
        assert p[0] == 50.0 and p[-1] == 100.0

    def test_hpr_log_normalization(self):
        ds = gen_riemann_dataset("hpr", RiemannDataConfig(case="hpr", n_samples=20, n_train=15, n_x=32))
        assert ds.normalizer.token_log10 == [True]
        tok = ds.normalizer.tokens(ds.get("train", "tokens"))
        assert tok.min() == 0.0 and tok.max() == 1.0
        assert np.all(ds.get("train", "targets")[..., [0, 2]] > 0)

    def test_fields(self, ipr):
        assert ipr.field_names == ["rho", "u", "p"]
        assert ipr.get("train", "tokens").shape == (30, 1, 1)


class TestNormalization:
    @pytest.mark.parametrize("name", ["izh", "lif1", "ipr"])
    def test_training_extremes_map_to_unit_interval(self, name, request):
        ds = request.getfixturevalue(name)
        tok = ds.normalizer.tokens(ds.get("train", "tokens"))
        for j in range(tok.shape[-1]):
            col = tok[..., j]
            if ds.normalizer.token_max[j] > ds.normalizer.token_min[j]:
                assert col.min() == 0.0 and col.max() == 1.0
            else:
                assert np.all(col == 0.0)
        q = ds.normalizer.queries(ds.get("train", "queries"))
        assert q.min() == 0.0 and q.max() == 1.0

    def test_statistics_from_training_split_only(self, ipr):
        p_train = ipr.get("train", "params")[:, 0]
        assert ipr.normalizer.token_min == [p_train.min()]
        assert ipr.normalizer.token_max == [p_train.max()]

    def test_target_affine_inverts(self, ipr):
        raw = ipr.get("test", "targets")
        scale, offset = ipr.normalizer.target_affine()
        np.testing.assert_allclose(ipr.normalizer.targets(raw) * scale + offset, raw, rtol=1e-13, atol=1e-14)

    def test_select_fields(self, ipr):
        sub = ipr.select_fields(["p"])
        assert sub.field_names == ["p"]
        np.testing.assert_array_equal(sub.get("test", "targets")[..., 0], ipr.get("test", "targets")[..., 2])
        assert sub.normalizer.target_min == [ipr.normalizer.target_min[2]]
        assert ipr.output_channels == 3


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path, izh, ipr):
        for ds in (izh, ipr):
            path = save_dataset(tmp_path / ds.problem, ds)
            assert_same(ds, load_dataset(path))

    def test_regeneration_is_bit_identical(self, lif1):
        again = gen_lif_dataset(1, LIFDataConfig(n_train=12, n_test=4, n=64))
        assert_same(lif1, again)

    def test_seed_changes_split(self):
        a = gen_riemann_dataset("ipr", RiemannDataConfig(n_samples=20, n_train=15, n_x=16, seed=0))
        b = gen_riemann_dataset("ipr", RiemannDataConfig(n_samples=20, n_train=15, n_x=16, seed=1))
        assert not np.array_equal(a.get("test", "params"), b.get("test", "params"))

    def test_checksum_mismatch(self, tmp_path, ipr):
        path = save_dataset(tmp_path / "d", ipr)
        raw = bytearray((path / "payload.bin").read_bytes())
        raw[100] ^= 0x01
        (path / "payload.bin").write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_dataset(path)

    def test_truncated_payload(self, tmp_path, ipr):
        path = save_dataset(tmp_path / "d", ipr)
        raw = (path / "payload.bin").read_bytes()
        (path / "payload.bin").write_bytes(raw[:-8])
        with pytest.raises(TruncatedPayloadError):
            load_dataset(path)

    def test_version_mismatch(self, tmp_path, ipr):
        path = save_dataset(tmp_path / "d", ipr)
        manifest = json.loads((path / "manifest.json").read_text())
        manifest["version"] = 99
        (path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(VersionError, match="99"):
            load_dataset(path)

    def test_bad_descriptor(self, tmp_path, ipr):
        path = save_dataset(tmp_path / "d", ipr)
        manifest = json.loads((path / "manifest.json").read_text())
        manifest["tensors"][0]["offset"] = 8
        (path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DescriptorError):
            load_dataset(path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nowhere")

    def test_empty_dataset_round_trip(self, tmp_path):
        ds = empty_dataset(input_channels=2, output_channels=3, n=4, m=5)
        assert ds.count("train") == 0 and ds.normalizer is None
        back = load_dataset(save_dataset(tmp_path / "e", ds))
        assert back.get("test", "targets").shape == (0, 5, 3)
        with pytest.raises(ValueError):
            back.normalized("train")
