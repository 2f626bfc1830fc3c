import numpy as np
import pytest
import torch

from texrefine import features
from texrefine.errors import ConfigError, MissingArtifactError
from texrefine.features import FeatureStack, HypercolumnSet


class TestChannelBudget:
    def test_default_selection_totals_2179(self):
        assert features.total_channels(features.DEFAULT_LAYERS) == 2179

    def test_stack_total_channels(self, extractor):
        stack = extractor.extract(torch.rand(256, 256, 3, dtype=torch.float64))
        assert stack.total_channels == 2179
        assert len(stack.layer_ids) == 10  # rgb base + 9 conv sub-layers

    def test_level_sizes_non_increasing(self, extractor):
        stack = extractor.extract(torch.rand(64, 64, 3, dtype=torch.float64))
        sizes = [lv.shape[1] for lv in stack.levels]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))

    def test_unknown_layer_rejected(self):
        with pytest.raises(ConfigError):
            features.total_channels(("rgb", "relu9_9"))


class TestExtract:
    def test_determinism(self, extractor):
        img = torch.rand(64, 64, 3, dtype=torch.float64)
        s1 = extractor.extract(img)
        s2 = extractor.extract(img.clone())
        assert all(torch.equal(a, b) for a, b in zip(s1.levels, s2.levels))

    def test_small_perturbation_small_change(self, extractor):
        torch.manual_seed(1)
        img = torch.rand(64, 64, 3, dtype=torch.float64)
        s1 = extractor.extract(img)
        s2 = extractor.extract(img + 1e-6)
        worst = max((a - b).abs().max().item() for a, b in zip(s1.levels, s2.levels))
        assert worst < 1e-3

    def test_min_side_enforced(self, extractor):
        with pytest.raises(ConfigError, match="below minimum"):
            extractor.extract(torch.rand(32, 32, 3))

    def test_missing_weights_error_names_path_and_checksum(self, tmp_path):
        missing = tmp_path / "nope.pt"
        with pytest.raises(MissingArtifactError) as err:
            features.FeatureExtractor.from_bundle(missing)
        assert str(missing) in str(err.value)
        assert features.UPSTREAM_SHA256_PREFIX in str(err.value)

    def test_unconfigured_weights_error(self, monkeypatch):
        monkeypatch.delenv(features.WEIGHTS_ENV_VAR, raising=False)
        with pytest.raises(MissingArtifactError, match=features.WEIGHTS_ENV_VAR):
            features.resolve_weights_path(None)

    def test_env_var_resolution(self, monkeypatch, weights_path):
        monkeypatch.setenv(features.WEIGHTS_ENV_VAR, str(weights_path))
        assert features.resolve_weights_path(None) == weights_path

    def test_gradient_flows_to_image(self, weights_path):
        ex = features.FeatureExtractor.from_bundle(weights_path, layers=features.REDUCED_LAYERS)
        ex.module.double()
        torch.manual_seed(0)
        img = torch.rand(64, 64, 3, dtype=torch.float64, requires_grad=True)
        pts = np.array([[20.3, 17.8], [40.1, 45.6], [33.3, 9.2]])
        hc = features.sample_hypercolumns(ex.extract(img), pts)
        loss = (hc.vectors**2).sum()
        loss.backward()
        g = img.grad
        assert g is not None and g.abs().max() > 0

        # finite-difference spot check at 3 random interior pixels
        rng = np.random.Generator(np.random.PCG64(2))
        h = 1e-4
        checked = 0
        for _ in range(6):
            i, j, c = rng.integers(8, 56), rng.integers(8, 56), rng.integers(0, 3)
            if abs(g[i, j, c].item()) < 1e-4:
                continue  # stay away from dead/kinked activations
            with torch.no_grad():
                ip = img.detach().clone()
                im = img.detach().clone()
                ip[i, j, c] += h
                im[i, j, c] -= h
            fp = (features.sample_hypercolumns(ex.extract(ip), pts).vectors ** 2).sum()
            fm = (features.sample_hypercolumns(ex.extract(im), pts).vectors ** 2).sum()
            fd = (fp - fm).item() / (2 * h)
            rel = abs(fd - g[i, j, c].item()) / max(abs(fd), 1e-9)
            assert rel < 5e-2
            checked += 1
            if checked == 3:
                break
        assert checked >= 1


def _ramp_stack():
    """Single level with a linear ramp, so bilinear interpolation is exact."""
    h = w = 16
    ramp = torch.arange(w, dtype=torch.float64).repeat(h, 1)
    level = torch.stack([ramp, 2 * ramp])  # (2, 16, 16)
    return FeatureStack(levels=[level], layer_ids=("ramp",), image_size=(w, h))


class TestSampling:
    def test_grid_node_exact(self, extractor):
        img = torch.rand(64, 64, 3, dtype=torch.float64)
        stack = extractor.extract(img)
        pts = np.array([[10.5, 20.5]])  # center of pixel (20, 10)
        hc = features.sample_hypercolumns(stack, pts)
        assert torch.allclose(hc.vectors[0, :3], img[20, 10].to(hc.vectors.dtype))

    def test_same_point_identical_rows(self, extractor):
        img = torch.rand(64, 64, 3, dtype=torch.float64)
        stack = extractor.extract(img)
        hc = features.sample_hypercolumns(stack, np.array([[31.2, 17.9], [31.2, 17.9]]))
        assert torch.equal(hc.vectors[0], hc.vectors[1])

    def test_midpoint_is_mean_on_linear_ramp(self):
        stack = _ramp_stack()
        # node centers x = 3.5 and 4.5 hold values 3 and 4; midpoint x = 4.0
        hc = features.sample_hypercolumns(stack, np.array([[4.0, 8.5]]))
        assert torch.allclose(hc.vectors[0], torch.tensor([3.5, 7.0], dtype=torch.float64))

    def test_out_of_bounds_rejected(self):
        stack = _ramp_stack()
        with pytest.raises(ConfigError, match="indices \\[1\\]"):
            features.sample_hypercolumns(stack, np.array([[4.0, 4.0], [99.0, 4.0]]))

    def test_block_permutation(self, weights_path):
        a = features.FeatureExtractor.from_bundle(weights_path, layers=("rgb", "relu1_1"))
        b = features.FeatureExtractor.from_bundle(weights_path, layers=("relu1_1", "rgb"))
        img = torch.rand(64, 64, 3, dtype=torch.float64)
        pts = np.array([[10.0, 12.0], [50.5, 33.2]])
        va = features.sample_hypercolumns(a.extract(img), pts).vectors
        vb = features.sample_hypercolumns(b.extract(img), pts).vectors
        assert torch.allclose(va[:, :3], vb[:, 64:])
        assert torch.allclose(va[:, 3:], vb[:, :64])


class TestDrawPoints:
    def test_single_valid_pixel(self):
        mask = np.zeros((16, 16), bool)
        mask[3, 9] = True
        pts = features.draw_points(mask, 25, rng_seed=1)
        assert ((pts[:, 0] >= 9) & (pts[:, 0] < 10)).all()
        assert ((pts[:, 1] >= 3) & (pts[:, 1] < 4)).all()

    def test_seeded_reproducible(self):
        mask = np.ones((20, 20), bool)
        a = features.draw_points(mask, 100, rng_seed=7)
        b = features.draw_points(mask, 100, rng_seed=7)
        assert np.array_equal(a, b)

    def test_quadrant_density_uniform(self):
        pts = features.draw_points(np.ones((64, 64), bool), 10000, rng_seed=11)
        qx = (pts[:, 0] >= 32).astype(int)
        qy = (pts[:, 1] >= 32).astype(int)
        counts = np.bincount(qy * 2 + qx, minlength=4)
        assert np.all(np.abs(counts / 10000 - 0.25) < 0.05 * 0.25 + 0.02)

    def test_empty_mask_errors(self):
        with pytest.raises(ConfigError, match="empty mask"):
            features.draw_points(np.zeros((8, 8), bool), 4, rng_seed=0)

    def test_points_respect_mask(self):
        rng = np.random.Generator(np.random.PCG64(3))
        mask = rng.random((32, 32)) > 0.7
        pts = features.draw_points(mask, 500, rng_seed=5)
        cols = pts[:, 0].astype(int)
        rows = pts[:, 1].astype(int)
        assert mask[rows, cols].all()


class TestMatching:
    def _hc(self, vectors):
        v = torch.as_tensor(np.asarray(vectors, dtype=np.float64))
        return HypercolumnSet(points=np.zeros((v.shape[0], 2)), vectors=v)

    def test_identity_permutation(self, extractor):
        img = torch.rand(64, 64, 3, dtype=torch.float64)
        stack = extractor.extract(img)
        pts = features.draw_points(None, 30, rng_seed=2, shape=(64, 64))
        hc = features.sample_hypercolumns(stack, pts)
        assert np.array_equal(features.match_points(hc, hc), np.arange(30))

    def test_exact_pair_matches(self):
        style = self._hc([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        output = self._hc([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        matched = features.match_points(style, output)
        assert matched[0] == 1

    def test_brute_force_oracle_20x20(self):
        rng = np.random.Generator(np.random.PCG64(13))
        S = rng.standard_normal((20, 8))
        O = rng.standard_normal((20, 8))
        got = features.match_points(self._hc(S), self._hc(O))

        def cosd(a, b):
            return 1 - a @ b / max(np.linalg.norm(a), 1e-8) / max(np.linalg.norm(b), 1e-8)

        for i in range(20):
            costs = [cosd(S[i], O[j]) for j in range(20)]
            assert got[i] == int(np.argmin(costs))

    def test_scale_invariance(self):
        rng = np.random.Generator(np.random.PCG64(17))
        S = rng.standard_normal((12, 5))
        O = rng.standard_normal((15, 5))
        scales_s = rng.random(12)[:, None] * 5 + 0.1
        scales_o = rng.random(15)[:, None] * 5 + 0.1
        a = features.match_points(self._hc(S), self._hc(O))
        b = features.match_points(self._hc(S * scales_s), self._hc(O * scales_o))
        assert np.array_equal(a, b)


class TestBundles:
    def test_untrained_bundle_reproducible(self, tmp_path):
        c1 = features.make_untrained_bundle(tmp_path / "a.pt", seed=3)
        c2 = features.make_untrained_bundle(tmp_path / "b.pt", seed=3)
        assert c1 == c2

    def test_bundle_checksum_recorded(self, weights_path):
        ex = features.FeatureExtractor.from_bundle(weights_path)
        assert ex.checksum == features.file_sha256(weights_path)

    def test_bad_format_rejected(self, tmp_path):
        path = tmp_path / "junk.pt"
        torch.save({"format": "other"}, path)
        with pytest.raises(ConfigError, match="bundle"):
            features.FeatureExtractor.from_bundle(path)
