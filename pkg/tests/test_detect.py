import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmsacl.detect import (
    AnomalyScoreMap,
    IGDTrainCfg,
    PatchGrid,
    extract_patch_features,
    igd_fit,
    igd_score,
    load_igd,
    load_patch_model,
    msssim,
    msssim_batch,
    padim_fit,
    padim_score,
    padim_score_batch,
    reconstruction_loss,
    save_igd,
    save_patch_model,
)
from pmsacl.errors import ConfigError, NumericError
from pmsacl.losses import ClassCentres, LossSwitches, TemperatureSchedule
from pmsacl.medmix import AugConfig
from pmsacl.network import EncoderCfg, EncoderNet, TrainCfg, pretrain
from pmsacl.numerics import RngStream


def random_grids(rng, n=6, hw=4, d=3):
    return [PatchGrid(rng.child("g", i).normal((hw, hw, d)), (16, 16)) for i in range(n)]


class TestPatchFeatures:
    def test_concatenated_dimension(self, rng):
        net = EncoderNet(EncoderCfg(), RngStream(1, "init"))
        imgs = rng.uniform((2, 64, 64, 3)).astype(np.float32)
        grids = extract_patch_features(net, imgs)
        assert len(grids) == 2
        assert grids[0].features.shape == (16, 16, 96)  # 32 + 64 channels

    def test_zero_encoder_zero_features(self, rng):
        net = EncoderNet(EncoderCfg(), RngStream(1, "init"))
        for _, layer in net.blocks.named_layers:
            for key in layer.params:
                layer.params[key][:] = 0.0
        grids = extract_patch_features(net, rng.uniform((1, 64, 64, 3)).astype(np.float32))
        assert np.all(grids[0].features == 0.0)

    def test_deterministic(self, rng):
        net = EncoderNet(EncoderCfg(), RngStream(1, "init"))
        imgs = rng.uniform((1, 64, 64, 3)).astype(np.float32)
        a = extract_patch_features(net, imgs)[0].features
        b = extract_patch_features(net, imgs)[0].features
        assert np.array_equal(a, b)


class TestPadim:
    def test_identical_features_give_eps_identity_cov(self, rng):
        feat = rng.normal((2, 2, 3))
        grids = [PatchGrid(feat.copy(), (16, 16)) for _ in range(5)]
        model = padim_fit(grids, eps=0.01)
        assert np.allclose(model.mean[0], feat.reshape(4, 3)[0], atol=1e-12)
        cov = model.chol[0] @ model.chol[0].T
        assert np.allclose(cov, 0.01 * np.eye(3), atol=1e-10)

    def test_two_point_covariance_identity(self):
        u = np.array([1.0, 2.0])
        v = np.array([3.0, -1.0])
        grids = [PatchGrid(u.reshape(1, 1, 2), (4, 4)), PatchGrid(v.reshape(1, 1, 2), (4, 4))]
        model = padim_fit(grids, eps=0.0)
        s = model.feature_scale
        assert np.allclose(model.mean[0] * s, (u + v) / 2)
        d = (u - v) / 2
        expected = 2.0 * np.outer(d, d) / s**2  # unbiased, in standardised units
        cov = model.chol[0] @ model.chol[0].T
        assert np.allclose(cov, expected, atol=1e-10)

    def test_against_direct_covariance_oracle(self, rng):
        grids = random_grids(rng, n=5, hw=2, d=3)
        model = padim_fit(grids, eps=0.02)
        stack = np.stack([g.features for g in grids]).reshape(5, 4, 3)
        s = float(np.std(stack.reshape(5, -1) - stack.reshape(5, -1).mean(axis=0)))
        assert model.feature_scale == pytest.approx(s, abs=1e-12)
        stack = stack / s
        for p in range(4):
            mu = stack[:, p].mean(axis=0)
            centred = stack[:, p] - mu
            cov = centred.T @ centred / 4 + 0.02 * np.eye(3)
            ours = model.chol[p] @ model.chol[p].T
            assert np.allclose(ours, cov, atol=1e-10)

    def test_needs_two_samples(self, rng):
        with pytest.raises(NumericError):
            padim_fit(random_grids(rng, n=1))

    def test_score_zero_at_mean(self, rng):
        grids = random_grids(rng, n=6, hw=2, d=3)
        model = padim_fit(grids, eps=0.01)
        mean_grid = PatchGrid(model.mean.reshape(2, 2, 3) * model.feature_scale, (16, 16))
        result = padim_score(model, mean_grid)
        assert result.image_score == pytest.approx(0.0, abs=1e-9)

    def test_identity_covariance_is_euclidean(self, rng):
        feat = rng.normal((1, 1, 4))
        grids = [PatchGrid(feat.copy(), (8, 8)) for _ in range(3)]
        model = padim_fit(grids, eps=1.0)  # cov = I exactly (identical samples)
        probe = PatchGrid(feat + np.array([1.0, 2.0, 2.0, 4.0]).reshape(1, 1, 4), (8, 8))
        result = padim_score(model, probe)
        assert result.image_score == pytest.approx(5.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_solve_oracle(self, seed):
        rng = RngStream(seed, "oracle")
        grids = random_grids(rng, n=8, hw=2, d=5)
        model = padim_fit(grids, eps=0.05)
        probe = random_grids(rng.child("probe"), n=1, hw=2, d=5)[0]
        result = padim_score(model, probe)
        stack = np.stack([g.features for g in grids]).reshape(8, 4, 5)
        stack = stack / model.feature_scale
        for p in range(4):
            mu = stack[:, p].mean(axis=0)
            centred = stack[:, p] - mu
            cov = centred.T @ centred / 7 + 0.05 * np.eye(5)
            v = probe.features.reshape(4, 5)[p] / model.feature_scale - mu
            direct = np.sqrt(v @ np.linalg.solve(cov, v))
            assert result.position_scores.reshape(-1)[p] == pytest.approx(direct, abs=1e-8)

    def test_rotation_invariance(self, rng):
        from scipy.stats import ortho_group

        grids = random_grids(rng, n=10, hw=1, d=4)
        probe = random_grids(rng.child("p"), n=1, hw=1, d=4)[0]
        base = padim_score(padim_fit(grids, eps=0.01), probe).image_score
        rot = ortho_group.rvs(4, random_state=7)
        rot_grids = [PatchGrid(g.features @ rot.T, g.image_hw) for g in grids]
        rot_probe = PatchGrid(probe.features @ rot.T, probe.image_hw)
        rotated = padim_score(padim_fit(rot_grids, eps=0.01), rot_probe).image_score
        assert rotated == pytest.approx(base, abs=1e-8)

    def test_scores_finite_nonnegative_and_map_upsampled(self, rng):
        grids = random_grids(rng, n=6, hw=4, d=3)
        model = padim_fit(grids, eps=0.01)
        result = padim_score(model, random_grids(rng.child("x"), n=1, hw=4, d=3)[0])
        assert np.all(np.isfinite(result.position_scores))
        assert np.all(result.position_scores >= 0.0)
        assert result.pixel_scores.shape == (16, 16)
        assert result.image_score == result.position_scores.max()

    def test_scoring_does_not_mutate_model(self, rng, tmp_path):
        grids = random_grids(rng, n=6, hw=2, d=3)
        model = padim_fit(grids, eps=0.01)
        save_patch_model(tmp_path / "a.pmdm", model)
        before = (tmp_path / "a.pmdm").read_bytes()
        padim_score_batch(model, random_grids(rng.child("y"), n=3, hw=2, d=3))
        save_patch_model(tmp_path / "b.pmdm", model)
        assert (tmp_path / "b.pmdm").read_bytes() == before

    def test_model_roundtrip(self, rng, tmp_path):
        grids = random_grids(rng, n=6, hw=2, d=3)
        model = padim_fit(grids, eps=0.01)
        save_patch_model(tmp_path / "m.pmdm", model)
        loaded = load_patch_model(tmp_path / "m.pmdm")
        probe = random_grids(rng.child("probe"), n=1, hw=2, d=3)[0]
        assert padim_score(loaded, probe).image_score == pytest.approx(
            padim_score(model, probe).image_score, abs=1e-12)

    def test_channel_subset(self, rng):
        grids = random_grids(rng, n=6, hw=2, d=8)
        model = padim_fit(grids, eps=0.01, subset_size=4, rng=RngStream(5, "sub"))
        assert model.mean.shape[1] == 4
        assert sorted(model.subset) == list(model.subset)
        result = padim_score(model, random_grids(rng.child("x"), n=1, hw=2, d=8)[0])
        assert np.all(np.isfinite(result.position_scores))

    def test_dimension_mismatch(self, rng):
        model = padim_fit(random_grids(rng, n=4, hw=2, d=3))
        with pytest.raises(ConfigError):
            padim_score(model, random_grids(rng.child("bad"), n=1, hw=3, d=3)[0])


class TestMsssim:
    def test_self_similarity_is_one(self, rng):
        x = rng.uniform((48, 48, 3))
        assert msssim(x, x, scales=2) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_high_contrast_low_score(self, rng):
        x = rng.uniform((48, 48, 1))
        # measured 0.0 for inverted input; anything above 0.2 would mean the
        # contrast-structure term stopped penalising anti-correlation
        assert msssim(x, 1.0 - x, scales=2) < 0.2

    def test_symmetry(self, rng):
        x = rng.uniform((48, 48, 3))
        y = np.clip(x + rng.normal(x.shape) * 0.1, 0, 1)
        assert msssim(x, y, scales=2) == pytest.approx(msssim(y, x, scales=2), abs=1e-12)

    def test_identity_iff_one(self, rng):
        x = rng.uniform((48, 48, 1))
        y = x.copy()
        y[10, 10, 0] = min(1.0, y[10, 10, 0] + 0.4)
        assert msssim(x, y, scales=2) < 1.0 - 1e-9

    def test_monotone_under_growing_noise(self, rng):
        x = rng.uniform((64, 64, 3))
        eta = rng.normal(x.shape)
        values = [msssim(x, np.clip(x + s * eta, 0, 1), scales=3)
                  for s in (0.0, 0.03, 0.08, 0.15, 0.3)]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_too_small_for_scale_count(self, rng):
        x = rng.uniform((20, 20, 1))
        with pytest.raises(ConfigError, match="too small"):
            msssim(x, x, scales=3)

    def test_batch_matches_single(self, rng):
        x = rng.uniform((2, 48, 48, 3))
        y = np.clip(x + rng.normal(x.shape) * 0.05, 0, 1)
        vals, _ = msssim_batch(x, y, scales=2)
        assert vals[0] == pytest.approx(msssim(x[0], y[0], scales=2), abs=1e-12)
        assert vals[1] == pytest.approx(msssim(x[1], y[1], scales=2), abs=1e-12)


class TestReconstructionLoss:
    def test_perfect_reconstruction_zero(self, rng):
        x = rng.uniform((1, 64, 64, 1))
        patches = rng.uniform((2, 32, 32, 1))
        value, _, _ = reconstruction_loss(x, x.copy(), patches, patches.copy())
        assert value == pytest.approx(0.0, abs=1e-9)

    def test_rho_one_is_pure_mae(self, rng):
        x = rng.uniform((1, 64, 64, 1))
        y = np.clip(x + rng.normal(x.shape) * 0.1, 0, 1)
        value, _, _ = reconstruction_loss(x, y, None, None, rho=1.0)
        assert value == pytest.approx(float(np.mean(np.abs(x - y))), abs=1e-12)

    def test_without_patches_blend_collapses_to_global(self, rng):
        x = rng.uniform((1, 64, 64, 1))
        y = np.clip(x + rng.normal(x.shape) * 0.05, 0, 1)
        v_no_local, _, _ = reconstruction_loss(x, y, None, None, rho=0.0, nu=0.3)
        m = msssim(x[0], y[0], scales=3)
        assert v_no_local == pytest.approx(1.0 - m, abs=1e-12)


def _pretrained_tiny(rng, size=32):
    data = [(f"t{i}", rng.child("d", i).uniform((size, size, 3)).astype(np.float32)) for i in range(8)]
    cfg = EncoderCfg(channels=(4, 6), embed_dim=8)
    ckpt = pretrain(data, AugConfig(n_classes=3, patch_min=0.25, patch_max=0.4),
                    LossSwitches(), TemperatureSchedule(), cfg,
                    TrainCfg(batch_size=4, epochs=1), rng.child("pre"))
    return data, ckpt


class TestIGD:
    def test_fit_and_head_estimators(self, rng):
        data, ckpt = _pretrained_tiny(rng)
        cfg = IGDTrainCfg(epochs=1, batch_size=4, patch_side=16,
                          scales_global=2, scales_local=1, kappa_reg=1.0)
        model = igd_fit(ckpt, data, cfg, RngStream(4, "igd"))
        assert model.trained
        assert model.global_path.sigma2 > 0
        # kappa_reg = 1 and the definition of sigma2 as mean squared distance
        images = np.stack([img for _, img in data]).astype(np.float32)
        z = model.global_path.encoder.encode(images).astype(np.float64)
        mu = z.mean(axis=0)
        expected = float(np.mean(np.sum((z - mu) ** 2, axis=1)))
        assert model.global_path.sigma2 == pytest.approx(expected, rel=1e-6)

    def test_two_point_sigma_formula(self):
        # sigma^2 = (kappa/|D|) sum ||z - mu||^2 for two embeddings u, v
        u = np.array([1.0, 0.0])
        v = np.array([3.0, 2.0])
        mu = (u + v) / 2
        expected = 0.5 * (np.sum((u - mu) ** 2) + np.sum((v - mu) ** 2))
        from pmsacl.detect import _estimate_gaussian_head

        class FakeEnc:
            def encode(self, imgs, batch=64):
                return np.stack([u, v])

        mu_est, s2 = _estimate_gaussian_head(FakeEnc(), np.zeros((2, 4, 4, 3)), kappa_reg=1.0)
        assert np.allclose(mu_est, mu)
        assert s2 == pytest.approx(expected)

    def test_single_point_floors_sigma(self):
        from pmsacl.detect import SIGMA2_FLOOR, _estimate_gaussian_head

        class FakeEnc:
            def encode(self, imgs, batch=64):
                return np.ones((1, 3))

        mu, s2 = _estimate_gaussian_head(FakeEnc(), np.zeros((1, 4, 4, 3)), kappa_reg=1.0)
        assert np.allclose(mu, 1.0)
        assert s2 == SIGMA2_FLOOR

    def test_training_reduces_reconstruction(self, rng):
        # ten epochs at the recipe defaults; median final-vs-initial over 3 seeds
        data, ckpt = _pretrained_tiny(rng)
        cfg = IGDTrainCfg(epochs=10, batch_size=4, patch_side=16,
                          scales_global=2, scales_local=1)
        deltas = []
        for seed in (4, 5, 6):
            model = igd_fit(ckpt, data, cfg, RngStream(seed, "igd"))
            rec = model.curves["rec"]
            deltas.append(rec[-1] - rec[0])
        assert np.median(deltas) < 0.0

    def test_score_components(self, rng):
        data, ckpt = _pretrained_tiny(rng)
        cfg = IGDTrainCfg(epochs=1, batch_size=4, patch_side=16,
                          scales_global=2, scales_local=1)
        model = igd_fit(ckpt, data, cfg, RngStream(4, "igd"))
        score, smap = igd_score(model, data[0][1])
        assert np.isfinite(score)
        assert smap.pixel_scores.shape == (32, 32)
        assert smap.position_scores.shape == (2, 2)

    def test_xi_one_is_pure_reconstruction(self, rng):
        data, ckpt = _pretrained_tiny(rng)
        cfg = IGDTrainCfg(epochs=1, batch_size=4, patch_side=16, xi=1.0,
                          scales_global=2, scales_local=1)
        model = igd_fit(ckpt, data, cfg, RngStream(4, "igd"))
        x = data[0][1]
        score, _ = igd_score(model, x)
        z, xh = model.global_path.reconstruct(x[None].astype(np.float32))
        mae = float(np.mean(np.abs(x[None] - xh)))
        m_g = msssim(x, xh[0], model.scales_global)
        tiles = np.stack([x[:16, :16], x[:16, 16:], x[16:, :16], x[16:, 16:]]).astype(np.float32)
        _, th = model.local_path.reconstruct(tiles)
        m_l = float(msssim_batch(tiles, th, model.scales_local)[0].mean())
        expected = model.rho * mae + (1 - model.rho) * (1 - (model.nu * m_g + (1 - model.nu) * m_l))
        assert score == pytest.approx(expected, rel=1e-6)

    def test_gaussian_distance_score_arithmetic(self, rng):
        data, ckpt = _pretrained_tiny(rng)
        cfg = IGDTrainCfg(epochs=0, batch_size=4, patch_side=16, xi=0.0,
                          scales_global=2, scales_local=1)
        model = igd_fit(ckpt, data, cfg, RngStream(4, "igd"))
        # place the embedding exactly at distance sqrt(sigma2): exp term = 1/e
        h = model.global_path.gaussian_score(
            (model.global_path.mu + np.sqrt(model.global_path.sigma2) *
             np.eye(len(model.global_path.mu))[0])[None])
        assert h[0] == pytest.approx(1.0 - np.exp(-1.0), abs=1e-9)

    def test_literal_direction_flag(self, rng):
        data, ckpt = _pretrained_tiny(rng)
        cfg = IGDTrainCfg(epochs=0, batch_size=4, patch_side=16, xi=0.0,
                          scales_global=2, scales_local=1)
        model = igd_fit(ckpt, data, cfg, RngStream(4, "igd"))
        score_h, _ = igd_score(model, data[0][1])
        model.literal_score_direction = True
        score_lit, _ = igd_score(model, data[0][1])
        assert score_h == pytest.approx(1.0 - score_lit, abs=1e-7)

    def test_untrained_model_refuses(self, rng):
        data, ckpt = _pretrained_tiny(rng)
        cfg = IGDTrainCfg(epochs=0, batch_size=4, patch_side=16,
                          scales_global=2, scales_local=1)
        model = igd_fit(ckpt, data, cfg, RngStream(4, "igd"))
        model.trained = False
        with pytest.raises(NumericError):
            igd_score(model, data[0][1])

    def test_igd_roundtrip(self, rng, tmp_path):
        data, ckpt = _pretrained_tiny(rng)
        cfg = IGDTrainCfg(epochs=1, batch_size=4, patch_side=16,
                          scales_global=2, scales_local=1)
        model = igd_fit(ckpt, data, cfg, RngStream(4, "igd"))
        save_igd(tmp_path / "igd.pmck", model)
        loaded = load_igd(tmp_path / "igd.pmck")
        s1, _ = igd_score(model, data[0][1])
        s2, _ = igd_score(loaded, data[0][1])
        assert s1 == pytest.approx(s2, abs=1e-9)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_mahalanobis_dense_solve_property(seed):
    rng = RngStream(seed, "mh")
    d = 2 + int(rng.integers(0, 7))
    n = d + 2 + int(rng.integers(0, 6))
    grids = [PatchGrid(rng.child("g", i).normal((1, 1, d)), (4, 4)) for i in range(n)]
    model = padim_fit(grids, eps=0.05)
    probe = PatchGrid(rng.child("probe").normal((1, 1, d)), (4, 4))
    ours = padim_score(model, probe).image_score
    stack = np.stack([g.features for g in grids]).reshape(n, d) / model.feature_scale
    mu = stack.mean(axis=0)
    centred = stack - mu
    cov = centred.T @ centred / (n - 1) + 0.05 * np.eye(d)
    v = probe.features.reshape(d) / model.feature_scale - mu
    assert ours == pytest.approx(float(np.sqrt(v @ np.linalg.solve(cov, v))), abs=1e-8)
