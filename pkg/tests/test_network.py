import numpy as np
import pytest

from pmsacl.errors import ConfigError, NumericError
from pmsacl.losses import ClassCentres, LossSwitches, TemperatureSchedule
from pmsacl.medmix import AugConfig
from pmsacl.network import (
    Checkpoint,
    DecoderNet,
    EncoderCfg,
    EncoderNet,
    HeadNets,
    Linear,
    SgdMomentum,
    TrainCfg,
    clip_gradients,
    encoder_from_checkpoint,
    load_checkpoint,
    pretrain,
    sample_patch_pair,
    save_checkpoint,
)
from pmsacl.numerics import RngStream, finite_diff_grad, max_relative_error

TINY = EncoderCfg(channels=(4, 6), embed_dim=8)


def tiny_dataset(rng, n=6, size=16):
    return [(f"d{i}", rng.child("img", i).uniform((size, size, 3)).astype(np.float32)) for i in range(n)]


def fast_cfg(epochs=2):
    return TrainCfg(batch_size=4, lr=0.01, momentum=0.9, epochs=epochs)


def fast_aug():
    return AugConfig(n_classes=3, patch_min=0.25, patch_max=0.4)


class TestEncoder:
    def test_deterministic_forward(self, rng):
        net = EncoderNet(TINY, RngStream(1, "init"))
        img = rng.uniform((2, 16, 16, 3)).astype(np.float32)
        a = net.forward(img)
        net.release_caches()
        b = net.forward(img)
        assert np.array_equal(a, b)
        assert a.shape == (2, 8)

    def test_zero_projection_gives_zero_embedding(self, rng):
        net = EncoderNet(TINY, RngStream(1, "init"))
        final: Linear = net.proj.named_layers[-1][1]
        final.params["w"][:] = 0.0
        final.params["b"][:] = 0.0
        out = net.forward(rng.uniform((3, 16, 16, 3)).astype(np.float32))
        assert np.all(out == 0.0)

    def test_embedding_finite_and_shaped(self, rng):
        net = EncoderNet(EncoderCfg(), RngStream(2, "init"))
        out = net.forward(rng.uniform((1, 64, 64, 3)).astype(np.float32))
        assert out.shape == (1, 128)
        assert np.all(np.isfinite(out))

    def test_feature_maps_align_by_integer_stride(self, rng):
        net = EncoderNet(EncoderCfg(), RngStream(2, "init"))
        net.forward(rng.uniform((1, 64, 64, 3)).astype(np.float32))
        shapes = [m.shape[1] for m in net.feature_maps]
        assert shapes == [32, 16, 8]
        assert shapes[-2] % shapes[-1] == 0

    def test_shape_mismatch_raises(self, rng):
        net = EncoderNet(TINY, RngStream(1, "init"))
        with pytest.raises(ConfigError):
            net.forward(rng.uniform((2, 16, 16)))


class TestBackward:
    def test_zero_output_gradient_gives_zero_param_gradients(self, rng):
        net = EncoderNet(TINY, RngStream(3, "init"), dtype=np.float64)
        z = net.forward(rng.uniform((2, 16, 16, 3)))
        net.zero_grads()
        net.backward(np.zeros_like(z))
        assert all(np.all(g == 0.0) for g in net.gradients().values())

    def test_affine_layer_closed_form(self, rng):
        layer = Linear(4, 3, RngStream(5, "init"), dtype=np.float64)
        x = rng.normal((6, 4))
        dout = rng.normal((6, 3))
        layer.zero_grads()
        layer.forward(x)
        dx = layer.backward(dout)
        assert np.allclose(layer.grads["w"], x.T @ dout, atol=1e-12)
        assert np.allclose(layer.grads["b"], dout.sum(axis=0), atol=1e-12)
        assert np.allclose(dx, dout @ layer.params["w"].T, atol=1e-12)

    def test_backward_without_forward(self, rng):
        layer = Linear(4, 3, RngStream(5, "init"))
        with pytest.raises(NumericError, match="without a matching forward"):
            layer.backward(rng.normal((2, 3)))

    def test_full_network_parameter_gradients_vs_fd(self, rng):
        net = EncoderNet(TINY, RngStream(7, "init"), dtype=np.float64)
        x = rng.uniform((2, 8, 8, 3))
        weight = rng.normal((2, 8))

        def loss():
            z = net.forward(x)
            net.release_caches()
            return float(np.sum(z * weight))

        net.zero_grads()
        net.forward(x)
        net.backward(weight.copy())
        grads = net.gradients()
        params = net.parameters()
        worst = 0.0
        pick = RngStream(8, "pick")
        for name, g in grads.items():
            flat = params[name].reshape(-1)
            for idx in np.asarray(pick.integers(0, flat.size, 3)):
                orig = flat[idx]
                flat[idx] = orig + 1e-5
                f_plus = loss()
                flat[idx] = orig - 1e-5
                f_minus = loss()
                flat[idx] = orig
                fd = (f_plus - f_minus) / 2e-5
                worst = max(worst, max_relative_error(
                    np.array([g.reshape(-1)[idx]]), np.array([fd]), floor=1e-3))
        assert worst < 1e-6


class TestDecoder:
    def test_output_shape_and_range(self, rng):
        dec = DecoderNet(TINY, 16, RngStream(9, "init"))
        out = dec.forward(rng.normal((3, 8)).astype(np.float32))
        assert out.shape == (3, 16, 16, 3)
        assert out.min() > 0.0 and out.max() < 1.0

    def test_rejects_indivisible_size(self):
        with pytest.raises(ConfigError):
            DecoderNet(TINY, 18, RngStream(9, "init"))


class TestSgd:
    def test_zero_gradient_leaves_parameters(self):
        opt = SgdMomentum(lr=0.1, momentum=0.9)
        p = {"w": np.ones(3)}
        opt.step(p, {"w": np.zeros(3)})
        assert np.all(p["w"] == 1.0)

    def test_zero_momentum_is_plain_sgd(self):
        opt = SgdMomentum(lr=0.5, momentum=0.0)
        p = {"w": np.array([1.0, 2.0])}
        opt.step(p, {"w": np.array([1.0, 1.0])})
        assert np.allclose(p["w"], [0.5, 1.5])

    def test_two_steps_with_constant_gradient(self):
        opt = SgdMomentum(lr=0.01, momentum=0.9)
        p = {"w": np.array([1.0])}
        g = {"w": np.array([1.0])}
        opt.step(p, g)
        assert p["w"][0] == pytest.approx(1.0 - 0.01)
        opt.step(p, g)
        assert p["w"][0] == pytest.approx(1.0 - 0.01 - 0.019)

    def test_clip_gradients(self):
        grads = {"a": np.array([3.0, 4.0])}
        norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.linalg.norm(grads["a"]) == pytest.approx(1.0)
        grads2 = {"a": np.array([0.3, 0.4])}
        clip_gradients(grads2, 1.0)
        assert np.allclose(grads2["a"], [0.3, 0.4])


class TestPatchPairs:
    def test_pair_geometry(self, rng):
        img = rng.uniform((64, 64, 3))
        one, two, label = sample_patch_pair(img, RngStream(1, "p"))
        assert one.shape == (32, 32, 3)
        assert two.shape == (32, 32, 3)
        assert 0 <= label < 8

    def test_all_eight_neighbours_fit(self, rng):
        img = rng.uniform((8, 8, 3))
        seen = set()
        for seed in range(200):
            _, _, label = sample_patch_pair(img, RngStream(seed, "p"))
            seen.add(label)
        assert seen == set(range(8))


class TestPretrain:
    def test_zero_epochs_is_initialisation_with_centres(self, rng):
        data = tiny_dataset(rng)
        ckpt = pretrain(data, fast_aug(), LossSwitches(), TemperatureSchedule(),
                        TINY, fast_cfg(epochs=0), RngStream(42, "pre"))
        fresh = EncoderNet(TINY, RngStream(42, "pre").child("init"))
        for name, value in fresh.parameters().items():
            assert np.array_equal(ckpt.params[name], value)
        assert ckpt.centres.centres.shape == (3, 8)
        assert ckpt.centres.frozen

    def test_bit_identical_checkpoints(self, rng):
        data = tiny_dataset(rng)
        args = (data, fast_aug(), LossSwitches(), TemperatureSchedule(), TINY)
        a = pretrain(*args, fast_cfg(), RngStream(7, "pre"))
        b = pretrain(*args, fast_cfg(), RngStream(7, "pre"))
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name]), name
        assert np.array_equal(a.centres.centres, b.centres.centres)

    def test_loss_curves_recorded(self, rng):
        data = tiny_dataset(rng)
        ckpt = pretrain(data, fast_aug(), LossSwitches(), TemperatureSchedule(),
                        TINY, fast_cfg(epochs=2), RngStream(7, "pre"))
        curves = ckpt.trailer["loss_curves"]
        assert len(curves["total"]) == 2
        assert all(np.isfinite(v) for v in curves["total"])

    def test_switches_disable_terms(self, rng):
        data = tiny_dataset(rng)
        switches = LossSwitches(use_centring=False, use_position=False)
        ckpt = pretrain(data, fast_aug(), switches, TemperatureSchedule(),
                        TINY, fast_cfg(epochs=1), RngStream(7, "pre"))
        curves = ckpt.trailer["loss_curves"]
        assert curves["centring"] == [0.0]
        assert curves["position"] == [0.0]
        assert curves["contrastive"][0] != 0.0

    def test_reestimate_strategy_updates_centres(self, rng):
        data = tiny_dataset(rng)
        cfg = TrainCfg(batch_size=4, lr=0.01, momentum=0.9, epochs=3,
                       centre_strategy="re-estimate", centre_period=2)
        ckpt = pretrain(data, fast_aug(), LossSwitches(), TemperatureSchedule(),
                        TINY, cfg, RngStream(7, "pre"))
        frozen = pretrain(data, fast_aug(), LossSwitches(), TemperatureSchedule(),
                          TINY, fast_cfg(epochs=3), RngStream(7, "pre"))
        assert not np.array_equal(ckpt.centres.centres, frozen.centres.centres)


class TestCheckpointIO:
    def test_roundtrip_preserves_forward(self, rng, tmp_path):
        data = tiny_dataset(rng)
        ckpt = pretrain(data, fast_aug(), LossSwitches(), TemperatureSchedule(),
                        TINY, fast_cfg(epochs=1), RngStream(3, "pre"))
        path = tmp_path / "enc.pmck"
        save_checkpoint(path, ckpt)
        loaded = load_checkpoint(path)
        net_a = encoder_from_checkpoint(ckpt)
        net_b = encoder_from_checkpoint(loaded)
        probes = rng.uniform((10, 16, 16, 3)).astype(np.float32)
        za = net_a.forward(probes)
        zb = net_b.forward(probes)
        assert np.array_equal(za, zb)
        assert loaded.centres.frozen == ckpt.centres.frozen
        assert np.array_equal(loaded.centres.centres, ckpt.centres.centres)

    def test_corrupt_record_length_names_record(self, rng, tmp_path):
        from pmsacl.errors import FormatError

        ckpt = Checkpoint(
            {"encoder.w": np.ones((2, 2), dtype=np.float32)},
            ClassCentres(np.zeros((2, 2), dtype=np.float32)),
        )
        path = tmp_path / "c.pmck"
        save_checkpoint(path, ckpt)
        raw = bytearray(path.read_bytes())
        raw[41] = 0xFF  # first record's name-length byte
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="record 0"):
            load_checkpoint(path)
