import struct

import numpy as np
import pytest

from conftest import assert_grad_close, finite_diff, tiny_bundle
from wsal.model import (
    CheckpointError,
    DegeneratePoolingError,
    LatentPrior,
    ModelBundle,
    ModelConfig,
    attention_pool,
    classify,
    cvae_decode,
    cvae_encode,
    load_checkpoint,
    prior_of,
    save_checkpoint,
)
from wsal.numerics import ShapeError, kl_diag_gaussians, softmax


def zeroed(bundle, names):
    for name in names:
        bundle.store.value(name)[...] = 0.0
    return bundle


class TestAttentionNet:
    def test_zero_final_layer_gives_half(self, rng):
        bundle = zeroed(tiny_bundle(), ["att.w2", "att.b2"])
        lam, _ = bundle.attention.forward(rng.standard_normal((6, 4)))
        np.testing.assert_array_equal(lam, np.full(6, 0.5))

    def test_permutation_equivariance(self, rng):
        bundle = tiny_bundle(seed=3)
        x = rng.standard_normal((8, 4))
        perm = rng.permutation(8)
        lam, _ = bundle.attention.forward(x)
        lam_perm, _ = bundle.attention.forward(x[perm])
        np.testing.assert_allclose(lam_perm, lam[perm], atol=1e-15)

    def test_matches_per_frame_recomputation(self, rng):
        bundle = tiny_bundle(seed=4)
        x = rng.standard_normal((5, 4))
        lam, _ = bundle.attention.forward(x)
        for t in range(5):
            single, _ = bundle.attention.forward(x[t : t + 1])
            assert abs(single[0] - lam[t]) < 1e-15

    def test_output_strictly_inside_unit_interval(self, rng):
        bundle = tiny_bundle(seed=5)
        lam, _ = bundle.attention.forward(rng.standard_normal((50, 4)) * 10)
        assert np.all(lam > 0) and np.all(lam < 1)

    def test_rejects_wrong_width(self, rng):
        bundle = tiny_bundle()
        with pytest.raises(ShapeError):
            bundle.attention.forward(rng.standard_normal((3, 5)))


class TestAttentionPool:
    def test_uniform_weights_give_mean(self, rng):
        x = rng.standard_normal((7, 3))
        np.testing.assert_allclose(
            attention_pool(x, np.full(7, 0.3)), x.mean(axis=0), atol=1e-12
        )

    def test_one_hot_selects_frame(self, rng):
        x = rng.standard_normal((5, 3))
        w = np.zeros(5)
        w[2] = 0.7
        np.testing.assert_allclose(attention_pool(x, w), x[2], atol=1e-12)

    def test_hand_arithmetic(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out = attention_pool(x, np.array([0.5, 0.5, 0.0]))
        np.testing.assert_allclose(out, [2.0, 3.0])

    def test_convex_hull_property(self, rng):
        for _ in range(25):
            x = rng.standard_normal((6, 4))
            w = rng.uniform(0, 1, 6)
            out = attention_pool(x, w)
            assert np.all(out >= x.min(axis=0) - 1e-12)
            assert np.all(out <= x.max(axis=0) + 1e-12)

    def test_zero_weights_raise(self, rng):
        with pytest.raises(DegeneratePoolingError):
            attention_pool(rng.standard_normal((4, 2)), np.zeros(4))

    def test_half_attention_makes_foreground_equal_background(self, rng):
        x = rng.standard_normal((9, 4))
        lam = np.full(9, 0.5)
        np.testing.assert_allclose(
            attention_pool(x, lam), attention_pool(x, 1.0 - lam), atol=1e-12
        )


class TestClassifier:
    def test_zero_weights_uniform(self):
        bundle = zeroed(tiny_bundle(num_classes=3), ["cls.w", "cls.b"])
        probs = classify(bundle.classifier, np.ones(4))
        np.testing.assert_allclose(probs, np.full(4, 0.25))

    def test_positive_scaling_preserves_argmax(self, rng):
        bundle = tiny_bundle(seed=6)
        x = rng.standard_normal(4)
        before = classify(bundle.classifier, x).argmax()
        bundle.store.value("cls.w")[...] *= 7.0
        bundle.store.value("cls.b")[...] *= 7.0
        assert classify(bundle.classifier, x).argmax() == before

    def test_dominant_weight_saturates(self):
        bundle = zeroed(tiny_bundle(num_classes=2), ["cls.w", "cls.b"])
        bundle.store.value("cls.w")[:, 1] = 50.0
        probs = classify(bundle.classifier, np.ones(4))
        assert probs[1] > 1 - 1e-12


class TestCvae:
    def test_zero_weight_encoder_is_standard_normal(self, rng):
        bundle = zeroed(
            tiny_bundle(), ["enc.w1", "enc.b1", "enc.wm", "enc.bm", "enc.wv", "enc.bv"]
        )
        g = cvae_encode(bundle.encoder, rng.standard_normal(4), 0.3)
        np.testing.assert_array_equal(g.mean, np.zeros(3))
        np.testing.assert_array_equal(g.logvar, np.zeros(3))

    def test_encode_deterministic(self, rng):
        bundle = tiny_bundle(seed=8)
        x = rng.standard_normal(4)
        a = cvae_encode(bundle.encoder, x, 0.8)
        b = cvae_encode(bundle.encoder, x, 0.8)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.logvar, b.logvar)

    def test_posterior_feeds_kl_against_prior(self, rng):
        bundle = tiny_bundle(seed=9)
        for lam in (0.0, 0.25, 1.0):
            q = cvae_encode(bundle.encoder, rng.standard_normal(4), lam)
            assert kl_diag_gaussians(q, prior_of(lam, bundle.prior)) >= 0.0

    def test_zero_weight_decoder_outputs_bias(self, rng):
        bundle = zeroed(tiny_bundle(), ["dec.w1", "dec.b1", "dec.w2"])
        bundle.store.value("dec.b2")[...] = np.arange(4.0)
        out = cvae_decode(bundle.decoder, 0.5, rng.standard_normal(3))
        np.testing.assert_array_equal(out, np.arange(4.0))

    def test_decode_deterministic(self, rng):
        bundle = tiny_bundle(seed=10)
        z = rng.standard_normal(3)
        np.testing.assert_array_equal(
            cvae_decode(bundle.decoder, 0.4, z), cvae_decode(bundle.decoder, 0.4, z)
        )

    def test_decoder_gradient_wrt_latent(self, rng):
        bundle = tiny_bundle(seed=11)
        z = rng.standard_normal((1, 3))
        lam = np.array([0.6])
        proj = rng.standard_normal((1, 4))

        def loss():
            out, _ = bundle.decoder.forward(lam, z)
            return float((out * proj).sum())

        _, cache = bundle.decoder.forward(lam, z)
        _, dz = bundle.decoder.backward(proj, cache, update_params=False)
        assert_grad_close(dz, finite_diff(loss, z), label="decoder dz")


class TestLatentPrior:
    def test_r_zero_is_attention_independent(self):
        prior = LatentPrior(0.0, 3)
        for lam in (0.0, 0.5, 1.0):
            g = prior.of(lam)
            np.testing.assert_array_equal(g.mean, np.zeros(3))
            np.testing.assert_array_equal(g.logvar, np.zeros(3))

    def test_zero_attention_gives_standard_prior(self):
        g = LatentPrior(1.5, 2).of(0.0)
        np.testing.assert_array_equal(g.mean, np.zeros(2))

    def test_direct_formula(self):
        g = LatentPrior(1.0, 2).of(0.75)
        np.testing.assert_array_equal(g.mean, [0.75, 0.75])
        np.testing.assert_array_equal(np.exp(g.logvar), [1.0, 1.0])

    def test_mean_affine_in_attention_with_slope_r(self):
        r = 0.8
        prior = LatentPrior(r, 4)
        lams = np.linspace(0, 1, 7)
        means = np.array([prior.of(l).mean[0] for l in lams])
        slopes = np.diff(means) / np.diff(lams)
        np.testing.assert_allclose(slopes, r, atol=1e-12)

    def test_negative_r_rejected(self):
        with pytest.raises(ValueError):
            LatentPrior(-0.1, 2)


class TestEndToEndGradient:
    def test_classification_loss_through_pooling_and_attention(self, rng):
        # scalar loss: -log p(y | pool(x, attention(x)))
        bundle = tiny_bundle(seed=12)
        x = rng.standard_normal((5, 4))
        y = 1

        def loss():
            lam, _ = bundle.attention.forward(x)
            pooled = attention_pool(x, lam)
            probs = classify(bundle.classifier, pooled)
            return float(-np.log(probs[y]))

        from wsal.losses import discriminative_loss

        bundle.store.zero_grads()
        lam, cache = bundle.attention.forward(x)
        _, dlam, _ = discriminative_loss(x, lam, y, bundle.classifier, alpha=0.0)
        bundle.attention.backward(dlam, cache)
        names = ("att.w1", "att.b1", "att.w2", "att.b2")
        analytic = {n: bundle.store.grad(n).copy() for n in names}
        for name in names:
            numeric = finite_diff(loss, bundle.store.value(name))
            assert_grad_close(analytic[name], numeric, label=name)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        bundle = tiny_bundle(seed=13)
        # dirty the optimizer state so the roundtrip covers it
        bundle.store.accumulate("att.w1", rng.standard_normal((4, 5)))
        from wsal.numerics import adam_step

        adam_step(bundle.store, 1e-3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(bundle, path, epoch=17, config_echo="a = 1")
        loaded, epoch, echo = load_checkpoint(path)
        assert epoch == 17 and echo == "a = 1"
        assert loaded.config == bundle.config
        for name in bundle.store.names():
            np.testing.assert_array_equal(
                loaded.store.value(name), bundle.store.value(name)
            )
            np.testing.assert_array_equal(
                loaded.store._slots[name].m, bundle.store._slots[name].m
            )
            assert loaded.store._slots[name].step == bundle.store._slots[name].step

    def test_save_is_deterministic(self, tmp_path):
        bundle = tiny_bundle(seed=14)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(bundle, p1)
        save_checkpoint(bundle, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_shape_mismatch_names_tensor(self, tmp_path):
        bundle = tiny_bundle(seed=15)
        path = tmp_path / "model.ckpt"
        save_checkpoint(bundle, path)
        raw = bytearray(path.read_bytes())
        # latent_dim lives after magic(8) + version(4) + d(4) + C(4)
        offset = 8 + 4 + 4 + 4
        (latent,) = struct.unpack_from("<I", raw, offset)
        struct.pack_into("<I", raw, offset, latent + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match=r"enc\.|dec\."):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(tiny_bundle(), path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)


class TestModelConfig:
    def test_defaults_match_published_scale(self):
        config = ModelConfig()
        assert config.attention_hidden == 256
        assert config.latent_dim == 128
        assert config.prior_r == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(latent_dim=0)
        with pytest.raises(ValueError):
            ModelConfig(prior_r=-1.0)
        with pytest.raises(ValueError):
            ModelConfig(obs_sigma=0.0)
