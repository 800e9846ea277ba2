import numpy as np
import pytest

from bandcodec.autoencoder import (
    VARIANTS,
    Adam,
    CheckpointError,
    Codec,
    ConfigError,
    InvertedBottleneck,
    LatentTensor,
    MissingCacheError,
    ModelConfig,
    MRFBlock,
    NumericalError,
    config_digest,
    decode_latent,
    encode,
    forward_backward,
    mel_l1,
    train,
    train_step,
)
from bandcodec.autoencoder.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes
from bandcodec.autoencoder.layers import Conv1d, ConvTranspose1d, Snake
from bandcodec.autoencoder.train import CSV_FIELDS
from bandcodec.dsp import AudioBuffer, make_band_plan
from bandcodec.quantizer import QuantizerStack
from bandcodec.synth import synthetic_batch

TINY = ModelConfig(
    strides=(2, 2), base_channels=4, latent_dim=4, mrf_kernels=(3,), mrf_dilations=(1,),
    conv_groups=2, bottleneck_expansion=2,
)


def tiny_setup(seed=0, dtype=np.float64):
    model = Codec(TINY, seed=seed, dtype=dtype)
    q = QuantizerStack.create(make_band_plan(TINY.latent_rate), TINY.latent_dim, bits=4)
    return model, q


def zero_snakes(module):
    for m in module.modules():
        if isinstance(m, Snake):
            for v in m.params.values():
                v[...] = 0.0


class TestShapes:
    def test_75hz_one_second(self):
        model = Codec(ModelConfig(base_channels=4, latent_dim=8))
        z = encode(AudioBuffer(np.zeros(24000), 24000), model)
        assert z.values.shape == (8, 75) and z.latent_rate == 75.0

    def test_12p5hz_two_seconds(self):
        cfg = ModelConfig(strides=VARIANTS["12.5hz"]["strides"], base_channels=4, latent_dim=8)
        model = Codec(cfg)
        z = encode(AudioBuffer(np.zeros(48000), 24000), model)
        assert z.n_frames == 25 and z.latent_rate == 12.5

    def test_partial_frame_is_padded(self):
        model = Codec(ModelConfig(base_channels=4, latent_dim=8))
        z = encode(AudioBuffer(np.zeros(12000), 24000), model)
        assert z.n_frames == 38

    def test_decode_length(self):
        model = Codec(ModelConfig(base_channels=4, latent_dim=8))
        y = decode_latent(np.zeros((8, 10)), model)
        assert len(y) == 3200 and y.sample_rate == 24000

    def test_variant_rates(self):
        rates = {k: ModelConfig(strides=v["strides"]).latent_rate for k, v in VARIANTS.items()}
        assert rates == {"75hz": 75.0, "25hz": 25.0, "12.5hz": 12.5}

    def test_latent_dim_checked(self):
        model = Codec(TINY)
        with pytest.raises(ValueError):
            model.decode_array(np.zeros((3, 5)))

    def test_rate_checked(self):
        with pytest.raises(ValueError):
            encode(AudioBuffer(np.zeros(100), 16000), Codec(TINY))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            encode(AudioBuffer(np.zeros(0), 24000), Codec(TINY))

    def test_latent_must_be_finite(self):
        with pytest.raises(ValueError):
            LatentTensor(np.array([[np.nan]]), 75.0)

    def test_zero_in_zero_out(self):
        model = Codec(TINY, dtype=np.float64)
        zero_snakes(model)
        assert np.all(model.encode_array(np.zeros(64)) == 0.0)
        assert np.all(model.decode_array(np.zeros((4, 8))) == 0.0)


class TestBlocks:
    def test_mrf_identity_kernel(self):
        # identity conv and beta -> 0 makes each branch x + x
        blk = MRFBlock(2, (3,), (1,), variant="amplitude")
        w = blk.branches[0].conv.params["weight"]
        w[...] = 0.0
        w[0, 0, 1] = w[1, 1, 1] = 1.0
        blk.branches[0].act.params["log_beta"][...] = -60.0
        x = np.random.default_rng(0).normal(size=(1, 2, 9)).astype(np.float32)
        np.testing.assert_allclose(blk.forward(x), 2 * x, rtol=1e-6)

    def test_mrf_identical_branches_average(self):
        one = MRFBlock(4, (3,), (1,), rng=np.random.default_rng(5))
        two = MRFBlock(4, (3, 3), (1, 1), rng=np.random.default_rng(6))
        for br in two.branches:
            for (n, p), (_, src) in zip(br.named_parameters(), one.branches[0].named_parameters()):
                p[...] = src
        x = np.random.default_rng(1).normal(size=(2, 4, 16)).astype(np.float32)
        np.testing.assert_allclose(two.forward(x), one.forward(x), rtol=1e-6)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            MRFBlock(4, (4,), (1,))
        with pytest.raises(ConfigError):
            ModelConfig(mrf_kernels=(3, 4))

    def test_bottleneck_zero_projection_is_identity(self):
        ib = InvertedBottleneck(8, expansion=4, groups=4)
        ib.project.params["weight"][...] = 0.0
        x = np.random.default_rng(2).normal(size=(1, 8, 12)).astype(np.float32)
        np.testing.assert_array_equal(ib.forward(x), x)

    @pytest.mark.parametrize("groups", [1, 2, 4, 8])
    def test_grouped_parameter_count(self, groups):
        conv = Conv1d(16, 32, 3, groups=groups)
        assert conv.params["weight"].size == 16 * 32 * 3 // groups

    def test_groups_must_divide(self):
        with pytest.raises(ValueError):
            Conv1d(6, 8, 3, groups=4)
        with pytest.raises(ConfigError):
            ModelConfig(base_channels=6, conv_groups=4)

    def test_backward_needs_forward(self):
        with pytest.raises(MissingCacheError):
            Conv1d(2, 2, 3).backward(np.zeros((1, 2, 4)))

    def test_single_linear_layer_gradient(self):
        # L = 0.5 ||W x - y||^2 for a 1x1 conv, gradient (Wx - y) x^T
        rng = np.random.default_rng(3)
        conv = Conv1d(3, 2, 1, rng=rng, dtype=np.float64)
        x = rng.normal(size=(1, 3, 5))
        y = rng.normal(size=(1, 2, 5))
        out = conv.forward(x)
        conv.backward(out - y)
        w = conv.params["weight"][:, :, 0]
        expected = (w @ x[0] - y[0]) @ x[0].T
        np.testing.assert_allclose(conv.grads["weight"][:, :, 0], expected, rtol=1e-12)

    def test_transpose_is_adjoint_of_strided_conv(self):
        rng = np.random.default_rng(4)
        up = ConvTranspose1d(3, 2, 4, 2, rng=rng, dtype=np.float64)
        x = rng.normal(size=(1, 3, 6))
        down = Conv1d(2, 3, 4, stride=2, padding=(0, 0), dtype=np.float64)
        down.params["weight"][...] = up.params["weight"]
        y = up.forward(x)
        g = rng.normal(size=y.shape)
        assert np.sum(y * g) == pytest.approx(np.sum(x * down.forward(g)), rel=1e-12)

    def test_translation_covariance(self):
        # shifting the input by one hop shifts the latent by one frame away from the edges
        model = Codec(TINY, dtype=np.float64)
        x = np.random.default_rng(5).normal(size=256)
        z = model.encode_array(x)[0]
        zs = model.encode_array(np.concatenate([np.zeros(TINY.hop), x[:-TINY.hop]]))[0]
        np.testing.assert_allclose(zs[:, 20:40], z[:, 19:39], rtol=1e-10, atol=1e-12)


class TestConfig:
    def test_text_round_trip(self):
        cfg = ModelConfig(strides=(3, 5, 8, 16), activation="amplitude", residual_gain=0.5)
        assert ModelConfig.from_text(cfg.to_text()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_text("strides=2,2\nwidth=3\n")

    def test_comments_ignored(self):
        assert ModelConfig.from_text("# tiny\nlatent_dim=8\n").latent_dim == 8


class TestCheckpoint:
    def test_round_trip(self):
        model, q = tiny_setup(dtype=np.float32)
        rng = np.random.default_rng(0)
        forward_backward(model, q, synthetic_batch(1, 2048, 24000, seed=0), rng=rng, with_grad=False)
        model2, q2 = checkpoint_from_bytes(checkpoint_to_bytes(model, q))
        assert model2.cfg == model.cfg
        for (n, a), (n2, b) in zip(model.named_parameters(), model2.named_parameters()):
            assert n == n2
            np.testing.assert_array_equal(a, b)
        for c1, c2 in zip(q.codebooks, q2.codebooks):
            np.testing.assert_array_equal(c1.vectors.astype(np.float32), c2.vectors)
        assert config_digest(model, q) == config_digest(model2, q2)

    def test_digest_sensitive(self):
        model, q = tiny_setup(dtype=np.float32)
        forward_backward(model, q, synthetic_batch(1, 2048, 24000, seed=0), rng=np.random.default_rng(0),
                         with_grad=False)
        before = config_digest(model, q)
        model.decoder.head.params["bias"][0] += 1e-3
        assert config_digest(model, q) != before

    def test_corrupt(self):
        model, q = tiny_setup(dtype=np.float32)
        forward_backward(model, q, synthetic_batch(1, 2048, 24000, seed=0), rng=np.random.default_rng(0),
                         with_grad=False)
        data = checkpoint_to_bytes(model, q)
        with pytest.raises(CheckpointError):
            checkpoint_from_bytes(b"XXXX" + data[4:])
        with pytest.raises(CheckpointError):
            checkpoint_from_bytes(data[:-3])
        with pytest.raises(CheckpointError):
            checkpoint_from_bytes(data + b"\x00")


class TestLoss:
    def test_perfect_reconstruction(self):
        x = synthetic_batch(2, 2048, 24000, seed=1)
        per, grad = mel_l1(x, x, 24000)
        assert sorted(per) == [7, 8, 9, 10, 11]
        assert all(v == 0.0 for v in per.values())

    def test_gradient_matches_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 2048))
        y = x + 0.1 * rng.normal(size=x.shape)
        _, g = mel_l1(y, x, 24000)

        def f(v):
            return np.mean(list(mel_l1(v, x, 24000, with_grad=False)[0].values()))

        h = 1e-6
        for i in rng.choice(2048, 10, replace=False):
            yp, ym = y.copy(), y.copy()
            yp[0, i] += h
            ym[0, i] -= h
            assert g[0, i] == pytest.approx((f(yp) - f(ym)) / (2 * h), rel=1e-4, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mel_l1(np.zeros((1, 100)), np.zeros((1, 101)), 24000)

    def test_commitment_only_when_exact(self):
        model, q = tiny_setup()
        x = synthetic_batch(1, 2048, 24000, seed=2)
        r = forward_backward(model, q, x, commit_weight=0.0, rng=np.random.default_rng(0), with_grad=False)
        assert r.commitment >= 0.0
        assert len(r.mel_per_scale) == 5


class TestTraining:
    def test_adam_first_step(self):
        # first Adam step moves each parameter by lr * sign(g)
        p = {"w": np.array([1.0, -2.0, 3.0])}
        Adam(lr=0.1).step(p, {"w": np.array([0.5, -4.0, 0.0])})
        np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-7)

    def test_adam_quadratic(self):
        p = {"w": np.array([5.0])}
        opt = Adam(lr=0.05)
        for _ in range(2000):
            opt.step(p, {"w": 2 * p["w"]})
        assert abs(p["w"][0]) < 1e-2

    def test_nan_aborts(self):
        model, q = tiny_setup()
        x = synthetic_batch(1, 2048, 24000, seed=3)
        x[0, 10] = np.nan
        with pytest.raises(NumericalError):
            train_step(x, model, q, Adam(), np.random.default_rng(0))

    def test_report_fields(self):
        model, q = tiny_setup()
        r = train_step(synthetic_batch(1, 2048, 24000, seed=4), model, q, Adam(), np.random.default_rng(0))
        row = r.as_row()
        assert tuple(row) == CSV_FIELDS
        assert r.total == pytest.approx(r.mel + 0.25 * r.commitment)

    def test_deterministic(self):
        def run():
            model, q = tiny_setup(seed=1, dtype=np.float32)
            batches = [synthetic_batch(1, 2048, 24000, seed=s) for s in (0, 1)]
            return [r.total for r in train(model, q, batches, steps=4, seed=9)]

        assert run() == run()

    def test_loss_falls(self):
        model, q = tiny_setup(seed=2, dtype=np.float32)
        batches = [synthetic_batch(2, 2048, 24000, seed=5)]
        hist = train(model, q, batches, steps=30, seed=0, lr=2e-3)
        assert hist[-1].mel < hist[0].mel
