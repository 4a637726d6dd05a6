import math

import numpy as np
import pytest

from stamnet.errors import FormatError, ParameterError, ShapeError
from stamnet.model import ModelConfig, StamModel
from stamnet.septcn import SepTcnConfig
from stamnet.tensor import Tensor, no_grad, softmax

from conftest import check_grads


def tiny_config(**overrides):
    """Miniature end-to-end config: T=2, N=4, C=8, M=2, 3 classes."""
    base = dict(
        n_classes=3, t_frames=2, n_joints=4, channels=8, heads=2,
        septcn=SepTcnConfig(in_channels=3, mid_channels=4, out_channels=8),
        classifier_width=8, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


class TestConfig:
    def test_strict_unknown_keys(self):
        with pytest.raises(ParameterError):
            ModelConfig.from_dict({"n_classes": 4, "made_up": 1})

    def test_round_trip(self):
        cfg = tiny_config()
        back = ModelConfig.from_dict(cfg.to_dict())
        assert back == cfg

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ParameterError):
            ModelConfig(channels=64)  # septcn default outputs 128

    def test_needs_one_stream(self):
        with pytest.raises(ParameterError):
            tiny_config(stream_spatial=False, stream_temporal=False,
                        stream_cascade=False, stream_residual=False)


class TestShapes:
    def test_default_concat_and_logits(self, rng):
        model = StamModel(ModelConfig())
        x = Tensor(rng.uniform(0, 1, (8, 3, 4, 21)))
        feats = __import__("stamnet.septcn", fromlist=["septcn_forward"]) \
            .septcn_forward(x, model.config.septcn, model.septcn_params)
        assert feats.shape == (8, 128, 4, 21)
        from stamnet.septcn import tokens_from_features
        from stamnet.tensor import concat
        tokens = tokens_from_features(feats)
        assert tokens.shape == (8, 84, 128)
        z = concat(model.stream_outputs(tokens), axis=-2)
        assert z.shape == (8, 336, 128)
        logits = model.forward(x)
        assert logits.shape == (8, 38)

    def test_single_stream_concat(self, rng):
        cfg = ModelConfig(stream_temporal=False, stream_cascade=False,
                          stream_residual=False)
        model = StamModel(cfg)
        x = Tensor(rng.uniform(0, 1, (2, 3, 4, 21)))
        from stamnet.septcn import septcn_forward, tokens_from_features
        from stamnet.tensor import concat
        tokens = tokens_from_features(
            septcn_forward(x, cfg.septcn, model.septcn_params))
        z = concat(model.stream_outputs(tokens), axis=-2)
        assert z.shape == (2, 84, 128)

    def test_concat_length_scales_with_enabled_streams(self, rng):
        x = Tensor(rng.uniform(0, 1, (1, 3, 4, 21)))
        for n_enabled, kwargs in [
                (2, dict(stream_cascade=False, stream_residual=False)),
                (3, dict(stream_residual=False))]:
            cfg = ModelConfig(**kwargs)
            model = StamModel(cfg)
            from stamnet.septcn import septcn_forward, tokens_from_features
            from stamnet.tensor import concat
            tokens = tokens_from_features(
                septcn_forward(x, cfg.septcn, model.septcn_params))
            z = concat(model.stream_outputs(tokens), axis=-2)
            assert z.shape[-2] == 84 * n_enabled

    def test_bad_input_shape(self, rng):
        model = StamModel(tiny_config())
        with pytest.raises(ShapeError):
            model.forward(Tensor(rng.uniform(0, 1, (2, 3, 5, 4))))


class TestClassifierHead:
    def test_eval_mode_deterministic(self, rng):
        model = StamModel(tiny_config())
        z = Tensor(rng.standard_normal((5, 8)))
        a = model.classifier_head(z, training=False).data
        b = model.classifier_head(z, training=False).data
        np.testing.assert_array_equal(a, b)

    def test_zero_params_zero_output(self, rng):
        model = StamModel(tiny_config())
        for name in ("head.fc.weight", "head.fc.bias", "head.ln.gain", "head.ln.bias"):
            model.params[name].data[:] = 0.0
        z = Tensor(rng.standard_normal((3, 8)))
        np.testing.assert_array_equal(model.classifier_head(z).data, 0.0)

    def test_constant_row_identity_linear_gives_zero(self):
        model = StamModel(tiny_config())
        model.head_fc_w.data = np.eye(8)
        model.head_fc_b.data[:] = 0.0
        z = Tensor(np.full((1, 8), 3.0))
        np.testing.assert_allclose(model.classifier_head(z).data, 0.0, atol=1e-12)


class TestLoss:
    def test_perfect_prediction_near_zero(self):
        logits = Tensor(np.array([[50.0, 0.0, 0.0]]))
        assert StamModel.loss(logits, [0]).item() < 1e-12

    def test_uniform_ln4(self):
        logits = Tensor(np.zeros((2, 4)))
        np.testing.assert_allclose(StamModel.loss(logits, [1, 2]).item(),
                                   math.log(4), atol=1e-12)

    def test_probability_half_ln2(self):
        logits = Tensor(np.array([[math.log(2), 0.0, 0.0]]))
        np.testing.assert_allclose(StamModel.loss(logits, [0]).item(),
                                   math.log(2), atol=1e-12)


class TestCountTrainable:
    def test_single_linear_16512(self):
        model = StamModel(ModelConfig())
        _, groups = model.count_trainable()
        assert groups["head.fc"] == 128 * 128 + 128 == 16512

    def test_default_total_in_paper_window(self):
        total, _ = StamModel(ModelConfig()).count_trainable()
        assert 200_000 <= total <= 350_000
        assert total == 302_898  # frozen closed-form sum for the default config

    def test_attention_block_size(self):
        _, groups = StamModel(ModelConfig()).count_trainable()
        assert groups["stream1.attn"] == 4 * 128 * 128 + 128 == 65664
        assert groups["stream1.attn.ln"] == 256


class TestForwardProperties:
    def test_eval_forward_pure(self, rng):
        model = StamModel(tiny_config())
        x = Tensor(rng.uniform(0, 1, (3, 3, 2, 4)))
        a = model.forward(x).data
        b = model.forward(x).data
        np.testing.assert_array_equal(a, b)

    def test_logit_softmax_rows_sum_to_one(self, rng):
        model = StamModel(tiny_config())
        x = Tensor(rng.uniform(0, 1, (4, 3, 2, 4)))
        probs = softmax(model.forward(x), axis=-1)
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_joint_permutation_invariance_residual_only(self, rng):
        # residual stream only: tokens are per-joint, the pooled mean ignores
        # token order, so permuting joints must not change the logits
        cfg = tiny_config(stream_spatial=False, stream_temporal=False,
                          stream_cascade=False, stream_residual=True)
        model = StamModel(cfg)
        x = rng.uniform(0, 1, (2, 3, 2, 4))
        perm = [2, 0, 3, 1]
        base = model.forward(Tensor(x)).data
        permuted = model.forward(Tensor(x[:, :, :, perm])).data
        np.testing.assert_allclose(permuted, base, atol=1e-9)

    def test_training_mode_uses_rng(self, rng):
        model = StamModel(tiny_config(dropout_rate=0.5))
        x = Tensor(rng.uniform(0, 1, (2, 3, 2, 4)))
        a = model.forward(x, training=True, rng=np.random.default_rng(0)).data
        b = model.forward(x, training=True, rng=np.random.default_rng(0)).data
        c = model.forward(x, training=True, rng=np.random.default_rng(1)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestEndToEndGradients:
    def test_miniature_model_full_gradcheck(self, rng):
        model = StamModel(tiny_config())
        total, _ = model.count_trainable()
        assert total <= 5000
        x = Tensor(rng.uniform(0, 1, (2, 3, 2, 4)))
        labels = np.array([0, 2])
        leaves = list(model.params.values())
        worst = check_grads(lambda: StamModel.loss(model.forward(x), labels),
                            leaves, tol=1e-4)
        assert worst < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_identical_logits(self, rng, tmp_path):
        model = StamModel(tiny_config(seed=9))
        x = Tensor(rng.uniform(0, 1, (4, 3, 2, 4)))
        with no_grad():
            before = model.forward(x).data.copy()
        path = tmp_path / "model.npz"
        model.save(path)
        loaded = StamModel.load(path)
        with no_grad():
            after = loaded.forward(x).data
        assert np.array_equal(before, after)

    def test_config_preserved(self, tmp_path):
        cfg = tiny_config(mask_mode="multiplicative", attn_scale=False, seed=3)
        model = StamModel(cfg)
        model.save(tmp_path / "m.npz")
        assert StamModel.load(tmp_path / "m.npz").config == cfg

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, a=np.zeros(3))
        with pytest.raises(FormatError):
            StamModel.load(path)
