"""Attention tests: scaled dot-product, multi-head composition, spatial stream."""

import numpy as np
import pytest

from rcft_mci.attention import (
    AttentionConfig,
    AttentionParams,
    SpatialHeadParams,
    attention_weights,
    head_forward,
    multi_head_attention,
    multi_head_attention_batch,
    scaled_dot_attention,
    spatial_stream_batch,
    spatial_stream_forward,
)
from rcft_mci.autograd import Tensor, grad_check
from rcft_mci.backbone import BackboneConfig, BackboneParams, StageSpec
from rcft_mci.errors import ConfigError, DataError, DimensionError


def _np_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def tiny_backbone() -> BackboneConfig:
    return BackboneConfig(
        input_size=16, stem_channels=4,
        stages=(StageSpec(expansion=2, kernel=3, stride=2, out_channels=8),))


def build_stream(seed: int, cfg: BackboneConfig, heads: int = 4,
                 hidden: int = 8):
    rng = np.random.default_rng(seed)
    channels = cfg.feature_shape()[0]
    backbone_params = BackboneParams.init(rng, cfg)
    attn_params = AttentionParams.init(rng, channels, heads)
    head_params = SpatialHeadParams.init(rng, 3 * channels, hidden)
    return backbone_params, attn_params, head_params


class TestScaledDotAttention:
    def test_single_key_returns_v(self):
        rng = np.random.default_rng(0)
        q = Tensor(rng.standard_normal((1, 3)))
        k = Tensor(rng.standard_normal((1, 3)))
        v = Tensor(rng.standard_normal((1, 3)))
        out = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data, v.data, atol=1e-15)

    def test_zero_query_averages_values(self):
        rng = np.random.default_rng(1)
        k = Tensor(rng.standard_normal((4, 2)))
        v = Tensor(rng.standard_normal((4, 2)))
        out = scaled_dot_attention(Tensor(np.zeros((4, 2))), k, v)
        expected = np.tile(v.data.mean(axis=0), (4, 1))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((2, 2))
        k = rng.standard_normal((2, 2))
        v = rng.standard_normal((2, 2))
        expected = _np_softmax(q @ k.T / np.sqrt(2)) @ v
        out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_width_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            scaled_dot_attention(Tensor(np.zeros((2, 3))),
                                 Tensor(np.zeros((2, 2))),
                                 Tensor(np.zeros((2, 2))))

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            scaled_dot_attention(Tensor(np.zeros((2, 2))),
                                 Tensor(np.zeros((3, 2))),
                                 Tensor(np.zeros((3, 2))))

    def test_weights_are_row_stochastic(self):
        rng = np.random.default_rng(3)
        w = attention_weights(Tensor(rng.standard_normal((5, 4))),
                              Tensor(rng.standard_normal((5, 4))))
        assert (w.data >= 0).all()
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_grad_check(self):
        rng = np.random.default_rng(4)
        k = Tensor(rng.standard_normal((3, 2)))
        v = Tensor(rng.standard_normal((3, 2)))
        w = Tensor(rng.standard_normal((3, 2)))
        err = grad_check(
            lambda t: (scaled_dot_attention(t, k, v) * w).sum(),
            Tensor(rng.standard_normal((3, 2)), requires_grad=True))
        assert err < 1e-6


class TestMultiHeadAttention:
    def test_uniform_attention_with_identity_values(self):
        tokens = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        params = AttentionParams(
            wq=Tensor(np.zeros((1, 2, 2))),
            wk=Tensor(np.zeros((1, 2, 2))),
            wv=Tensor(np.eye(2).reshape(1, 2, 2)),
            wo=Tensor(np.eye(2)),
            heads=1)
        out = multi_head_attention(Tensor(tokens), params)
        expected = np.tile(tokens.mean(axis=0), (3, 1))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        params = AttentionParams.init(rng, channels=8, heads=4)
        tokens = rng.standard_normal((6, 8))
        perm = rng.permutation(6)
        out = multi_head_attention(Tensor(tokens), params)
        out_perm = multi_head_attention(Tensor(tokens[perm]), params)
        np.testing.assert_allclose(out_perm.data, out.data[perm], atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_single_head_composition(self, seed):
        rng = np.random.default_rng(40 + seed)
        h, c, t = 4, 8, 3
        params = AttentionParams.init(rng, channels=c, heads=h)
        tokens = rng.standard_normal((t, c))
        d_k = c // h
        heads = []
        for i in range(h):
            q = tokens @ params.wq.data[i]
            k = tokens @ params.wk.data[i]
            v = tokens @ params.wv.data[i]
            heads.append(_np_softmax(q @ k.T / np.sqrt(d_k)) @ v)
        expected = np.concatenate(heads, axis=1) @ params.wo.data
        out = multi_head_attention(Tensor(tokens), params)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_indivisible_width_rejected(self):
        with pytest.raises(ConfigError):
            AttentionParams.init(np.random.default_rng(6), channels=10, heads=4)

    def test_token_width_mismatch_rejected(self):
        params = AttentionParams.init(np.random.default_rng(7), channels=8,
                                      heads=4)
        with pytest.raises(ConfigError):
            multi_head_attention(Tensor(np.zeros((3, 6))), params)

    def test_batch_matches_per_matrix(self):
        rng = np.random.default_rng(8)
        params = AttentionParams.init(rng, channels=8, heads=2)
        tokens = rng.standard_normal((3, 5, 8))
        batched = multi_head_attention_batch(Tensor(tokens), params)
        for i in range(3):
            single = multi_head_attention(Tensor(tokens[i]), params)
            np.testing.assert_allclose(batched.data[i], single.data, atol=1e-12)

    def test_grad_check(self):
        rng = np.random.default_rng(9)
        params = AttentionParams.init(rng, channels=4, heads=2)
        w = Tensor(rng.standard_normal((3, 4)))
        err = grad_check(
            lambda t: (multi_head_attention(t, params) * w).sum(),
            Tensor(rng.standard_normal((3, 4)), requires_grad=True))
        assert err < 1e-6


class TestSpatialStream:
    def test_output_is_probability_pair(self):
        cfg = tiny_backbone()
        bp, ap, hp = build_stream(10, cfg)
        rng = np.random.default_rng(11)
        images = {c: Tensor(rng.random((1, 16, 16)))
                  for c in ("copy", "immediate", "delayed")}
        out = spatial_stream_forward(images, cfg, bp, ap, hp)
        assert out.shape == (2,)
        assert (out.data > 0).all()
        assert abs(out.data.sum() - 1.0) < 1e-9

    def test_eval_repeat_is_bitwise_identical(self):
        cfg = tiny_backbone()
        bp, ap, hp = build_stream(12, cfg)
        rng = np.random.default_rng(13)
        images = {c: Tensor(rng.random((1, 16, 16)))
                  for c in ("copy", "immediate", "delayed")}
        a = spatial_stream_forward(images, cfg, bp, ap, hp)
        b = spatial_stream_forward(images, cfg, bp, ap, hp)
        np.testing.assert_array_equal(a.data, b.data)

    def test_condition_order_matters(self):
        cfg = tiny_backbone()
        bp, ap, hp = build_stream(14, cfg)
        rng = np.random.default_rng(15)
        copy_img = Tensor(rng.random((1, 16, 16)))
        imm_img = Tensor(rng.random((1, 16, 16)))
        del_img = Tensor(rng.random((1, 16, 16)))
        out = spatial_stream_forward(
            {"copy": copy_img, "immediate": imm_img, "delayed": del_img},
            cfg, bp, ap, hp)
        swapped = spatial_stream_forward(
            {"copy": del_img, "immediate": imm_img, "delayed": copy_img},
            cfg, bp, ap, hp)
        assert not np.allclose(out.data, swapped.data)

    def test_missing_image_names_condition(self):
        cfg = tiny_backbone()
        bp, ap, hp = build_stream(16, cfg)
        rng = np.random.default_rng(17)
        images = {"copy": Tensor(rng.random((1, 16, 16))),
                  "immediate": Tensor(rng.random((1, 16, 16)))}
        with pytest.raises(DataError, match="delayed"):
            spatial_stream_forward(images, cfg, bp, ap, hp)

    def test_unknown_condition_rejected(self):
        cfg = tiny_backbone()
        bp, ap, hp = build_stream(18, cfg)
        images = {c: Tensor(np.zeros((1, 16, 16)))
                  for c in ("copy", "immediate", "delayed", "recall")}
        with pytest.raises(DataError, match="recall"):
            spatial_stream_forward(images, cfg, bp, ap, hp)

    def test_batch_matches_per_subject(self):
        cfg = tiny_backbone()
        bp, ap, hp = build_stream(19, cfg)
        rng = np.random.default_rng(20)
        triplets = rng.random((2, 3, 16, 16))
        batched = spatial_stream_batch(Tensor(triplets), cfg, bp, ap, hp,
                                       mode="eval")
        for i in range(2):
            images = {c: Tensor(triplets[i, j][None])
                      for j, c in enumerate(("copy", "immediate", "delayed"))}
            single = spatial_stream_forward(images, cfg, bp, ap, hp)
            np.testing.assert_allclose(batched.data[i], single.data, atol=1e-12)

    def test_full_stream_grad_check(self):
        cfg = tiny_backbone()
        bp, ap, hp = build_stream(21, cfg)
        rng = np.random.default_rng(22)
        x = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
        w = Tensor(rng.standard_normal((1, 2)))
        err = grad_check(
            lambda t: (spatial_stream_batch(t, cfg, bp, ap, hp,
                                            mode="eval") * w).sum(), x)
        assert err < 1e-3

    def test_attention_weight_grad_check(self):
        cfg = tiny_backbone()
        bp, ap, hp = build_stream(23, cfg)
        rng = np.random.default_rng(24)
        x = Tensor(rng.random((1, 3, 16, 16)))
        w = Tensor(rng.standard_normal((1, 2)))

        def loss_of_wq(t):
            old = ap.wq
            ap.wq = t
            try:
                return (spatial_stream_batch(x, cfg, bp, ap, hp,
                                             mode="eval") * w).sum()
            finally:
                ap.wq = old

        err = grad_check(loss_of_wq, Tensor(ap.wq.data.copy(),
                                            requires_grad=True))
        assert err < 1e-3

    def test_positional_embedding_breaks_permutation_symmetry(self):
        rng = np.random.default_rng(25)
        params = AttentionParams.init(rng, channels=8, heads=4, token_count=4,
                                      positional_encoding=True)
        assert params.pos is not None and params.pos.shape == (4, 8)
        names = [n for n, _ in params.named_tensors()]
        assert "attention.pos" in names

    def test_bad_config_values_rejected(self):
        with pytest.raises(ConfigError):
            AttentionConfig(heads=0)
        with pytest.raises(ConfigError):
            AttentionConfig(fc1_width=0)

    def test_head_forward_shapes(self):
        rng = np.random.default_rng(26)
        hp = SpatialHeadParams.init(rng, in_features=6, hidden=5)
        out = head_forward(Tensor(rng.standard_normal((4, 6))), hp)
        assert out.shape == (4, 2)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
