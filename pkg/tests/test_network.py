"""Network construction, decoder-layer behavior, and the multi-output forward."""

import numpy as np
import pytest

from ognet.network import (
    DecoderLayerSpec, NetworkConfig, build_network, decoder_layer_forward,
    ognet_forward, output_head,
)
from ognet.tensor import ShapeError, Tensor, bilinear_resize, conv2d, grad_check, sigmoid


def mini_config(attention="ogam", residual=True, m=2, ch=4, conv_e_size=3):
    return NetworkConfig(
        stages=tuple((ch, 1) for _ in range(m)),
        decoder=tuple(DecoderLayerSpec(ch, ch, 2 * ch, 2 * ch) for _ in range(m)),
        attention=attention, residual=residual, conv_e_size=conv_e_size)


def param_bytes(model):
    return b"".join(p.data.tobytes() for _, p in model.named_params())


class TestConfig:
    def test_vgg_row1_matches_decoder_table(self):
        cfg = NetworkConfig.vgg16_shape()
        assert cfg.decoder[0] == DecoderLayerSpec(128, 128, 256, 256)
        assert cfg.decoder[2] == DecoderLayerSpec(64, 64, 128, 128)
        assert cfg.decoder[4] == DecoderLayerSpec(32, 32, 64, 64)

    def test_vgg_preset_stride_product(self):
        cfg = NetworkConfig.vgg16_shape()
        assert cfg.m == 5
        assert cfg.stride_product == 32

    def test_tiny_preset_shape_relationships(self):
        cfg = NetworkConfig.tiny()
        assert [row.conv_e for row in cfg.decoder] == [32, 32, 16, 8, 8]
        for row in cfg.decoder:
            assert row.conv_1 == 2 * row.conv_e
            assert row.conv_2 == 2 * row.conv_e

    def test_kv_round_trip(self):
        cfg = NetworkConfig.tiny(attention="cbam", residual=False, conv_e_size=5)
        kv = {}
        for line in cfg.to_kv().splitlines():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        again = NetworkConfig.from_kv(kv)
        assert again == cfg

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            mini_config(conv_e_size=4)
        with pytest.raises(ValueError):
            mini_config(attention="nonlocal")
        with pytest.raises(ValueError):
            NetworkConfig(stages=((4, 1),), decoder=())


class TestBuild:
    def test_row1_parameter_shapes_vgg(self):
        model = build_network(NetworkConfig.vgg16_shape(), seed=0, dtype=np.float32)
        layer1 = model.layers[0]
        assert layer1.conv_e.conv.weight.shape == (128, 64, 3, 3)
        assert layer1.conv_1.conv.weight.shape == (256, 256, 3, 3)

    def test_deterministic_parameter_bytes(self):
        a = build_network(NetworkConfig.tiny(), seed=7, dtype=np.float32)
        b = build_network(NetworkConfig.tiny(), seed=7, dtype=np.float32)
        assert param_bytes(a) == param_bytes(b)
        c = build_network(NetworkConfig.tiny(), seed=8, dtype=np.float32)
        assert param_bytes(a) != param_bytes(c)

    def test_bias_and_bn_initialization(self):
        model = build_network(mini_config(), seed=1, dtype=np.float64)
        for name, p in model.named_params():
            if name.endswith(".bias") or name.endswith(".beta"):
                assert not p.data.any(), name
            if name.endswith(".gamma"):
                assert np.all(p.data == 1.0), name

    def test_conv_e_size_applied(self):
        model = build_network(mini_config(conv_e_size=5), seed=0, dtype=np.float64)
        assert model.layers[0].conv_e.conv.weight.shape[2:] == (5, 5)
        assert model.layers[0].conv_d.conv.weight.shape[2:] == (3, 3)


class TestDecoderLayer:
    def make_layer(self, residual=True, seed=0):
        cfg = mini_config(residual=residual)
        model = build_network(cfg, seed=seed, dtype=np.float64)
        return model.layers[1], cfg  # deepest layer: decoder input channels = 4

    def test_residual_disabled_same_shape(self):
        layer, _ = self.make_layer(residual=False)
        rng = np.random.default_rng(0)
        enc = Tensor(rng.normal(size=(1, 4, 8, 8)))
        dec = Tensor(rng.normal(size=(1, 4, 4, 4)))
        out = decoder_layer_forward(enc, dec, layer, training=True, residual_enabled=False)
        assert out.shape == (1, 8, 8, 8)

    def test_zeroed_convs_isolate_residual_projection(self):
        layer, _ = self.make_layer(residual=True)
        for block in (layer.conv_e, layer.conv_d, layer.conv_1, layer.conv_2):
            block.conv.weight.data[...] = 0.0
            block.conv.bias.data[...] = 0.0
        rng = np.random.default_rng(1)
        enc = Tensor(rng.normal(size=(1, 4, 8, 8)))
        dec = Tensor(rng.normal(size=(1, 4, 4, 4)))
        out = decoder_layer_forward(enc, dec, layer, training=True, residual_enabled=True)
        up = bilinear_resize(dec, 8, 8)
        proj = conv2d(up, layer.residual.weight, layer.residual.bias)
        np.testing.assert_allclose(out.data, proj.data, atol=1e-12)

    def test_spatial_mismatch_rejected(self):
        layer, _ = self.make_layer()
        enc = Tensor(np.zeros((1, 4, 8, 8)))
        dec = Tensor(np.zeros((1, 4, 3, 3)))  # 2x gives 6x6, not 8x8
        with pytest.raises(ShapeError):
            decoder_layer_forward(enc, dec, layer, training=True, residual_enabled=True)


class TestOutputHead:
    def test_zero_head_gives_half_probs(self):
        model = build_network(mini_config(), seed=0, dtype=np.float64)
        head = model.layers[0].head
        head.weight.data[...] = 0.0
        head.bias.data[...] = 0.0
        feat = Tensor(np.random.default_rng(0).normal(size=(1, 8, 8, 8)))
        logits, probs = output_head(feat, head)
        np.testing.assert_array_equal(probs.data, np.full((1, 1, 8, 8), 0.5))

    def test_probs_are_sigmoid_of_logits(self):
        model = build_network(mini_config(), seed=3, dtype=np.float64)
        feat = Tensor(np.random.default_rng(1).normal(size=(2, 8, 4, 4)))
        logits, probs = output_head(feat, model.layers[0].head)
        np.testing.assert_array_equal(probs.data, sigmoid(logits).data)
        assert np.all(probs.data > 0) and np.all(probs.data < 1)


class TestForward:
    def test_tiny_output_resolutions(self):
        model = build_network(NetworkConfig.tiny(), seed=0, dtype=np.float32)
        img = Tensor(np.random.default_rng(0).random((1, 3, 96, 96), dtype=np.float32))
        outs = ognet_forward(model, img)
        sizes = [p.shape[2] for p in outs.probs]
        assert sizes == [96, 48, 24, 12, 6]
        assert all(p.shape[1] == 1 for p in outs.probs)
        assert outs.final is outs.probs[0]

    def test_resolutions_strictly_decreasing_and_m_outputs(self):
        model = build_network(mini_config(m=3), seed=0, dtype=np.float64)
        img = Tensor(np.random.default_rng(1).normal(size=(2, 3, 16, 16)))
        outs = ognet_forward(model, img)
        assert len(outs.probs) == 3
        sizes = [p.shape[2] for p in outs.probs]
        assert sizes == sorted(sizes, reverse=True) and len(set(sizes)) == 3

    def test_indivisible_input_rejected(self):
        model = build_network(mini_config(), seed=0, dtype=np.float64)
        with pytest.raises(ShapeError):
            ognet_forward(model, Tensor(np.zeros((1, 3, 10, 10))))

    def test_forward_deterministic(self):
        img = np.random.default_rng(2).normal(size=(1, 3, 8, 8))
        runs = []
        for _ in range(2):
            model = build_network(mini_config(), seed=11, dtype=np.float64)
            outs = ognet_forward(model, Tensor(img))
            runs.append(outs.final.data.copy())
        np.testing.assert_array_equal(runs[0], runs[1])

    @pytest.mark.parametrize("attention", ["none", "se", "cbam", "ogam"])
    def test_attention_kind_never_changes_shapes(self, attention):
        model = build_network(mini_config(attention=attention), seed=0, dtype=np.float64)
        img = Tensor(np.random.default_rng(3).normal(size=(1, 3, 8, 8)))
        outs = ognet_forward(model, img)
        assert [p.shape for p in outs.probs] == [(1, 1, 8, 8), (1, 1, 4, 4)]

    def test_residual_toggle_changes_values_not_shapes(self):
        img = np.random.default_rng(4).normal(size=(1, 3, 8, 8))
        with_res = build_network(mini_config(residual=True), seed=5, dtype=np.float64)
        without = build_network(mini_config(residual=False), seed=5, dtype=np.float64)
        a = ognet_forward(with_res, Tensor(img))
        b = ognet_forward(without, Tensor(img))
        assert [p.shape for p in a.probs] == [p.shape for p in b.probs]
        assert not np.array_equal(a.final.data, b.final.data)

    def test_gradient_flows_to_input_and_params(self):
        # spot gradient check on a miniature net: image plus a small param subset
        model = build_network(mini_config(), seed=6, dtype=np.float64)
        img = Tensor(np.random.default_rng(7).normal(size=(1, 3, 8, 8)), requires_grad=True)
        subset = [p for name, p in model.named_params()
                  if name in ("decoder.l1.head.weight", "decoder.l2.att.ca.l1.weight",
                              "encoder.s1.c1.conv.bias")]
        assert len(subset) == 3

        def build(*leaves):
            outs = ognet_forward(model, leaves[0], training=True)
            return sum((p.sum() for p in outs.probs[1:]), outs.probs[0].sum())

        def resample(leaves, attempt):
            r = np.random.default_rng(900 + attempt)
            leaves[0].data[...] = r.normal(size=leaves[0].shape)

        err = grad_check(build, [img] + subset, resample=resample)
        assert err < 1e-3
