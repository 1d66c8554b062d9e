"""Attention blocks, classifier heads, rescoring, and checkpoints."""

import math

import numpy as np
import pytest
import torch
from torch import nn

from xrayrec.errors import ConfigError
from xrayrec.model import (
    CBAM,
    AttentionConfig,
    BackboneConfig,
    ChannelAttention,
    Classifier,
    HeadConfig,
    SpatialAttention,
    TinyCNN,
    build_classifier,
    class_scores,
    load_checkpoint,
    rescore,
    save_checkpoint,
)


def features(n=2, c=32, h=10, w=10, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, c, h, w, generator=g)


class TestConfigs:
    def test_backbone_family(self):
        with pytest.raises(ConfigError):
            BackboneConfig(family="vgg16").validate()
        assert BackboneConfig("tiny_cnn").feature_channels == 128
        assert BackboneConfig("resnet34").feature_channels == 512

    def test_missing_pretrained_file(self):
        with pytest.raises(ConfigError, match="not found"):
            BackboneConfig("resnet34", pretrained_weights="/nonexistent.pt").validate()

    @pytest.mark.parametrize(
        "kwargs", [dict(reduction_ratio=0), dict(spatial_kernel=4), dict(spatial_kernel=-1)]
    )
    def test_attention_validation(self, kwargs):
        with pytest.raises(ConfigError):
            AttentionConfig(enabled=True, **kwargs).validate()

    def test_attention_divisibility(self):
        AttentionConfig(reduction_ratio=3).validate()
        with pytest.raises(ConfigError, match="divide"):
            AttentionConfig(reduction_ratio=3).validate(feature_channels=128)

    def test_head_config(self):
        assert HeadConfig("plain5").out_dim == 5
        assert HeadConfig("rescoring6").out_dim == 6
        with pytest.raises(ConfigError):
            HeadConfig("softmax").validate()
        with pytest.raises(ConfigError):
            HeadConfig("rescoring6", conditional_mode="hinge").validate()


class TestChannelAttention:
    def test_zero_features_gate_at_half(self):
        """Bias-free shared MLP: zero input must gate every channel at exactly 0.5."""
        m = ChannelAttention(32, reduction_ratio=4)
        out = m(torch.zeros(3, 32, 5, 5))
        assert torch.all(out == 0.5)

    def test_shape_and_range(self):
        m = ChannelAttention(32, reduction_ratio=4)
        out = m(features())
        assert out.shape == (2, 32)
        assert torch.all(out > 0) and torch.all(out < 1)

    def test_spatial_permutation_invariance(self):
        """Gates depend on pooled statistics only, not on pixel arrangement."""
        m = ChannelAttention(32, reduction_ratio=4)
        x = features()
        perm = torch.randperm(100, generator=torch.Generator().manual_seed(1))
        shuffled = x.reshape(2, 32, -1)[:, :, perm].reshape(2, 32, 10, 10)
        assert torch.allclose(m(x), m(shuffled), atol=1e-6)

    def test_bias_free_parameter_count(self):
        m = ChannelAttention(128, reduction_ratio=16)
        assert sum(p.numel() for p in m.parameters()) == 128 * 8 * 2

    def test_indivisible_channels_rejected(self):
        with pytest.raises(ConfigError):
            ChannelAttention(30, reduction_ratio=4)


class TestSpatialAttention:
    def test_shape_and_range(self):
        m = SpatialAttention(kernel_size=7)
        out = m(features())
        assert out.shape == (2, 10, 10)
        assert torch.all(out > 0) and torch.all(out < 1)

    def test_constant_input_constant_interior(self):
        m = SpatialAttention(kernel_size=7)
        out = m(torch.full((1, 8, 12, 12), 0.3))
        interior = out[0, 3:-3, 3:-3]
        assert torch.allclose(interior, interior[0, 0], atol=1e-6)

    def test_perturbation_locality(self):
        """A one-pixel change can only move the map within the kernel radius."""
        m = SpatialAttention(kernel_size=7)
        x = features(n=1, h=16, w=16)
        bumped = x.clone()
        bumped[0, :, 8, 8] += 5.0
        base, moved = m(x), m(bumped)
        far = torch.ones(16, 16, dtype=torch.bool)
        far[8 - 3 : 8 + 4, 8 - 3 : 8 + 4] = False
        assert torch.equal(base[0][far], moved[0][far])
        assert not torch.equal(base[0][~far], moved[0][~far])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            SpatialAttention(kernel_size=4)


class _OnesChannel(nn.Module):
    def forward(self, f):
        return torch.ones(f.shape[0], f.shape[1])


class _OnesSpatial(nn.Module):
    def forward(self, f):
        return torch.ones(f.shape[0], f.shape[2], f.shape[3])


class TestCBAM:
    def test_shape_preserved(self):
        m = CBAM(32, reduction_ratio=4, spatial_kernel=7)
        x = features()
        assert m(x).shape == x.shape

    def test_sequential_gating_algebra(self):
        m = CBAM(32, reduction_ratio=4, spatial_kernel=5)
        x = features()
        refined = x * m.channel(x)[:, :, None, None]
        expected = refined * m.spatial(refined)[:, None, :, :]
        assert torch.equal(m(x), expected)

    def test_open_gates_are_identity(self):
        m = CBAM(32, reduction_ratio=4)
        m.channel = _OnesChannel()
        m.spatial = _OnesSpatial()
        x = features()
        assert torch.equal(m(x), x)

    def test_contracts_nonnegative_features(self):
        m = CBAM(32, reduction_ratio=4)
        x = torch.relu(features())
        assert torch.all(m(x) <= x)


class TestBackboneAndClassifier:
    def test_tiny_cnn_downsampling(self):
        net = TinyCNN()
        assert net(torch.randn(2, 3, 64, 64)).shape == (2, 128, 4, 4)
        assert net(torch.randn(1, 3, 112, 112)).shape == (1, 128, 7, 7)

    def test_logit_shapes(self):
        x = torch.randn(2, 3, 48, 48)
        plain = build_classifier(head=HeadConfig("plain5"))
        six = build_classifier(head=HeadConfig("rescoring6"))
        assert plain(x).shape == (2, 5)
        assert six(x).shape == (2, 6)

    def test_cbam_variant_runs(self):
        model = build_classifier(attention=AttentionConfig(enabled=True))
        assert model(torch.randn(2, 3, 48, 48)).shape == (2, 5)

    def test_head_parameters(self):
        plain = build_classifier()
        gated = build_classifier(attention=AttentionConfig(enabled=True))
        assert len(plain.head_parameters()) == 2  # fc weight + bias
        assert len(gated.head_parameters()) == 5  # + 2 MLP weights + spatial conv

    def test_fc_bias_starts_at_zero(self):
        assert torch.all(build_classifier().fc.bias == 0)

    def test_input_validation(self):
        model = build_classifier()
        with pytest.raises(ConfigError):
            model(torch.randn(3, 48, 48))
        with pytest.raises(ConfigError):
            model(torch.randn(2, 1, 48, 48))

    def test_eval_mode_deterministic_rows(self):
        model = build_classifier(attention=AttentionConfig(enabled=True)).eval()
        x = torch.randn(1, 3, 48, 48)
        pair = torch.cat([x, x])
        with torch.no_grad():
            logits = model(pair)
            again = model(pair)
        assert torch.equal(logits[0], logits[1])
        assert torch.equal(logits, again)

    def test_resnet_family_builds(self):
        model = build_classifier(backbone=BackboneConfig("resnet34"))
        with torch.no_grad():
            assert model(torch.randn(1, 3, 64, 64)).shape == (1, 5)

    def test_tiny_cnn_loads_pretrained_backbone(self, tmp_path):
        """A saved backbone state_dict seeds a new classifier's backbone exactly."""
        donor = build_classifier()
        path = tmp_path / "backbone.pt"
        torch.save(donor.backbone.state_dict(), path)
        loaded = build_classifier(
            backbone=BackboneConfig("tiny_cnn", pretrained_weights=str(path))
        )
        for key, value in donor.backbone.state_dict().items():
            assert torch.equal(loaded.backbone.state_dict()[key], value)
        fresh = build_classifier()
        first_conv = "stages.0.weight"
        assert not torch.equal(
            fresh.backbone.state_dict()[first_conv], donor.backbone.state_dict()[first_conv]
        )


class TestRescore:
    def test_worked_example(self):
        logits = torch.tensor([[math.log(4.0), 0.0, 0.0, 0.0, 0.0, 0.0]])
        probs = rescore(logits)
        assert probs[0, 0].item() == pytest.approx(0.8 * 0.5, abs=1e-6)
        assert probs[0, 1].item() == pytest.approx(0.25, abs=1e-6)

    def test_suppressed_objectness_kills_all_classes(self):
        logits = torch.zeros(1, 6)
        logits[0, 5] = -50.0
        assert torch.all(rescore(logits) < 1e-20)

    def test_bounded_by_objectness(self):
        g = torch.Generator().manual_seed(3)
        for _ in range(200):
            logits = torch.randn(8, 6, generator=g) * 10
            probs = rescore(logits)
            objectness = torch.sigmoid(logits[:, 5:6])
            assert torch.all(probs <= objectness)

    def test_wrong_width_rejected(self):
        with pytest.raises(ConfigError):
            rescore(torch.zeros(2, 5))

    def test_class_scores_dispatch(self):
        five = torch.randn(4, 5)
        six = torch.randn(4, 6)
        assert torch.equal(class_scores(five, "plain5"), torch.sigmoid(five))
        assert torch.equal(class_scores(six, "rescoring6"), rescore(six))
        with pytest.raises(ConfigError):
            class_scores(five, "rescoring6")
        with pytest.raises(ConfigError):
            class_scores(six, "plain5")
        with pytest.raises(ConfigError):
            class_scores(five, "argmax")


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        model = build_classifier(
            attention=AttentionConfig(enabled=True), head=HeadConfig("rescoring6")
        ).eval()
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, config={"train": {"epochs": 3}}, config_hash="abc123")
        loaded, meta = load_checkpoint(path)
        assert not loaded.training
        assert meta["config_hash"] == "abc123"
        assert meta["config"]["train"]["epochs"] == 3
        x = torch.randn(2, 3, 48, 48, generator=torch.Generator().manual_seed(5))
        with torch.no_grad():
            assert torch.equal(loaded(x), model(x))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_checkpoint(tmp_path / "nope.pt")

    def test_unrecognized_schema(self, tmp_path):
        path = tmp_path / "other.pt"
        torch.save({"schema": "something-else"}, path)
        with pytest.raises(ConfigError, match="schema"):
            load_checkpoint(path)
