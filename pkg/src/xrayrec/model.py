"""Classifier: convolutional backbone, optional CBAM block, sigmoid output head.

Two backbones: the standard 34-layer residual network (feature channels 512)
for full-scale runs, and a small 4-stage CNN (16/32/64/128, stride-2, BN+ReLU)
for desk-scale verification. The optional attention block sits between the
final feature map and global average pooling.

The head is a single fully-connected layer emitting raw logits: 5 for the
plain multi-label head, 6 for the rescoring head whose last logit is
objectness. rescore() turns 6 logits into 5 class probabilities via
P(class_i) = sigmoid(logit_i) * sigmoid(logit_obj).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .errors import ConfigError

CHECKPOINT_SCHEMA = "xrayrec-checkpoint-v1"

BACKBONE_FAMILIES = ("tiny_cnn", "resnet34")
HEAD_MODES = ("plain5", "rescoring6")
CONDITIONAL_MODES = ("masked", "product")
OBJECTNESS_INDEX = 5


@dataclass
class BackboneConfig:
    family: str = "tiny_cnn"
    pretrained_weights: str | None = None

    def validate(self) -> None:
        if self.family not in BACKBONE_FAMILIES:
            raise ConfigError(f"backbone family must be one of {BACKBONE_FAMILIES}, got {self.family!r}")
        if self.pretrained_weights is not None and not Path(self.pretrained_weights).is_file():
            raise ConfigError(f"pretrained_weights file not found: {self.pretrained_weights}")

    @property
    def feature_channels(self) -> int:
        return {"tiny_cnn": 128, "resnet34": 512}[self.family]


@dataclass
class AttentionConfig:
    enabled: bool = False
    reduction_ratio: int = 16
    spatial_kernel: int = 7

    def validate(self, feature_channels: int | None = None) -> None:
        if self.reduction_ratio < 1:
            raise ConfigError(f"reduction_ratio must be >= 1, got {self.reduction_ratio}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be a positive odd integer, got {self.spatial_kernel}")
        if feature_channels is not None and feature_channels % self.reduction_ratio != 0:
            raise ConfigError(
                f"reduction_ratio {self.reduction_ratio} must divide feature channels {feature_channels}"
            )


@dataclass
class HeadConfig:
    mode: str = "plain5"
    # How the rescoring loss trains the 5 conditional logits: "masked" trains
    # them only on positive samples, "product" trains the final product
    # probability on every sample.
    conditional_mode: str = "masked"

    def validate(self) -> None:
        if self.mode not in HEAD_MODES:
            raise ConfigError(f"head mode must be one of {HEAD_MODES}, got {self.mode!r}")
        if self.conditional_mode not in CONDITIONAL_MODES:
            raise ConfigError(
                f"conditional_mode must be one of {CONDITIONAL_MODES}, got {self.conditional_mode!r}"
            )

    @property
    def out_dim(self) -> int:
        return 5 if self.mode == "plain5" else 6


class ChannelAttention(nn.Module):
    """Per-channel gate: sigmoid(MLP(avgpool F) + MLP(maxpool F)).

    The 2-layer bottleneck MLP (width C/r) is shared between both pooled
    descriptors and is bias-free, so a zero feature map gates every channel
    at exactly sigmoid(0) = 0.5.
    """

    def __init__(self, channels: int, reduction_ratio: int = 16):
        super().__init__()
        if channels % reduction_ratio != 0:
            raise ConfigError(f"reduction_ratio {reduction_ratio} must divide channels {channels}")
        hidden = channels // reduction_ratio
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden, bias=False),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels, bias=False),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        avg = features.mean(dim=(2, 3))
        peak = features.amax(dim=(2, 3))
        return torch.sigmoid(self.mlp(avg) + self.mlp(peak))


class SpatialAttention(nn.Module):
    """Per-pixel gate: sigmoid(conv_k([channel-mean F; channel-max F]))."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"spatial kernel must be a positive odd integer, got {kernel_size}")
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        mean_map = features.mean(dim=1, keepdim=True)
        max_map = features.amax(dim=1, keepdim=True)
        stacked = torch.cat([mean_map, max_map], dim=1)
        return torch.sigmoid(self.conv(stacked)).squeeze(1)


class CBAM(nn.Module):
    """Sequential channel-then-spatial multiplicative gating; shape-preserving."""

    def __init__(self, channels: int, reduction_ratio: int = 16, spatial_kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction_ratio)
        self.spatial = SpatialAttention(spatial_kernel)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        refined = features * self.channel(features)[:, :, None, None]
        return refined * self.spatial(refined)[:, None, :, :]


class TinyCNN(nn.Module):
    """4 stride-2 conv stages (16/32/64/128) with BN+ReLU, for desk-scale runs.

    5x5 kernels give a ~61 px receptive field at the final map, enough to
    cover a whole 40-60 px object; 3x3 stops at ~31 px and measurably hurts
    shape discrimination.
    """

    def __init__(self):
        super().__init__()
        stages = []
        in_ch = 3
        for out_ch in (16, 32, 64, 128):
            stages += [
                nn.Conv2d(in_ch, out_ch, 5, stride=2, padding=2, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


def _load_pretrained(net: nn.Module, path: str) -> None:
    state = torch.load(path, map_location="cpu", weights_only=True)
    net.load_state_dict(state, strict=False)


def _build_backbone(config: BackboneConfig) -> nn.Module:
    config.validate()
    if config.family == "tiny_cnn":
        net = TinyCNN()
        if config.pretrained_weights is not None:
            _load_pretrained(net, config.pretrained_weights)
        return net
    from torchvision.models import resnet34

    net = resnet34(weights=None)
    if config.pretrained_weights is not None:
        _load_pretrained(net, config.pretrained_weights)
    return nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool,
        net.layer1, net.layer2, net.layer3, net.layer4,
    )


class Classifier(nn.Module):
    """Backbone -> optional CBAM -> global average pool -> FC logits (5 or 6)."""

    def __init__(self, backbone: BackboneConfig, attention: AttentionConfig, head: HeadConfig):
        super().__init__()
        backbone.validate()
        attention.validate(backbone.feature_channels)
        head.validate()
        self.backbone_config = backbone
        self.attention_config = attention
        self.head_config = head
        self.backbone = _build_backbone(backbone)
        channels = backbone.feature_channels
        self.cbam = (
            CBAM(channels, attention.reduction_ratio, attention.spatial_kernel)
            if attention.enabled
            else None
        )
        self.fc = nn.Linear(channels, head.out_dim)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ConfigError(f"expected input of shape (N, 3, S, S), got {tuple(x.shape)}")
        features = self.backbone(x)
        if self.cbam is not None:
            features = self.cbam(features)
        pooled = features.mean(dim=(2, 3))
        return self.fc(pooled)

    def head_parameters(self):
        """Parameters after the backbone: attention block (if any) and FC."""
        params = list(self.fc.parameters())
        if self.cbam is not None:
            params = list(self.cbam.parameters()) + params
        return params


def build_classifier(
    backbone: BackboneConfig | None = None,
    attention: AttentionConfig | None = None,
    head: HeadConfig | None = None,
) -> Classifier:
    return Classifier(
        backbone or BackboneConfig(),
        attention or AttentionConfig(),
        head or HeadConfig(),
    )


def rescore(logits6: torch.Tensor) -> torch.Tensor:
    """Class probabilities from the 6-logit head: sigmoid(class) * sigmoid(objectness).

    Each output is bounded above by the objectness factor.
    """
    if logits6.shape[-1] != 6:
        raise ConfigError(f"rescore expects 6 logits per row, got {logits6.shape[-1]}")
    conditional = torch.sigmoid(logits6[..., :OBJECTNESS_INDEX])
    objectness = torch.sigmoid(logits6[..., OBJECTNESS_INDEX : OBJECTNESS_INDEX + 1])
    return conditional * objectness


def class_scores(logits: torch.Tensor, head_mode: str) -> torch.Tensor:
    """Per-class probabilities (N, 5) from raw logits under either head."""
    if head_mode == "plain5":
        if logits.shape[-1] != 5:
            raise ConfigError(f"plain5 head expects 5 logits per row, got {logits.shape[-1]}")
        return torch.sigmoid(logits)
    if head_mode == "rescoring6":
        return rescore(logits)
    raise ConfigError(f"unknown head mode {head_mode!r}")


def save_checkpoint(
    path: str | Path,
    model: Classifier,
    config: dict | None = None,
    config_hash: str | None = None,
) -> None:
    """Serialize weights plus the generating config under a versioned schema tag."""
    from dataclasses import asdict

    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "backbone": asdict(model.backbone_config),
        "attention": asdict(model.attention_config),
        "head": asdict(model.head_config),
        "state_dict": model.state_dict(),
        "config": config,
        "config_hash": config_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[Classifier, dict]:
    """Rebuild the model a checkpoint describes and load its weights.

    Returns (model in eval mode, metadata dict with schema/config/config_hash).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint file not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ConfigError(f"not a recognized checkpoint (expected schema {CHECKPOINT_SCHEMA}): {path}")
    backbone = BackboneConfig(**payload["backbone"])
    # Weights are restored from the checkpoint itself.
    backbone.pretrained_weights = None
    model = Classifier(backbone, AttentionConfig(**payload["attention"]), HeadConfig(**payload["head"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {
        "schema": payload["schema"],
        "config": payload.get("config"),
        "config_hash": payload.get("config_hash"),
    }
    return model, meta
