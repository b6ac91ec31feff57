"""Weight generation (intra- and inter-modality fusion) and the full network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from adafusion.attention import AttentionBlock
from adafusion.backbone import Backbone, _conv, global_average_pool, image_stack, init_weights, voxel_stack
from adafusion.errors import ValidationError


@dataclass(frozen=True)
class ModelConfig:
    """Network sizes.

    ``descriptor_dim`` is the length of the fused descriptor; each modality
    contributes half of it (the final backbone width). ``width`` replaces every
    other backbone width when set, which is how the small test models are built.
    """

    descriptor_dim: int = 256
    width: int | None = None
    attn_channels: int = 64
    fused_channels: int = 128
    fc_hidden: tuple[int, ...] = (64, 32)
    adaptive: bool = True

    def __post_init__(self):
        if self.descriptor_dim <= 0 or self.descriptor_dim % 2:
            raise ValidationError(f"descriptor_dim must be a positive even integer, got {self.descriptor_dim}")

    @property
    def c1(self) -> int:
        return self.descriptor_dim // 2

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        kw = dict(descriptor_dim=16, width=8, attn_channels=8, fused_channels=8)
        kw.update(overrides)
        return cls(**kw)


class IntraModalityFusion(nn.Module):
    """Channel-concatenate the per-scale attention maps and mix them with a kernel-1 conv."""

    def __init__(self, in_channels: int, out_channels: int = 128, dims: int = 2):
        super().__init__()
        self.conv = _conv(dims)(in_channels, out_channels, kernel_size=1)

    def forward(self, attn_list: list[torch.Tensor]) -> torch.Tensor:
        sizes = {tuple(a.shape[2:]) for a in attn_list}
        if len(sizes) != 1:
            raise ValidationError(f"attention maps disagree in spatial size: {sorted(sizes)}")
        return self.conv(torch.cat(attn_list, dim=1))


def pool_attention(a_image: torch.Tensor, a_lidar: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return global_average_pool(a_image), global_average_pool(a_lidar)


class WeightHead(nn.Module):
    """FC stack [2*C3, *hidden, 2]: ReLU on hidden layers, sigmoid on the output."""

    def __init__(self, in_features: int = 256, hidden: tuple[int, ...] = (64, 32)):
        super().__init__()
        layers: list[nn.Module] = []
        width = in_features
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers += [nn.Linear(width, 2), nn.Sigmoid()]
        self.mlp = nn.Sequential(*layers)

    def forward(self, a_image: torch.Tensor, a_lidar: torch.Tensor) -> torch.Tensor:
        return self.mlp(torch.cat([a_image, a_lidar], dim=-1))


def weighted_descriptor(f_image: torch.Tensor, f_lidar: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """[alpha_I * f_I, alpha_P * f_P] along the last axis."""
    if f_image.shape != f_lidar.shape:
        raise ValidationError(f"feature shapes differ: {tuple(f_image.shape)} vs {tuple(f_lidar.shape)}")
    return torch.cat([alpha[..., 0:1] * f_image, alpha[..., 1:2] * f_lidar], dim=-1)


class ModelOutput(NamedTuple):
    descriptor: torch.Tensor  # (B, 2*C1)
    alpha: torch.Tensor  # (B, 2): alpha_I, alpha_P
    f_image: torch.Tensor
    f_lidar: torch.Tensor


class AdaFusionNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = self.config = config or ModelConfig()
        self.image_backbone = Backbone(image_stack(cfg.c1, cfg.width))
        self.lidar_backbone = Backbone(voxel_stack(cfg.c1, cfg.width))
        if cfg.adaptive:
            self.image_attention = nn.ModuleList(
                AttentionBlock(c, cfg.attn_channels, 2) for c in self.image_backbone.spec.tap_channels
            )
            self.lidar_attention = nn.ModuleList(
                AttentionBlock(c, cfg.attn_channels, 3) for c in self.lidar_backbone.spec.tap_channels
            )
            self.image_fusion = IntraModalityFusion(3 * cfg.attn_channels, cfg.fused_channels, 2)
            self.lidar_fusion = IntraModalityFusion(3 * cfg.attn_channels, cfg.fused_channels, 3)
            self.weight_head = WeightHead(2 * cfg.fused_channels, cfg.fc_hidden)
        init_weights(self)
        if cfg.adaptive:
            # neutral start: alpha = sigmoid(0) = 0.5 for every input
            nn.init.zeros_(self.weight_head.mlp[-2].weight)
            nn.init.zeros_(self.weight_head.mlp[-2].bias)

    def attention_maps(self, taps: list[torch.Tensor], blocks: nn.ModuleList) -> list[torch.Tensor]:
        target = tuple(taps[-1].shape[2:])
        return [block(tap, target) for block, tap in zip(blocks, taps)]

    def forward(self, image: torch.Tensor, voxels: torch.Tensor) -> ModelOutput:
        m_image, image_taps = self.image_backbone(image)
        m_lidar, lidar_taps = self.lidar_backbone(voxels)
        f_image = global_average_pool(m_image)
        f_lidar = global_average_pool(m_lidar)
        if self.config.adaptive:
            a_image = self.image_fusion(self.attention_maps(image_taps, self.image_attention))
            a_lidar = self.lidar_fusion(self.attention_maps(lidar_taps, self.lidar_attention))
            alpha = self.weight_head(*pool_attention(a_image, a_lidar))
        else:
            alpha = f_image.new_ones(f_image.shape[0], 2)
        return ModelOutput(weighted_descriptor(f_image, f_lidar, alpha), alpha, f_image, f_lidar)
