"""2D (image) and 3D (voxel) convolutional backbones and global average pooling."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from adafusion.errors import ValidationError


@dataclass(frozen=True)
class ConvStackSpec:
    """Three convolution stages written as token strings.

    ``"C64"`` is a basic block with 64 output channels, ``"B"`` batch norm,
    ``"PM"`` / ``"PA"`` max / average pooling with kernel = stride = 2.
    """

    dims: int
    in_channels: int
    stages: tuple[tuple[str, ...], ...]

    @property
    def out_channels(self) -> int:
        return [int(t[1:]) for s in self.stages for t in s if t.startswith("C")][-1]

    @property
    def tap_channels(self) -> list[int]:
        return [[int(t[1:]) for t in s if t.startswith("C")][-1] for s in self.stages]

    def stage_sizes(self, input_size: tuple[int, ...]) -> list[tuple[int, ...]]:
        """Spatial size after each stage (pooling floors odd extents)."""
        sizes, size = [], tuple(input_size)
        for stage in self.stages:
            for tok in stage:
                if tok.startswith("P"):
                    size = tuple(s // 2 for s in size)
            sizes.append(size)
        return sizes

    @property
    def total_stride(self) -> int:
        return 2 ** sum(tok.startswith("P") for s in self.stages for tok in s)


def image_stack(c1: int = 128, width: int | None = None) -> ConvStackSpec:
    """Conv2d_1 = C64 PM C64 PM, Conv2d_2 = C64 C128 PM, Conv2d_3 = C128 C128 B PM.

    ``c1`` sets the last block's width; ``width`` overrides every other width.
    """
    a, b = (64, 128) if width is None else (width, width)
    return ConvStackSpec(2, 3, (
        (f"C{a}", "PM", f"C{a}", "PM"),
        (f"C{a}", f"C{b}", "PM"),
        (f"C{b}", f"C{c1}", "B", "PM"),
    ))


def voxel_stack(c1: int = 128, width: int | None = None) -> ConvStackSpec:
    """Conv3d_1 = C32 PA, Conv3d_2 = C64 C64 PA, Conv3d_3 = C128 B PA."""
    a, b = (32, 64) if width is None else (width, width)
    return ConvStackSpec(3, 1, (
        (f"C{a}", "PA"),
        (f"C{b}", f"C{b}", "PA"),
        (f"C{c1}", "B", "PA"),
    ))


def _conv(dims: int):
    return {2: nn.Conv2d, 3: nn.Conv3d}[dims]


class BasicBlock(nn.Module):
    """(3-kernel conv, stride 1, pad 1) -> ReLU, twice. Spatial size is preserved."""

    def __init__(self, in_channels: int, out_channels: int, dims: int = 2):
        super().__init__()
        conv = _conv(dims)
        self.in_channels = in_channels
        self.conv1 = conv(in_channels, out_channels, kernel_size=3, stride=1, padding=1)
        self.conv2 = conv(out_channels, out_channels, kernel_size=3, stride=1, padding=1)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValidationError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return self.act(self.conv2(self.act(self.conv1(x))))


def _build_stage(tokens: tuple[str, ...], in_ch: int, dims: int) -> tuple[nn.Sequential, int]:
    layers: list[nn.Module] = []
    ch = in_ch
    for tok in tokens:
        if tok.startswith("C"):
            layers.append(BasicBlock(ch, int(tok[1:]), dims))
            ch = int(tok[1:])
        elif tok == "B":
            layers.append({2: nn.BatchNorm2d, 3: nn.BatchNorm3d}[dims](ch))
        elif tok == "PM":
            layers.append({2: nn.MaxPool2d, 3: nn.MaxPool3d}[dims](kernel_size=2, stride=2))
        elif tok == "PA":
            layers.append({2: nn.AvgPool2d, 3: nn.AvgPool3d}[dims](kernel_size=2, stride=2))
        else:
            raise ValidationError(f"unknown stack token {tok!r}")
    return nn.Sequential(*layers), ch


def init_weights(module: nn.Module) -> None:
    """He-uniform conv/linear weights, zero biases, BN gamma=1 beta=0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Runs the three stages and returns the final local map plus one tap per stage."""

    def __init__(self, spec: ConvStackSpec):
        super().__init__()
        self.spec = spec
        stages, ch = [], spec.in_channels
        for tokens in spec.stages:
            stage, ch = _build_stage(tokens, ch, spec.dims)
            stages.append(stage)
        self.stages = nn.ModuleList(stages)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        spec = self.spec
        if x.dim() != spec.dims + 2 or x.shape[1] != spec.in_channels:
            raise ValidationError(
                f"expected input (B, {spec.in_channels}, <{spec.dims} spatial dims>), got {tuple(x.shape)}"
            )
        if min(x.shape[2:]) < spec.total_stride:
            raise ValidationError(f"input spatial size {tuple(x.shape[2:])} smaller than total pooling {spec.total_stride}")
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return x, taps


def global_average_pool(m: torch.Tensor) -> torch.Tensor:
    """(B, C, *spatial) -> (B, C): per-channel mean over every spatial position."""
    return m.flatten(2).mean(dim=-1)
