"""Spatial and channel self-attention over 2D or 3D feature maps.

All functions take batched maps ``(B, C, *spatial)``. Flattening the spatial
axes to ``N`` positions gives ``Q, K, V`` of shape ``(B, C, N)`` and::

    spatial:  S_s = softmax_rows(K^T Q)   (N x N),  out = V S_s^T
    channel:  S_c = softmax_rows(Q K^T)   (C x C),  out = S_c V
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from adafusion.backbone import _conv
from adafusion.errors import ValidationError

# above this many positions the spatial map is built in row chunks
SPATIAL_CHUNK = 4096


def spatial_attention_map(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """(B, N, N) map whose row i is the softmax over j of k_i . q_j."""
    return torch.softmax(k.flatten(2).transpose(1, 2) @ q.flatten(2), dim=-1)


def channel_attention_map(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """(B, C, C) map whose row c is the softmax over c' of q_c . k_c'."""
    return torch.softmax(q.flatten(2) @ k.flatten(2).transpose(1, 2), dim=-1)


def spatial_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    shape = v.shape
    qf, kf, vf = q.flatten(2), k.flatten(2), v.flatten(2)
    n = qf.shape[-1]
    if n <= SPATIAL_CHUNK:
        out = vf @ spatial_attention_map(q, k).transpose(1, 2)
    else:
        # each output column only needs its own row of S_s
        kt = kf.transpose(1, 2)
        cols = []
        for start in range(0, n, SPATIAL_CHUNK):
            rows = torch.softmax(kt[:, start : start + SPATIAL_CHUNK] @ qf, dim=-1)
            cols.append(vf @ rows.transpose(1, 2))
        out = torch.cat(cols, dim=-1)
    return out.reshape(shape)


def channel_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return (channel_attention_map(q, k) @ v.flatten(2)).reshape(v.shape)


class AttentionBlock(nn.Module):
    """Q/K/V projections, spatial + channel attention, kernel-1 fuse, nearest downsample."""

    def __init__(self, channels: int, out_channels: int = 64, dims: int = 2):
        super().__init__()
        conv = _conv(dims)
        self.query = conv(channels, channels, kernel_size=1)
        self.key = conv(channels, channels, kernel_size=1)
        self.value = conv(channels, channels, kernel_size=1)
        self.fuse = conv(2 * channels, out_channels, kernel_size=1)

    def project_qkv(self, tap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.query(tap), self.key(tap), self.value(tap)

    def forward(self, tap: torch.Tensor, target_size: tuple[int, ...] | None = None) -> torch.Tensor:
        q, k, v = self.project_qkv(tap)
        a = torch.cat([spatial_attention(q, k, v), channel_attention(q, k, v)], dim=1)
        a = self.fuse(a)
        if target_size is not None and tuple(a.shape[2:]) != tuple(target_size):
            if any(t > s for t, s in zip(target_size, a.shape[2:])):
                raise ValidationError(f"target size {target_size} exceeds tap size {tuple(a.shape[2:])}")
            a = F.interpolate(a, size=tuple(target_size), mode="nearest")
        return a


def project_qkv(tap: torch.Tensor, block: AttentionBlock):
    return block.project_qkv(tap)
