"""Channel-then-spatial attention gating (CBAM) on top of nncore tensors.

Channel gate: ``sigmoid(MLP(avgpool F) + MLP(maxpool F))`` with one shared
two-layer MLP (C -> C/r -> C, ReLU between, no hidden bias). Spatial gate:
``sigmoid(conv7x7([avg_c F', max_c F']))`` with padding 3 so the map keeps
the H x W extent. Both gates lie strictly inside (0, 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .nncore import ShapeError, Tensor


@dataclass
class CbamParams:
    mlp_w1: Tensor          # C/r x C
    mlp_w2: Tensor          # C x C/r
    reduction: int
    spatial_kernel: Tensor  # 1 x 2 x k x k
    spatial_bias: Tensor    # shape (1,)

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.mlp_w1, self.mlp_w2, self.spatial_kernel, self.spatial_bias]

    @classmethod
    def init(cls, channels: int, reduction: int = 8, kernel_size: int = 7,
             rng: np.random.Generator | None = None) -> "CbamParams":
        if reduction < 1 or channels % reduction:
            raise ShapeError(f"reduction {reduction} must divide channel count {channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = channels // reduction
        w1 = rng.normal(0.0, np.sqrt(2.0 / channels), (hidden, channels))
        w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), (channels, hidden))
        fan_in = 2 * kernel_size * kernel_size
        k = rng.normal(0.0, np.sqrt(1.0 / fan_in), (1, 2, kernel_size, kernel_size))
        return cls(Tensor(w1, True, "cbam.mlp_w1"), Tensor(w2, True, "cbam.mlp_w2"), reduction,
                   Tensor(k, True, "cbam.spatial_kernel"), Tensor(np.zeros(1), True, "cbam.spatial_bias"))

    @classmethod
    def zeros(cls, channels: int, reduction: int = 1, kernel_size: int = 7) -> "CbamParams":
        hidden = channels // reduction
        return cls(Tensor(np.zeros((hidden, channels))), Tensor(np.zeros((channels, hidden))), reduction,
                   Tensor(np.zeros((1, 2, kernel_size, kernel_size))), Tensor(np.zeros(1)))


def _shared_mlp(v: Tensor, p: CbamParams) -> Tensor:
    return nn.linear(nn.relu(nn.linear(v, p.mlp_w1)), p.mlp_w2)


def channel_attention(F: Tensor, p: CbamParams) -> tuple[Tensor, Tensor]:
    """Return the channel-gated map and the gate (C, or N x C for batches)."""
    c_axis = F.data.ndim - 3
    if F.data.ndim not in (3, 4) or F.shape[c_axis] != p.channels:
        raise ShapeError(f"channel_attention: feature map {F.shape} does not match {p.channels} channels")
    logits = nn.add(_shared_mlp(nn.pool(F, "global_avg"), p), _shared_mlp(nn.pool(F, "global_max"), p))
    weights = nn.sigmoid(logits)
    g = nn.reshape(weights, weights.shape + (1, 1))
    return nn.gate(F, g), weights


def spatial_attention(F1: Tensor, p: CbamParams) -> tuple[Tensor, Tensor]:
    """Return the spatially gated map and the gate (1 x H x W, or N x 1 x H x W)."""
    if F1.data.ndim not in (3, 4):
        raise ShapeError(f"spatial_attention expects C x H x W, got {F1.shape}")
    c_axis = F1.data.ndim - 3
    stacked = nn.concat([nn.pool(F1, "channelwise_avg"), nn.pool(F1, "channelwise_max")], axis=c_axis)
    k = p.spatial_kernel.shape[-1]
    smap = nn.sigmoid(nn.conv2d(stacked, p.spatial_kernel, p.spatial_bias, padding=k // 2))
    return nn.gate(F1, smap), smap


def cbam_apply(F: Tensor, p: CbamParams) -> tuple[Tensor, Tensor, Tensor]:
    F1, weights = channel_attention(F, p)
    F2, smap = spatial_attention(F1, p)
    return F2, weights, smap
