"""Channel-wise attention, spatial attention and the residual fusion block.

The channel branch pools each channel to its (max, mean) pair, mixes the two
rows with a bank of 2x1 filters, collapses the bank to one row and passes the
resulting C-vector through a bottleneck MLP.  The spatial branch is the usual
max/mean map followed by a 7x7 convolution.  The fusion block gates channels
first, then pixels, runs a 3x3 convolution and adds the block input back.
"""

from __future__ import annotations

import math

import numpy as np

from .core import ops
from .core.nn import Conv2d, Dense, Module
from .core.tensor import Tensor


class ChannelAttention(Module):
    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 4, filters: int = 4):
        self.channels = channels
        hidden = max(1, math.ceil(channels / ratio))
        # 2x1 filters slide over the (2, C) pooled matrix, one column per channel
        self.mix = Conv2d(1, filters, 1, rng, padding=0, kh=2)
        self.collapse = Conv2d(filters, 1, 1, rng, padding=0)
        self.fc1 = Dense(channels, hidden, rng)
        self.fc2 = Dense(hidden, channels, rng)
        # The pooled statistics are non-negative inside the encoder (they follow
        # a ReLU), so signed weights often leave the relu chain dead at init.
        # Non-negative weights with mean 1/fan_in start each stage as a noisy
        # average: every hidden unit is live and the gain stays near one.
        for layer, fan_in in ((self.mix, 2), (self.collapse, filters), (self.fc1, channels)):
            w = layer.weight
            w.data = rng.uniform(0, 2 / fan_in, w.shape).astype(w.dtype)

    def forward(self, x) -> Tensor:
        return channel_attention(x, self)


class SpatialAttention(Module):
    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        self.conv = Conv2d(2, 1, kernel, rng, padding=(kernel - 1) // 2)

    def forward(self, x) -> Tensor:
        return spatial_attention(x, self)


class AttentionFusion(Module):
    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 4, filters: int = 4,
                 spatial_kernel: int = 7):
        self.channel = ChannelAttention(channels, rng, ratio, filters)
        self.spatial = SpatialAttention(rng, spatial_kernel)
        self.tail = Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, x) -> Tensor:
        return attention_fusion(x, self)


def channel_attention(x, p: ChannelAttention) -> Tensor:
    """Per-channel importance weights, shape (N, C), each strictly inside (0, 1)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    n, c = x.shape[:2]
    if c != p.channels:
        raise ValueError(f"channel_attention: input has {c} channels, block was built for {p.channels}")
    pooled = ops.reshape(ops.channel_pool(x), (n, 1, 2, c))
    h = ops.relu(p.mix(pooled))  # (N, f, 1, C)
    h = ops.relu(p.collapse(h))  # (N, 1, 1, C)
    h = ops.relu(p.fc1(ops.reshape(h, (n, c))))
    return ops.sigmoid(p.fc2(h))


def spatial_attention(x, p: SpatialAttention) -> Tensor:
    """Per-pixel importance map, shape (N, 1, H, W), strictly inside (0, 1)."""
    return ops.sigmoid(p.conv(ops.spatial_pool(x)))


def attention_fusion(x, p: AttentionFusion) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    gated = ops.channel_scale(x, channel_attention(x, p.channel))
    gated = ops.spatial_scale(gated, spatial_attention(gated, p.spatial))
    return ops.add(x, p.tail(gated))
