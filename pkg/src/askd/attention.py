"""Channel and spatial attention blocks with their maps exposed as taps.

A feature map is refined twice: first scaled per channel by a sigmoid gate
computed from pooled channel descriptors through a shared two-layer MLP,
then scaled per pixel by a sigmoid gate computed by a 7x7 convolution over
channel-pooled maps.  Both gates are recorded so a student network can be
trained to match a teacher's gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError

CHANNEL = "channel"
SPATIAL = "spatial"


@dataclass
class AttentionTap:
    """One recorded attention map: channel (B,C,1,1) or spatial (B,1,H,W)."""

    site_id: str
    kind: str
    map: torch.Tensor


def pick_reduction(channels: int, preferred: int = 16) -> int:
    """Reduction ratio for the channel MLP: 16 when it divides C, else ~C/4."""
    if channels >= preferred and channels % preferred == 0:
        return preferred
    r = max(1, channels // 4)
    while channels % r:
        r -= 1
    return r


class ChannelAttention(nn.Module):
    """Per-channel sigmoid gate from average- and max-pooled descriptors.

    The two fully connected layers are shared between the pooling branches;
    a ReLU sits between them.
    """

    def __init__(self, channels: int, reduction: int | None = None):
        super().__init__()
        if reduction is None:
            reduction = pick_reduction(channels)
        if reduction < 1 or channels % reduction:
            raise DimensionError(
                f"reduction {reduction} must divide channel count {channels}"
            )
        self.channels = channels
        self.reduction = reduction
        self.fc1 = nn.Linear(channels, channels // reduction, bias=False)
        self.fc2 = nn.Linear(channels // reduction, channels, bias=False)

    def _mlp(self, pooled):
        return self.fc2(F.relu(self.fc1(pooled)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise DimensionError(f"expected (B,C,H,W), got shape {tuple(x.shape)}")
        if x.size(1) != self.channels:
            raise DimensionError(
                f"expected {self.channels} channels, got {x.size(1)}"
            )
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        gate = torch.sigmoid(self._mlp(avg) + self._mlp(mx))
        return gate[:, :, None, None]


class SpatialAttention(nn.Module):
    """Per-pixel sigmoid gate from a 7x7 conv over channel-pooled maps.

    Input to the convolution is the 2-channel concatenation of the
    channel-wise average and max maps; zero padding of 3 preserves HxW.
    """

    KERNEL_SIZE = 7
    PADDING = 3

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, self.KERNEL_SIZE, padding=self.PADDING, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise DimensionError(f"expected (B,C,H,W), got shape {tuple(x.shape)}")
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


def _batched(f: torch.Tensor):
    if f.dim() == 3:
        return f.unsqueeze(0), True
    if f.dim() == 4:
        return f, False
    raise DimensionError(f"expected a 3-D or 4-D feature map, got shape {tuple(f.shape)}")


def channel_attention(f: torch.Tensor, module: ChannelAttention) -> torch.Tensor:
    """Channel gate for a (C,H,W) or (B,C,H,W) feature map."""
    f4, squeeze = _batched(f)
    out = module(f4)
    return out.squeeze(0) if squeeze else out


def spatial_attention(f: torch.Tensor, module: SpatialAttention) -> torch.Tensor:
    """Spatial gate for a (C,H,W) or (B,C,H,W) feature map."""
    f4, squeeze = _batched(f)
    out = module(f4)
    return out.squeeze(0) if squeeze else out


def refine(f, channel_module, spatial_module, site_id: str = ""):
    """Apply both gates in order and return the refined map plus its taps.

    The channel gate is computed on the raw input; the spatial gate is
    computed on the channel-refined map, never on the raw input.
    """
    f4, squeeze = _batched(f)
    gate_c = channel_module(f4)
    f_prime = gate_c * f4
    gate_s = spatial_module(f_prime)
    f_second = gate_s * f_prime
    if squeeze:
        f_second = f_second.squeeze(0)
        gate_c = gate_c.squeeze(0)
        gate_s = gate_s.squeeze(0)
    taps = (
        AttentionTap(site_id, CHANNEL, gate_c),
        AttentionTap(site_id, SPATIAL, gate_s),
    )
    return f_second, taps


class CBAM(nn.Module):
    """Channel then spatial refinement; forward returns (refined, gate_c, gate_s)."""

    def __init__(self, channels: int, reduction: int | None = None):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention()

    def forward(self, x: torch.Tensor):
        gate_c = self.channel(x)
        x = gate_c * x
        gate_s = self.spatial(x)
        x = gate_s * x
        return x, gate_c, gate_s
