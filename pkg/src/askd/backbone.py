"""Residual feature extractor with attention gates at configurable sites.

Teacher and student are built from the same config, so their tap lists
match site for site and shape for shape, which is what makes map-wise
distillation well defined.  The stem convolution and all 1x1 convolutions
never carry attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
from torch import nn
import torch.nn.functional as F

from .attention import CBAM, CHANNEL, SPATIAL, AttentionTap
from .errors import ConfigError, DimensionError

ALL_ELIGIBLE_CONVS = "all_eligible_convs"
PER_BLOCK = "per_block"
_POLICIES = (ALL_ELIGIBLE_CONVS, PER_BLOCK)


@dataclass(frozen=True)
class BackboneConfig:
    stage_widths: tuple = (64, 128, 256, 512)
    blocks_per_stage: tuple = (3, 4, 6, 3)
    embedding_dim: int = 512
    attention_site_policy: str = ALL_ELIGIBLE_CONVS
    input_size: int = 112

    def __post_init__(self):
        widths = tuple(int(w) for w in self.stage_widths)
        blocks = tuple(int(b) for b in self.blocks_per_stage)
        object.__setattr__(self, "stage_widths", widths)
        object.__setattr__(self, "blocks_per_stage", blocks)
        if not widths or len(widths) != len(blocks):
            raise ConfigError(
                "stage_widths and blocks_per_stage must be non-empty and equal-length"
            )
        if any(w < 1 for w in widths) or any(b < 1 for b in blocks):
            raise ConfigError("stage widths and block counts must be positive")
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be positive, got {self.embedding_dim}")
        if self.attention_site_policy not in _POLICIES:
            raise ConfigError(
                f"attention_site_policy must be one of {_POLICIES}, "
                f"got {self.attention_site_policy!r}"
            )
        if self.input_size < 2 ** len(widths):
            raise ConfigError(
                f"input_size {self.input_size} too small for {len(widths)} stages"
            )

    @classmethod
    def toy(cls) -> "BackboneConfig":
        """Desk-scale two-stage variant (~100k parameters) for 32px inputs."""
        return cls(
            stage_widths=(24, 48),
            blocks_per_stage=(2, 2),
            embedding_dim=64,
            input_size=32,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            stage_widths=tuple(d["stage_widths"]),
            blocks_per_stage=tuple(d["blocks_per_stage"]),
            embedding_dim=int(d["embedding_dim"]),
            attention_site_policy=str(d["attention_site_policy"]),
            input_size=int(d["input_size"]),
        )


def enumerate_sites(config: BackboneConfig) -> list:
    """Ordered (site_id, kind) pairs the forward pass will emit.

    Deterministic in the config alone, so teacher and student builds agree.
    """
    sites = []
    for si, blocks in enumerate(config.blocks_per_stage, start=1):
        for bi in range(1, blocks + 1):
            prefix = f"stage{si}.block{bi}"
            if config.attention_site_policy == ALL_ELIGIBLE_CONVS:
                ids = [f"{prefix}.conv1", f"{prefix}.conv2"]
            else:
                ids = [prefix]
            for sid in ids:
                sites.append((sid, CHANNEL))
                sites.append((sid, SPATIAL))
    return sites


def site_ids(config: BackboneConfig) -> list:
    """Unique site ids in emission order."""
    seen = []
    for sid, _ in enumerate_sites(config):
        if sid not in seen:
            seen.append(sid)
    return seen


class ResidualBlock(nn.Module):
    """Two 3x3 convs with identity/projection shortcut and attention gates.

    Under the per-conv policy each 3x3 conv is followed by its own gate
    pair; under the per-block policy a single gate pair sits on the block
    output.  The 1x1 projection shortcut never carries attention.
    """

    def __init__(self, in_ch, out_ch, stride, policy, site_prefix):
        super().__init__()
        self.site_prefix = site_prefix
        self.policy = policy
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()
        if policy == ALL_ELIGIBLE_CONVS:
            self.cbam1 = CBAM(out_ch)
            self.cbam2 = CBAM(out_ch)
        else:
            self.cbam = CBAM(out_ch)

    def forward(self, x, taps: list):
        y = F.relu(self.bn1(self.conv1(x)))
        if self.policy == ALL_ELIGIBLE_CONVS:
            y, gc, gs = self.cbam1(y)
            sid = f"{self.site_prefix}.conv1"
            taps.append(AttentionTap(sid, CHANNEL, gc))
            taps.append(AttentionTap(sid, SPATIAL, gs))
        y = self.bn2(self.conv2(y))
        if self.policy == ALL_ELIGIBLE_CONVS:
            y, gc, gs = self.cbam2(y)
            sid = f"{self.site_prefix}.conv2"
            taps.append(AttentionTap(sid, CHANNEL, gc))
            taps.append(AttentionTap(sid, SPATIAL, gs))
        y = F.relu(y + self.shortcut(x))
        if self.policy == PER_BLOCK:
            y, gc, gs = self.cbam(y)
            taps.append(AttentionTap(self.site_prefix, CHANNEL, gc))
            taps.append(AttentionTap(self.site_prefix, SPATIAL, gs))
        return y


@dataclass
class ForwardResult:
    embedding: torch.Tensor
    taps: list = field(default_factory=list)

    @property
    def logits_features(self) -> torch.Tensor:
        """Embedding before L2 normalization (normalization happens in the loss)."""
        return self.embedding


class Backbone(nn.Module):
    """Stem conv, residual stages (stride 2 each), global pooling, embedding."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        w0 = config.stage_widths[0]
        self.stem = nn.Conv2d(3, w0, 3, stride=1, padding=1, bias=False)
        self.stem_bn = nn.BatchNorm2d(w0)
        blocks = []
        in_ch = w0
        for si, (width, n_blocks) in enumerate(
            zip(config.stage_widths, config.blocks_per_stage), start=1
        ):
            for bi in range(1, n_blocks + 1):
                stride = 2 if bi == 1 else 1
                blocks.append(
                    ResidualBlock(
                        in_ch, width, stride,
                        config.attention_site_policy,
                        f"stage{si}.block{bi}",
                    )
                )
                in_ch = width
        self.blocks = nn.ModuleList(blocks)
        self.embed = nn.Linear(in_ch, config.embedding_dim)
        self.sites = enumerate_sites(config)

    def forward(self, x: torch.Tensor) -> ForwardResult:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.size(1) != 3:
            raise DimensionError(f"expected (B,3,H,W) input, got shape {tuple(x.shape)}")
        if x.size(2) != self.config.input_size or x.size(3) != self.config.input_size:
            raise DimensionError(
                f"expected {self.config.input_size}px input, got {x.size(2)}x{x.size(3)}"
            )
        taps: list = []
        y = F.relu(self.stem_bn(self.stem(x)))
        for block in self.blocks:
            y = block(y, taps)
        pooled = y.mean(dim=(2, 3))
        emb = self.embed(pooled)
        return ForwardResult(embedding=emb, taps=taps)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic re-initialization from a fan-in-scaled uniform distribution."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_backbone(config: BackboneConfig, seed: int) -> Backbone:
    """Construct a backbone with parameters seeded deterministically."""
    model = Backbone(config)
    init_parameters(model, seed)
    return model
