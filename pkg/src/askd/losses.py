"""Training objectives: margin softmax, attention-map distillation, logit KD.

All functions are pure given their inputs and differentiable end to end.
Cosine values are clamped to [-1+eps, 1-eps] before arccos, with eps one
machine epsilon of the working dtype (~1e-7 in float32) so the guard never
drowns the margin itself; vectors that must be normalized raise instead of
silently dividing by ~0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .attention import CHANNEL, SPATIAL
from .errors import (
    AlignmentError,
    ConfigError,
    DimensionError,
    NormalizationError,
)

NORM_EPS = 1e-12


def _cos_eps(dtype) -> float:
    return float(torch.finfo(dtype).eps)


@dataclass(frozen=True)
class MarginConfig:
    """Re-scale factor s and additive angular margin m (radians)."""

    scale_s: float = 64.0
    margin_m: float = 0.5

    def __post_init__(self):
        if not self.scale_s > 0:
            raise ConfigError(f"scale_s must be > 0, got {self.scale_s}")
        if not (0.0 <= self.margin_m < math.pi / 2):
            raise ConfigError(
                f"margin_m must lie in [0, pi/2), got {self.margin_m}"
            )


@dataclass(frozen=True)
class DistillConfig:
    """Weights and site selection for the distillation terms."""

    lambda_distill: float = 5.0
    sites: tuple | None = None  # None = every enumerated site
    use_logit_kd: bool = False
    kd_temperature: float = 4.0
    kd_weight: float = 1.0

    def __post_init__(self):
        if self.lambda_distill < 0:
            raise ConfigError(f"lambda_distill must be >= 0, got {self.lambda_distill}")
        if not self.kd_temperature > 0:
            raise ConfigError(f"kd_temperature must be > 0, got {self.kd_temperature}")
        if self.kd_weight < 0:
            raise ConfigError(f"kd_weight must be >= 0, got {self.kd_weight}")
        if self.sites is not None:
            object.__setattr__(self, "sites", tuple(str(s) for s in self.sites))

    @property
    def active(self) -> bool:
        return self.lambda_distill > 0 or self.use_logit_kd


@dataclass
class LossBreakdown:
    target_loss: object
    distill_loss: object
    logit_kd_loss: object
    total: object
    per_site_rho: dict = field(default_factory=dict)

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(
            target_loss=_scalar(self.target_loss),
            distill_loss=_scalar(self.distill_loss),
            logit_kd_loss=_scalar(self.logit_kd_loss),
            total=_scalar(self.total),
            per_site_rho={k: (_scalar(c), _scalar(s)) for k, (c, s) in self.per_site_rho.items()},
        )


def _scalar(x) -> float:
    if isinstance(x, torch.Tensor):
        return float(x.detach())
    return float(x)


class ClassHead(nn.Module):
    """Bias-free classifier whose logits are cosines of embedding/class angles.

    The weight matrix is d x n with one column per class; both the columns
    and the incoming embeddings are L2-normalized at use time.
    """

    def __init__(self, embedding_dim: int, n_classes: int):
        super().__init__()
        if embedding_dim < 1 or n_classes < 1:
            raise ConfigError("embedding_dim and n_classes must be positive")
        self.embedding_dim = embedding_dim
        self.n_classes = n_classes
        self.weight = nn.Parameter(torch.empty(embedding_dim, n_classes))

    def cosines(self, embeddings: torch.Tensor) -> torch.Tensor:
        if embeddings.dim() != 2 or embeddings.size(1) != self.embedding_dim:
            raise DimensionError(
                f"expected (B,{self.embedding_dim}) embeddings, got {tuple(embeddings.shape)}"
            )
        x = _l2_normalize(embeddings, dim=1, what="embedding")
        w = _l2_normalize(self.weight, dim=0, what="class weight column")
        return x @ w


def build_head(embedding_dim: int, n_classes: int, seed: int) -> ClassHead:
    head = ClassHead(embedding_dim, n_classes)
    gen = torch.Generator().manual_seed(int(seed))
    bound = 1.0 / math.sqrt(embedding_dim)
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=gen)
    return head


def _l2_normalize(t: torch.Tensor, dim: int, what: str) -> torch.Tensor:
    norms = t.norm(dim=dim, keepdim=True)
    if bool((norms < NORM_EPS).any()):
        raise NormalizationError(f"cannot L2-normalize a zero-norm {what}")
    return t / norms


def _check_labels_tensor(labels, n_classes: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() != 1:
        raise DimensionError(f"expected 1-D labels, got shape {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise DimensionError(f"labels must lie in [0, {n_classes})")
    return labels


def normalized_softmax_loss(embeddings, labels, head: ClassHead, s: float) -> torch.Tensor:
    """Mean negative log-softmax of scaled cosine logits at the true class."""
    if not s > 0:
        raise ConfigError(f"scale s must be > 0, got {s}")
    labels = _check_labels_tensor(labels, head.n_classes)
    logits = s * head.cosines(embeddings)
    return F.cross_entropy(logits, labels)


def arcface_loss(embeddings, labels, head: ClassHead, cfg: MarginConfig) -> torch.Tensor:
    """Margin softmax: the true-class logit becomes s*cos(theta + m).

    With m = 0 this reduces exactly to the normalized softmax loss.
    """
    labels = _check_labels_tensor(labels, head.n_classes)
    cos = head.cosines(embeddings)
    target_cos = cos.gather(1, labels[:, None]).squeeze(1)
    eps = _cos_eps(cos.dtype)
    theta = torch.acos(torch.clamp(target_cos, -1.0 + eps, 1.0 - eps))
    margin_cos = torch.cos(theta + cfg.margin_m)
    onehot = F.one_hot(labels, head.n_classes).to(dtype=torch.bool)
    logits = cfg.scale_s * torch.where(onehot, margin_cos[:, None].expand_as(cos), cos)
    return F.cross_entropy(logits, labels)


def attention_cosine_distance(map_t: torch.Tensor, map_s: torch.Tensor) -> torch.Tensor:
    """1 minus the cosine of the flattened maps; 0 iff positive scalar multiples."""
    map_t = torch.as_tensor(map_t)
    map_s = torch.as_tensor(map_s)
    if map_t.shape != map_s.shape:
        raise DimensionError(
            f"attention maps differ in shape: {tuple(map_t.shape)} vs {tuple(map_s.shape)}"
        )
    a = map_t.reshape(-1)
    b = map_s.reshape(-1)
    na = a.norm()
    nb = b.norm()
    if float(na) < NORM_EPS or float(nb) < NORM_EPS:
        raise NormalizationError("cosine distance undefined for zero attention map")
    return 1.0 - torch.dot(a / na, b / nb)


def _per_element_cosine_distance(map_t: torch.Tensor, map_s: torch.Tensor) -> torch.Tensor:
    """Cosine distance per batch element over the flattened map, shape (B,)."""
    a = map_t.reshape(map_t.size(0), -1)
    b = map_s.reshape(map_s.size(0), -1)
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    if bool((na < NORM_EPS).any()) or bool((nb < NORM_EPS).any()):
        raise NormalizationError("cosine distance undefined for zero attention map")
    return 1.0 - (a * b).sum(dim=1) / (na * nb)


def _index_taps(taps) -> dict:
    index = {}
    for tap in taps:
        index[(tap.site_id, tap.kind)] = tap.map
    return index


def distill_loss(taps_t, taps_s, sites=None):
    """Sum over sites of the mean of channel and spatial cosine distances.

    Distances are computed per batch element over the flattened map, then
    batch-averaged.  Returns the scalar loss and a per-site
    {site: (rho_channel, rho_spatial)} breakdown for logging.
    """
    t_index = _index_taps(taps_t)
    s_index = _index_taps(taps_s)
    if sites is None:
        sites = []
        for tap in taps_t:
            if tap.site_id not in sites:
                sites.append(tap.site_id)
    if not sites:
        raise AlignmentError("no sites to distill")
    total = None
    per_site = {}
    for sid in sites:
        rhos = {}
        for kind in (CHANNEL, SPATIAL):
            key = (sid, kind)
            if key not in t_index or key not in s_index:
                raise AlignmentError(f"missing {kind} attention tap for site {sid!r}")
            mt = t_index[key]
            ms = s_index[key]
            if mt.shape != ms.shape:
                raise AlignmentError(
                    f"site {sid!r} {kind} maps differ in shape: "
                    f"{tuple(mt.shape)} vs {tuple(ms.shape)}"
                )
            if mt.dim() == 3:  # unbatched tap
                mt = mt.unsqueeze(0)
                ms = ms.unsqueeze(0)
            rhos[kind] = _per_element_cosine_distance(mt, ms).mean()
        site_term = (rhos[CHANNEL] + rhos[SPATIAL]) / 2.0
        total = site_term if total is None else total + site_term
        per_site[sid] = (rhos[CHANNEL], rhos[SPATIAL])
    return total, per_site


def logit_kd_loss(logits_t, logits_s, temperature: float) -> torch.Tensor:
    """Temperature-scaled KL(teacher || student), batch-averaged, times T^2."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    logits_t = torch.as_tensor(logits_t)
    logits_s = torch.as_tensor(logits_s)
    if logits_t.shape != logits_s.shape:
        raise DimensionError(
            f"logit shapes differ: {tuple(logits_t.shape)} vs {tuple(logits_s.shape)}"
        )
    if logits_t.dim() == 1:
        logits_t = logits_t.unsqueeze(0)
        logits_s = logits_s.unsqueeze(0)
    log_pt = F.log_softmax(logits_t / temperature, dim=1)
    log_ps = F.log_softmax(logits_s / temperature, dim=1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=1).mean()
    return kl * (temperature ** 2)


def total_loss(target, distill, kd, cfg: DistillConfig) -> LossBreakdown:
    """Weighted combination of the target, distillation, and KD terms."""
    total = target + cfg.lambda_distill * distill
    if cfg.use_logit_kd:
        total = total + cfg.kd_weight * kd
    return LossBreakdown(
        target_loss=target,
        distill_loss=distill,
        logit_kd_loss=kd,
        total=total,
    )
