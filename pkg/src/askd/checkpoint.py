"""Versioned single-file checkpoints for backbone + class head."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .backbone import Backbone, BackboneConfig, build_backbone
from .errors import CheckpointError
from .losses import ClassHead

MAGIC = "ASKD-CKPT-v1"


def state_dict_hash(state) -> str:
    """SHA-256 over parameter names and raw tensor bytes, order-stable."""
    if isinstance(state, torch.nn.Module):
        state = state.state_dict()
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode("utf-8"))
        t = state[name].detach().cpu().contiguous()
        h.update(str(t.dtype).encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("utf-8"))
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    """Config echo, seed, parameter tensors, and training-state metadata."""

    backbone_config: BackboneConfig
    seed: int
    backbone_state: dict
    head_state: dict | None = None
    n_classes: int | None = None
    meta: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "magic": MAGIC,
                "backbone_config": self.backbone_config.to_dict(),
                "seed": int(self.seed),
                "backbone_state": self.backbone_state,
                "head_state": self.head_state,
                "n_classes": self.n_classes,
                "meta": self.meta,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
            raise CheckpointError(f"{path} is not a {MAGIC} checkpoint")
        return cls(
            backbone_config=BackboneConfig.from_dict(payload["backbone_config"]),
            seed=int(payload["seed"]),
            backbone_state=payload["backbone_state"],
            head_state=payload.get("head_state"),
            n_classes=payload.get("n_classes"),
            meta=payload.get("meta") or {},
        )

    def build_backbone(self) -> Backbone:
        model = build_backbone(self.backbone_config, self.seed)
        model.load_state_dict(self.backbone_state)
        model.eval()
        return model

    def build_head(self) -> ClassHead | None:
        if self.head_state is None or self.n_classes is None:
            return None
        head = ClassHead(self.backbone_config.embedding_dim, self.n_classes)
        head.load_state_dict(self.head_state)
        head.eval()
        return head

    def backbone_hash(self) -> str:
        return state_dict_hash(self.backbone_state)


def clone_state(module: torch.nn.Module) -> dict:
    """Detached CPU copy of a module's state dict."""
    return {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}
