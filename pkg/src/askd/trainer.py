"""Teacher/student optimization loops with the piecewise-constant lr schedule.

The teacher trains on HR images alone.  The student trains on LR images
while a frozen teacher sees the paired HR images; the student's loss adds
weighted attention-map distances (and optionally logit KD) to the margin
loss.  Both paths share one loop, so a student with distillation disabled
is bit-identical to a teacher trained on the same inputs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch.optim import SGD

from .backbone import Backbone, BackboneConfig, build_backbone, enumerate_sites, site_ids
from .checkpoint import Checkpoint, clone_state, state_dict_hash
from .data import images_to_tensor, load_image_stack
from .errors import AlignmentError, ConfigError, TrainingError
from .losses import (
    ClassHead,
    DistillConfig,
    MarginConfig,
    arcface_loss,
    build_head,
    distill_loss,
    logit_kd_loss,
    total_loss,
)
from .validation import check_image_batch, check_labels

LOG_FIELDS = (
    "epoch", "step", "lr",
    "target_loss", "distill_loss", "logit_kd_loss", "total_loss",
    "per_site_rho", "wall_time",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    base_lr: float = 0.1
    lr_decay_epochs: tuple = (6, 11, 15, 17)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    margin: MarginConfig = field(default_factory=MarginConfig)
    distill: DistillConfig | None = None
    val_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        decays = self.lr_decay_epochs
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing, got {decays}")
        if decays and (decays[0] < 0 or decays[-1] >= self.epochs):
            raise ConfigError(
                f"lr_decay_epochs must lie in [0, epochs), got {decays} for {self.epochs} epochs"
            )
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    @classmethod
    def paper_default(cls) -> "TrainConfig":
        return cls()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        if self.distill is not None and self.distill.sites is not None:
            d["distill"]["sites"] = list(self.distill.sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        margin = MarginConfig(**d.get("margin", {}))
        distill = None
        if d.get("distill") is not None:
            dd = dict(d["distill"])
            if dd.get("sites") is not None:
                dd["sites"] = tuple(dd["sites"])
            distill = DistillConfig(**dd)
        return cls(
            epochs=int(d["epochs"]),
            batch_size=int(d["batch_size"]),
            base_lr=float(d["base_lr"]),
            lr_decay_epochs=tuple(d["lr_decay_epochs"]),
            lr_decay_factor=float(d["lr_decay_factor"]),
            momentum=float(d["momentum"]),
            weight_decay=float(d["weight_decay"]),
            seed=int(d["seed"]),
            margin=margin,
            distill=distill,
            val_fraction=float(d.get("val_fraction", 0.0)),
        )


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Schedule value: base_lr * factor^(decay epochs passed), decimal-exact."""
    if not (0 <= epoch < cfg.epochs):
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    k = sum(1 for d in cfg.lr_decay_epochs if d <= epoch)
    return float(Decimal(str(cfg.base_lr)) * Decimal(str(cfg.lr_decay_factor)) ** k)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    lr: float
    target_loss: float
    distill_loss: float
    logit_kd_loss: float
    total_loss: float
    per_site_rho: dict
    wall_time: float

    def to_json(self) -> str:
        row = {f: getattr(self, f) for f in LOG_FIELDS}
        row["per_site_rho"] = {k: list(v) for k, v in self.per_site_rho.items()}
        return json.dumps(row)

    @classmethod
    def from_json(cls, line: str) -> "TrainLogRecord":
        row = json.loads(line)
        row["per_site_rho"] = {k: tuple(v) for k, v in row["per_site_rho"].items()}
        return cls(**row)


def read_train_log(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [TrainLogRecord.from_json(line) for line in lines if line.strip()]


def _split_identities(labels: np.ndarray, val_fraction: float, seed: int):
    """Identity-level holdout; train labels are remapped to be contiguous."""
    classes = np.unique(labels)
    if val_fraction <= 0:
        return np.arange(labels.size), np.array([], dtype=int), classes
    rng = np.random.default_rng([int(seed), 0x5EED])
    order = rng.permutation(classes)
    n_val = int(np.floor(val_fraction * classes.size))
    if classes.size - n_val < 2:
        raise TrainingError(
            f"val_fraction {val_fraction} leaves fewer than 2 training identities"
        )
    val_classes = set(order[:n_val].tolist())
    val_mask = np.isin(labels, list(val_classes))
    train_classes = np.array(sorted(set(classes.tolist()) - val_classes))
    return np.where(~val_mask)[0], np.where(val_mask)[0], train_classes


def _val_separation(backbone: Backbone, x_val: torch.Tensor, y_val: np.ndarray, seed: int) -> float:
    """Mean same-identity minus mean cross-identity cosine over sampled pairs."""
    backbone.eval()
    with torch.no_grad():
        emb = backbone(x_val).embedding
    emb = torch.nn.functional.normalize(emb, dim=1).numpy()
    rng = np.random.default_rng([int(seed), 0xA11])
    n = len(y_val)
    same, diff = [], []
    for _ in range(min(4 * n, 512)):
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        sim = float(emb[i] @ emb[j])
        (same if y_val[i] == y_val[j] else diff).append(sim)
    if not same or not diff:
        return float("nan")
    return float(np.mean(same) - np.mean(diff))


class _TeacherContext:
    """Frozen teacher modules plus the sites the student must match."""

    def __init__(self, backbone: Backbone, head: ClassHead | None, margin: MarginConfig):
        self.backbone = backbone.eval()
        self.head = head.eval() if head is not None else None
        self.margin = margin
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        if self.head is not None:
            for p in self.head.parameters():
                p.requires_grad_(False)


def _resolve_teacher(teacher) -> tuple:
    """Accept a fitted estimator, a Checkpoint, or a checkpoint path."""
    if teacher is None:
        return None
    if isinstance(teacher, (str, Path)):
        teacher = Checkpoint.load(teacher)
    if isinstance(teacher, Checkpoint):
        backbone = teacher.build_backbone()
        head = teacher.build_head()
        margin = MarginConfig(**teacher.meta.get("margin", {})) if teacher.meta.get("margin") else MarginConfig()
        return _TeacherContext(backbone, head, margin), teacher.backbone_config
    if hasattr(teacher, "backbone_") and hasattr(teacher, "head_"):
        margin = teacher.train_config_.margin
        return (
            _TeacherContext(teacher.backbone_, teacher.head_, margin),
            teacher.backbone_config_,
        )
    raise ConfigError(f"cannot interpret teacher of type {type(teacher).__name__}")


def _run_loop(
    x: torch.Tensor,
    y: torch.Tensor,
    backbone_cfg: BackboneConfig,
    cfg: TrainConfig,
    *,
    teacher: _TeacherContext | None = None,
    x_teacher: torch.Tensor | None = None,
    distill_cfg: DistillConfig | None = None,
    log_sink=None,
    x_val: torch.Tensor | None = None,
    y_val: np.ndarray | None = None,
):
    n_classes = int(y.max()) + 1
    backbone = build_backbone(backbone_cfg, cfg.seed)
    head = build_head(backbone_cfg.embedding_dim, n_classes, cfg.seed + 1)
    opt = SGD(
        list(backbone.parameters()) + list(head.parameters()),
        lr=cfg.base_lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )

    sites = None
    if distill_cfg is not None:
        sites = list(distill_cfg.sites) if distill_cfg.sites is not None else site_ids(backbone_cfg)
        known = set(site_ids(backbone_cfg))
        unknown = [s for s in sites if s not in known]
        if unknown:
            raise ConfigError(f"distill sites not in backbone: {unknown}")

    distill_active = distill_cfg is not None and distill_cfg.lambda_distill > 0
    kd_active = distill_cfg is not None and distill_cfg.use_logit_kd
    log_rho = teacher is not None  # diagnostic rho even when lambda = 0
    if (distill_active or kd_active) and teacher is None:
        raise ConfigError("distillation requires a teacher")
    if teacher is not None and x_teacher is None:
        raise ConfigError("a teacher context requires paired teacher inputs")

    records = []
    zero = torch.zeros(())
    t0 = time.perf_counter()
    val_history = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = np.random.default_rng([int(cfg.seed), epoch]).permutation(len(y))
        backbone.train()
        head.train()
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            xb = x[idx]
            yb = y[idx]
            result = backbone(xb)
            target = arcface_loss(result.embedding, yb, head, cfg.margin)

            dloss, kd, per_site = zero, zero, {}
            if teacher is not None:
                with torch.no_grad():
                    t_result = teacher.backbone(x_teacher[idx])
                if distill_active:
                    dloss, per_site_t = distill_loss(t_result.taps, result.taps, sites)
                    per_site = {k: (float(c.detach()), float(s.detach())) for k, (c, s) in per_site_t.items()}
                elif log_rho:
                    with torch.no_grad():
                        _, per_site_t = distill_loss(
                            t_result.taps,
                            [tap.__class__(tap.site_id, tap.kind, tap.map.detach()) for tap in result.taps],
                            sites or site_ids(backbone_cfg),
                        )
                    per_site = {k: (float(c), float(s)) for k, (c, s) in per_site_t.items()}
                if kd_active:
                    with torch.no_grad():
                        t_logits = teacher.margin.scale_s * teacher.head.cosines(t_result.embedding)
                    s_logits = cfg.margin.scale_s * head.cosines(result.embedding)
                    kd = logit_kd_loss(t_logits, s_logits, distill_cfg.kd_temperature)

            breakdown = total_loss(target, dloss, kd, distill_cfg or DistillConfig(lambda_distill=0.0))
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()

            rec = TrainLogRecord(
                epoch=epoch,
                step=step,
                lr=lr,
                target_loss=float(target.detach()),
                distill_loss=float(dloss.detach()),
                logit_kd_loss=float(kd.detach()),
                total_loss=float(breakdown.total.detach()),
                per_site_rho=per_site,
                wall_time=time.perf_counter() - t0,
            )
            records.append(rec)
            if log_sink is not None:
                log_sink.write(rec.to_json() + "\n")
            step += 1
        if x_val is not None and len(y_val):
            val_history.append(
                {"epoch": epoch, "val_separation": _val_separation(backbone, x_val, y_val, cfg.seed)}
            )
    backbone.eval()
    head.eval()
    return backbone, head, records, val_history


class _RecognizerBase(BaseEstimator):
    def _prepare(self, X, y):
        X = check_image_batch(X)
        y = check_labels(y)
        if len(X) != len(y):
            raise TrainingError(f"{len(X)} images but {len(y)} labels")
        if np.unique(y).size < 2:
            raise TrainingError("training requires at least 2 identities")
        return X, y

    def _resolved_configs(self):
        bcfg = self.backbone_config if self.backbone_config is not None else BackboneConfig.toy()
        tcfg = self.train_config if self.train_config is not None else TrainConfig()
        return bcfg, tcfg

    def _embed_tensor(self, t: torch.Tensor) -> np.ndarray:
        self.backbone_.eval()
        out = []
        with torch.no_grad():
            for start in range(0, t.size(0), 256):
                out.append(self.backbone_(t[start:start + 256]).embedding)
        return torch.cat(out).numpy()

    def transform(self, X) -> np.ndarray:
        """Embed images; rows are unnormalized d-vectors."""
        if not hasattr(self, "backbone_"):
            raise TrainingError("estimator is not fitted")
        X = check_image_batch(X)
        return self._embed_tensor(images_to_tensor(X))

    def predict(self, X) -> np.ndarray:
        """Nearest-class prediction by cosine against the trained head."""
        if not hasattr(self, "head_"):
            raise TrainingError("estimator is not fitted")
        emb = torch.from_numpy(self.transform(X))
        with torch.no_grad():
            cos = self.head_.cosines(emb)
        return self.classes_[cos.argmax(dim=1).numpy()]

    def to_checkpoint(self, extra_meta: dict | None = None) -> Checkpoint:
        if not hasattr(self, "backbone_"):
            raise TrainingError("estimator is not fitted")
        meta = {
            "train_config": self.train_config_.to_dict(),
            "margin": asdict(self.train_config_.margin),
            "first_total_loss": self.log_[0].total_loss if self.log_ else None,
            "final_total_loss": self.log_[-1].total_loss if self.log_ else None,
            "n_steps": len(self.log_),
            "val_history": self.val_history_,
        }
        if extra_meta:
            meta.update(extra_meta)
        return Checkpoint(
            backbone_config=self.backbone_config_,
            seed=self.train_config_.seed,
            backbone_state=clone_state(self.backbone_),
            head_state=clone_state(self.head_),
            n_classes=self.head_.n_classes,
            meta=meta,
        )

    @classmethod
    def from_checkpoint(cls, checkpoint) -> "_RecognizerBase":
        """Rebuild a fitted estimator (for embedding/eval) from a checkpoint."""
        if isinstance(checkpoint, (str, Path)):
            checkpoint = Checkpoint.load(checkpoint)
        est = cls(backbone_config=checkpoint.backbone_config)
        est.backbone_config_ = checkpoint.backbone_config
        if checkpoint.meta.get("train_config"):
            est.train_config_ = TrainConfig.from_dict(checkpoint.meta["train_config"])
        else:
            est.train_config_ = TrainConfig(seed=checkpoint.seed)
        est.backbone_ = checkpoint.build_backbone()
        est.head_ = checkpoint.build_head()
        est.classes_ = np.arange(checkpoint.n_classes or 0)
        est.log_ = []
        est.val_history_ = checkpoint.meta.get("val_history", [])
        return est


class TeacherRecognizer(_RecognizerBase):
    """Margin-loss face recognizer trained on (images, identity labels).

    fit(X, y) with X of shape (N, H, W, 3) uint8; transform(X) yields
    embeddings, predict(X) nearest trained identity.
    """

    def __init__(self, backbone_config=None, train_config=None):
        self.backbone_config = backbone_config
        self.train_config = train_config

    def fit(self, X, y, log_sink=None):
        X, y = self._prepare(X, y)
        bcfg, tcfg = self._resolved_configs()
        train_idx, val_idx, train_classes = _split_identities(y, tcfg.val_fraction, tcfg.seed)
        remap = {int(c): i for i, c in enumerate(train_classes)}
        y_train = np.array([remap[int(v)] for v in y[train_idx]], dtype=np.int64)
        x_train = images_to_tensor(X[train_idx])
        x_val = images_to_tensor(X[val_idx]) if val_idx.size else None
        self.backbone_, self.head_, self.log_, self.val_history_ = _run_loop(
            x_train,
            torch.from_numpy(y_train),
            bcfg,
            tcfg,
            log_sink=log_sink,
            x_val=x_val,
            y_val=y[val_idx] if val_idx.size else None,
        )
        self.backbone_config_ = bcfg
        self.train_config_ = tcfg
        self.classes_ = train_classes
        return self


class StudentRecognizer(_RecognizerBase):
    """Recognizer trained on LR images with attention maps pulled toward a teacher.

    ``teacher`` may be a fitted TeacherRecognizer, a Checkpoint, or a
    checkpoint path; it stays frozen.  fit(X, y, hr_images=...) feeds the
    paired HR images to the teacher.  With distillation weights at zero the
    fit is bit-identical to TeacherRecognizer.fit on the same LR inputs.
    """

    def __init__(self, backbone_config=None, train_config=None, teacher=None):
        self.backbone_config = backbone_config
        self.train_config = train_config
        self.teacher = teacher

    def fit(self, X, y, hr_images=None, log_sink=None):
        X, y = self._prepare(X, y)
        bcfg, tcfg = self._resolved_configs()
        distill_cfg = tcfg.distill if tcfg.distill is not None else DistillConfig()
        resolved = _resolve_teacher(self.teacher)
        teacher_ctx, teacher_cfg = resolved if resolved else (None, None)

        if teacher_ctx is not None:
            if enumerate_sites(teacher_cfg) != enumerate_sites(bcfg):
                raise AlignmentError(
                    "teacher and student attention sites differ; "
                    "both must be built from the same backbone config"
                )
        if distill_cfg.active and teacher_ctx is None:
            raise ConfigError("distillation weights are nonzero but no teacher was given")

        x_teacher = None
        if teacher_ctx is not None:
            if hr_images is None:
                raise ConfigError("a teacher is set but no paired hr_images were given")
            hr = check_image_batch(hr_images)
            if len(hr) != len(X):
                raise AlignmentError(f"{len(X)} LR images but {len(hr)} HR images")
            x_teacher = images_to_tensor(hr)

        train_idx, val_idx, train_classes = _split_identities(y, tcfg.val_fraction, tcfg.seed)
        remap = {int(c): i for i, c in enumerate(train_classes)}
        y_train = np.array([remap[int(v)] for v in y[train_idx]], dtype=np.int64)

        teacher_hash_before = (
            state_dict_hash(teacher_ctx.backbone) if teacher_ctx is not None else None
        )
        self.backbone_, self.head_, self.log_, self.val_history_ = _run_loop(
            images_to_tensor(X[train_idx]),
            torch.from_numpy(y_train),
            bcfg,
            tcfg,
            teacher=teacher_ctx,
            x_teacher=x_teacher[torch.from_numpy(train_idx)] if x_teacher is not None else None,
            distill_cfg=distill_cfg,
            log_sink=log_sink,
            x_val=images_to_tensor(X[val_idx]) if val_idx.size else None,
            y_val=y[val_idx] if val_idx.size else None,
        )
        if teacher_ctx is not None:
            after = state_dict_hash(teacher_ctx.backbone)
            if after != teacher_hash_before:
                raise TrainingError("frozen teacher parameters changed during training")
        self.teacher_hash_ = teacher_hash_before
        self.backbone_config_ = bcfg
        self.train_config_ = tcfg
        self.classes_ = train_classes
        return self


def _records_arrays(records, side: str):
    paths = [r.hr_path if side == "hr" else r.lr_path for r in records]
    labels = np.array([r.identity_label for r in records], dtype=np.int64)
    return load_image_stack(paths), labels


def _open_sink(log_path):
    if log_path is None:
        return None
    path = Path(log_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.open("w", encoding="utf-8")


def train_teacher(records, backbone_cfg: BackboneConfig, cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Train the HR teacher from pair-manifest records; returns its checkpoint."""
    if not records:
        raise TrainingError("empty manifest")
    images, labels = _records_arrays(records, "hr")
    if np.unique(labels).size < 2:
        raise TrainingError("training requires at least 2 identities")
    est = TeacherRecognizer(backbone_config=backbone_cfg, train_config=cfg)
    sink = _open_sink(log_path)
    try:
        est.fit(images, labels, log_sink=sink)
    finally:
        if sink is not None:
            sink.close()
    return est.to_checkpoint(extra_meta={"role": "teacher", "trained_on": "hr"})


def train_student(records, teacher, backbone_cfg: BackboneConfig, cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Train the LR student against a frozen teacher; returns its checkpoint."""
    if not records:
        raise TrainingError("empty manifest")
    lr_images, labels = _records_arrays(records, "lr")
    hr_images, _ = _records_arrays(records, "hr")
    if np.unique(labels).size < 2:
        raise TrainingError("training requires at least 2 identities")
    est = StudentRecognizer(backbone_config=backbone_cfg, train_config=cfg, teacher=teacher)
    sink = _open_sink(log_path)
    try:
        est.fit(lr_images, labels, hr_images=hr_images, log_sink=sink)
    finally:
        if sink is not None:
            sink.close()
    return est.to_checkpoint(
        extra_meta={"role": "student", "trained_on": "lr", "teacher_hash": est.teacher_hash_}
    )
