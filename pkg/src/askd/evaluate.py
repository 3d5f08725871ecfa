"""Verification (1:1) and identification (1:N) metrics over embeddings.

Similarity is the cosine of L2-normalized embeddings for both tasks.
Verification follows the cross-validated protocol: for each fold, the
accuracy-maximizing threshold on the remaining folds is applied to the
held-out fold.  Candidate thresholds are the midpoints between consecutive
sorted unique similarities plus one sentinel on each side, so the search
is exact rather than grid-based.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import images_to_tensor, load_image_stack
from .degrade import DegradeSpec, degrade_image
from .errors import DataError, NormalizationError, ProtocolError
from .validation import check_embeddings, check_labels


@dataclass(frozen=True)
class VerificationPair:
    path_a: str
    path_b: str
    is_same: bool
    fold_id: int


@dataclass(frozen=True)
class FoldResult:
    fold_id: int
    threshold: float
    accuracy: float


def write_pairs(pairs, path) -> Path:
    """One pair per line: `<path_a>\\t<path_b>\\t<0|1>\\t<fold>`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{p.path_a}\t{p.path_b}\t{int(p.is_same)}\t{p.fold_id}" for p in pairs
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def read_pairs(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"pair list not found: {path}")
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        a, b, same, fold = parts
        a = str((base / a).resolve()) if not Path(a).is_absolute() else a
        b = str((base / b).resolve()) if not Path(b).is_absolute() else b
        pairs.append(VerificationPair(a, b, bool(int(same)), int(fold)))
    return pairs


def _identity_fold(name: str, n_folds: int, seed: int) -> bytes:
    return hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()


def build_pairs(paths, labels, identity_names=None, n_folds: int = 10,
                pos_per_fold: int = 24, neg_per_fold: int = 24, seed: int = 0) -> list:
    """Identity-disjoint verification folds from labelled image paths.

    Identities are ordered by a seeded hash of their name and dealt
    round-robin into folds, so folds stay balanced; positive and negative
    pairs are sampled within each fold.
    """
    labels = check_labels(np.asarray(labels))
    paths = [str(p) for p in paths]
    classes = np.unique(labels)
    if identity_names is None:
        identity_names = {int(c): f"id{int(c):04d}" for c in classes}
    if classes.size < 2 * n_folds:
        raise ProtocolError(
            f"{classes.size} identities cannot fill {n_folds} identity-disjoint folds "
            "with both pair classes (need >= 2 per fold)"
        )
    ordered = sorted(classes.tolist(), key=lambda c: _identity_fold(identity_names[int(c)], n_folds, seed))
    fold_of = {int(c): i % n_folds for i, c in enumerate(ordered)}

    by_class: dict = {int(c): [] for c in classes}
    for p, lab in zip(paths, labels):
        by_class[int(lab)].append(p)

    rng = np.random.default_rng([int(seed), 0xFACE])
    pairs = []
    for fold in range(n_folds):
        members = [c for c in ordered if fold_of[int(c)] == fold]
        pos_candidates = []
        for c in members:
            ps = by_class[int(c)]
            pos_candidates.extend((ps[i], ps[j]) for i in range(len(ps)) for j in range(i + 1, len(ps)))
        neg_candidates = []
        for i, c1 in enumerate(members):
            for c2 in members[i + 1:]:
                neg_candidates.extend((a, b) for a in by_class[int(c1)] for b in by_class[int(c2)])
        if not pos_candidates or not neg_candidates:
            raise ProtocolError(f"fold {fold} lacks a positive or negative pair")
        for sel, cands, same in (
            (min(pos_per_fold, len(pos_candidates)), pos_candidates, True),
            (min(neg_per_fold, len(neg_candidates)), neg_candidates, False),
        ):
            chosen = rng.choice(len(cands), size=sel, replace=False)
            for k in sorted(chosen.tolist()):
                a, b = cands[k]
                pairs.append(VerificationPair(a, b, same, fold))
    return pairs


def _check_folds(pairs):
    folds = sorted({p.fold_id for p in pairs})
    if len(folds) < 2:
        raise ProtocolError(f"need >= 2 folds, got {len(folds)}")
    for f in folds:
        kinds = {p.is_same for p in pairs if p.fold_id == f}
        if kinds != {True, False}:
            raise ProtocolError(f"fold {f} lacks positive or negative pairs")
    return folds


def threshold_candidates(sims: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive sorted unique similarities plus sentinels."""
    u = np.unique(np.asarray(sims, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate(([u[0] - 1.0], mids, [u[-1] + 1.0]))


def best_threshold(sims: np.ndarray, labels: np.ndarray):
    """Exact accuracy-maximizing threshold; ties resolve to the smallest.

    Prediction rule: same identity iff similarity >= threshold.
    """
    sims = np.asarray(sims, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    cands = threshold_candidates(sims)
    # correct(t) = #positives with sim >= t  +  #negatives with sim < t
    pos = np.sum(sims[None, :] >= cands[:, None], axis=1, where=labels[None, :])
    neg = np.sum(sims[None, :] < cands[:, None], axis=1, where=~labels[None, :])
    correct = pos + neg
    best = int(np.argmax(correct))  # argmax returns the first (smallest) candidate
    return float(cands[best]), float(correct[best] / sims.size)


def pair_similarities(pairs, embedder) -> np.ndarray:
    """Cosine similarity per pair; each unique path is embedded once."""
    unique_paths = []
    index = {}
    for p in pairs:
        for path in (p.path_a, p.path_b):
            if path not in index:
                index[path] = len(unique_paths)
                unique_paths.append(path)
    emb = check_embeddings(embedder(unique_paths))
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise NormalizationError("zero-norm embedding in verification set")
    emb = emb / norms
    return np.array([emb[index[p.path_a]] @ emb[index[p.path_b]] for p in pairs])


def verification_accuracy(pairs, embedder):
    """Cross-validated verification accuracy.

    Returns (mean held-out accuracy, list of FoldResult).  ``embedder`` is
    a callable mapping a list of image paths to an (N, d) array.
    """
    pairs = list(pairs)
    folds = _check_folds(pairs)
    sims = pair_similarities(pairs, embedder)
    labels = np.array([p.is_same for p in pairs])
    fold_ids = np.array([p.fold_id for p in pairs])

    results = []
    for f in folds:
        held = fold_ids == f
        thr, _ = best_threshold(sims[~held], labels[~held])
        acc = float(np.mean((sims[held] >= thr) == labels[held]))
        results.append(FoldResult(fold_id=f, threshold=thr, accuracy=acc))
    mean_acc = float(np.mean([r.accuracy for r in results]))
    return mean_acc, results


@dataclass
class IdentificationSet:
    """Probe/gallery embeddings with labels; every probe label must occur in the gallery."""

    probe_embeddings: np.ndarray
    gallery_embeddings: np.ndarray
    probe_labels: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self):
        self.probe_embeddings = check_embeddings(self.probe_embeddings)
        self.gallery_embeddings = check_embeddings(
            self.gallery_embeddings, dim=self.probe_embeddings.shape[1]
        )
        self.probe_labels = check_labels(self.probe_labels)
        self.gallery_labels = check_labels(self.gallery_labels)
        if len(self.probe_labels) != len(self.probe_embeddings):
            raise ProtocolError("probe labels and embeddings differ in length")
        if len(self.gallery_labels) != len(self.gallery_embeddings):
            raise ProtocolError("gallery labels and embeddings differ in length")
        missing = set(self.probe_labels.tolist()) - set(self.gallery_labels.tolist())
        if missing:
            raise ProtocolError(f"probe labels missing from gallery: {sorted(missing)}")


def rank_k_accuracy(ids: IdentificationSet, ks) -> dict:
    """Fraction of probes whose top-k gallery matches contain their label.

    Requested k larger than the gallery counts as k = G (the top-k list
    cannot be longer than the gallery).  Ties in similarity are broken by
    gallery index order, earliest first.
    """
    ks = [int(k) for k in ks]
    G = len(ids.gallery_labels)
    if any(k < 1 for k in ks):
        raise ProtocolError(f"rank k must be >= 1, got {ks}")
    p = ids.probe_embeddings / np.linalg.norm(ids.probe_embeddings, axis=1, keepdims=True)
    g = ids.gallery_embeddings / np.linalg.norm(ids.gallery_embeddings, axis=1, keepdims=True)
    sims = p @ g.T
    order = np.argsort(-sims, axis=1, kind="stable")
    ranked = ids.gallery_labels[order]  # (P, G) labels best-first
    hits = ranked == ids.probe_labels[:, None]
    out = {}
    for k in ks:
        out[k] = float(np.mean(hits[:, : min(k, G)].any(axis=1)))
    return out


class CheckpointEmbedder:
    """Callable mapping image paths to embeddings from a saved checkpoint.

    Optionally degrades every image with a fixed spec first, matching the
    protocol of evaluating LR networks on LR-degraded benchmark images.
    """

    def __init__(self, checkpoint, degrade_spec: DegradeSpec | None = None, batch_size: int = 128):
        if isinstance(checkpoint, (str, Path)):
            checkpoint = Checkpoint.load(checkpoint)
        self.backbone = checkpoint.build_backbone()
        self.degrade_spec = degrade_spec
        self.batch_size = batch_size

    def __call__(self, paths) -> np.ndarray:
        images = load_image_stack(paths)
        if self.degrade_spec is not None and self.degrade_spec.ratio > 1:
            images = np.stack([degrade_image(im, self.degrade_spec) for im in images])
        t = images_to_tensor(images)
        out = []
        with torch.no_grad():
            for start in range(0, t.size(0), self.batch_size):
                out.append(self.backbone(t[start:start + self.batch_size]).embedding)
        return torch.cat(out).numpy()
