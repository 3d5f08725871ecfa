"""Diagnostics: HR/LR attention-map correlation and attention overlays.

For each attention site the flattened teacher maps (HR inputs) and student
maps (paired LR inputs) are pooled across all evaluation images and a
single Pearson r is reported per (site, kind); the per-image r
distribution is kept alongside.  Sites under the per-conv policy are also
aggregated to block level by averaging their r values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
import torch
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .attention import SPATIAL
from .backbone import enumerate_sites
from .checkpoint import Checkpoint
from .data import images_to_tensor, load_image_stack
from .errors import AlignmentError, DataError, DimensionError
from .validation import check_image

CONSTANT_MAP_EPS = 1e-9


def pearson_r(x, y) -> float:
    """Sample Pearson correlation; raises on constant input."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise DimensionError(f"need >= 2 samples, got {x.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise DataError("correlation undefined for a constant vector")
    return float((xc * yc).sum() / denom)


class _PearsonAccumulator:
    """Streaming sums for one pooled Pearson r."""

    __slots__ = ("n", "sx", "sy", "sxx", "syy", "sxy")

    def __init__(self):
        self.n = 0
        self.sx = self.sy = self.sxx = self.syy = self.sxy = 0.0

    def update(self, x: np.ndarray, y: np.ndarray):
        x = x.astype(np.float64, copy=False).reshape(-1)
        y = y.astype(np.float64, copy=False).reshape(-1)
        self.n += x.size
        self.sx += x.sum()
        self.sy += y.sum()
        self.sxx += (x * x).sum()
        self.syy += (y * y).sum()
        self.sxy += (x * y).sum()

    def result(self) -> float:
        r = self.result_or_none()
        if r is None:
            raise DataError("correlation undefined for a constant vector")
        return r

    def result_or_none(self):
        var_x = self.n * self.sxx - self.sx ** 2
        var_y = self.n * self.syy - self.sy ** 2
        if self.n < 2 or var_x <= 0 or var_y <= 0:
            return None
        return float((self.n * self.sxy - self.sx * self.sy) / np.sqrt(var_x * var_y))


@dataclass
class CorrelationReport:
    per_site: dict = field(default_factory=dict)   # (site_id, kind) -> pooled r
    per_image: dict = field(default_factory=dict)  # (site_id, kind) -> list of per-image r
    per_block: dict = field(default_factory=dict)  # (block_id, kind) -> mean site r
    degenerate_sites: list = field(default_factory=list)  # constant on one side; reported as r=0
    sample_count: int = 0

    def mean_r(self) -> float:
        return float(np.mean(list(self.per_site.values())))


def _block_of(site_id: str) -> str:
    parts = site_id.split(".")
    return ".".join(parts[:2]) if len(parts) > 2 else site_id


def attention_correlation(teacher_ckpt, student_ckpt, records, batch_size: int = 64) -> CorrelationReport:
    """Pooled per-site Pearson r between teacher (HR) and student (LR) maps."""
    if isinstance(teacher_ckpt, (str, Path)):
        teacher_ckpt = Checkpoint.load(teacher_ckpt)
    if isinstance(student_ckpt, (str, Path)):
        student_ckpt = Checkpoint.load(student_ckpt)
    records = list(records)
    if not records:
        raise DataError("empty manifest")
    sites = enumerate_sites(teacher_ckpt.backbone_config)
    if sites != enumerate_sites(student_ckpt.backbone_config):
        raise AlignmentError("teacher and student checkpoints enumerate different sites")

    teacher = teacher_ckpt.build_backbone()
    student = student_ckpt.build_backbone()
    pooled = {key: _PearsonAccumulator() for key in sites}
    per_image = {key: [] for key in sites}

    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        hr = images_to_tensor(load_image_stack([r.hr_path for r in chunk]))
        lr = images_to_tensor(load_image_stack([r.lr_path for r in chunk]))
        with torch.no_grad():
            t_taps = teacher(hr).taps
            s_taps = student(lr).taps
        for t_tap, s_tap in zip(t_taps, s_taps):
            key = (t_tap.site_id, t_tap.kind)
            tm = t_tap.map.numpy()
            sm = s_tap.map.numpy()
            pooled[key].update(tm, sm)
            for b in range(tm.shape[0]):
                x, y = tm[b].reshape(-1), sm[b].reshape(-1)
                if x.size < 2 or x.std() == 0 or y.std() == 0:
                    per_image[key].append(float("nan"))
                else:
                    per_image[key].append(pearson_r(x, y))

    report = CorrelationReport(sample_count=len(records))
    for key in sites:
        r = pooled[key].result_or_none()
        if r is None:
            # a collapsed gate is constant over the whole eval set; report
            # "no measurable linear relationship" instead of aborting
            report.degenerate_sites.append(key)
            r = 0.0
        report.per_site[key] = r
        report.per_image[key] = per_image[key]
    blocks: dict = {}
    for (sid, kind), r in report.per_site.items():
        blocks.setdefault((_block_of(sid), kind), []).append(r)
    report.per_block = {k: float(np.mean(v)) for k, v in blocks.items()}
    return report


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; near-constant maps become uniform 0.5."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi - lo < CONSTANT_MAP_EPS:
        return np.full_like(m, 0.5)
    return (m - lo) / (hi - lo)


def pooled_spatial_map(features) -> np.ndarray:
    """Non-parametric spatial map: channel-pooled squared activations, normalized.

    Qualitative-comparison utility only; the training path always uses the
    learned sigmoid gates.
    """
    f = np.asarray(torch.as_tensor(features).detach().numpy(), dtype=np.float64)
    if f.ndim != 3:
        raise DimensionError(f"expected a (C,H,W) feature map, got shape {f.shape}")
    return normalize_map((f ** 2).sum(axis=0))


def export_attention_overlays(ckpt, image_paths, out_dir, sites=None) -> list:
    """Write one color overlay per image per spatial attention site.

    Files are named `<image>_<site>.png`; returns the written paths.
    """
    if isinstance(ckpt, (str, Path)):
        ckpt = Checkpoint.load(ckpt)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone = ckpt.build_backbone()
    cmap = plt.get_cmap("jet")
    written = []
    for path in image_paths:
        img = check_image(load_image_stack([path])[0])
        with torch.no_grad():
            taps = backbone(images_to_tensor(img)).taps
        for tap in taps:
            if tap.kind != SPATIAL:
                continue
            if sites is not None and tap.site_id not in sites:
                continue
            amap = normalize_map(tap.map.numpy()[0, 0])
            up = Image.fromarray((amap * 255).astype(np.uint8)).resize(
                (img.shape[1], img.shape[0]), Image.Resampling.BILINEAR
            )
            heat = cmap(np.asarray(up, dtype=np.float64) / 255.0)[:, :, :3]
            overlay = 0.5 * (img.astype(np.float64) / 255.0) + 0.5 * heat
            out_path = out_dir / f"{Path(path).stem}_{tap.site_id}.png"
            try:
                Image.fromarray((np.clip(overlay, 0, 1) * 255).astype(np.uint8)).save(out_path)
            except OSError as exc:
                raise DataError(f"cannot write overlay {out_path}: {exc}") from exc
            written.append(out_path)
    return written


def plot_correlation_bars(report: CorrelationReport, out_path, title: str = "HR/LR attention correlation") -> Path:
    """Grouped bar chart of pooled r per block, one bar pair (S, C) per block."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    blocks = sorted({b for b, _ in report.per_block})
    spatial = [report.per_block.get((b, "spatial"), np.nan) for b in blocks]
    channel = [report.per_block.get((b, "channel"), np.nan) for b in blocks]
    x = np.arange(len(blocks))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(blocks)), 4))
    ax.bar(x - 0.2, spatial, width=0.4, label="spatial")
    ax.bar(x + 0.2, channel, width=0.4, label="channel")
    ax.set_xticks(x)
    ax.set_xticklabels(blocks, rotation=45, ha="right")
    ax.set_ylabel("Pearson r")
    ax.set_ylim(-1.0, 1.0)
    ax.axhline(0.0, color="gray", linewidth=0.5)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def write_report_text(report: CorrelationReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "attention correlation report",
        f"images: {report.sample_count}",
        f"mean pooled r over sites: {report.mean_r():.6f}",
        "",
        f"{'site':<28} {'kind':<8} {'pooled_r':>10} {'per_image_mean':>15}",
    ]
    for (sid, kind), r in report.per_site.items():
        vals = np.asarray(report.per_image[(sid, kind)], dtype=np.float64)
        with np.errstate(all="ignore"):
            mean_img = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
        flag = "  (degenerate: constant map)" if (sid, kind) in report.degenerate_sites else ""
        lines.append(f"{sid:<28} {kind:<8} {r:>10.6f} {mean_img:>15.6f}{flag}")
    lines.append("")
    lines.append(f"{'block':<20} {'kind':<8} {'mean_r':>10}")
    for (block, kind), r in sorted(report.per_block.items()):
        lines.append(f"{block:<20} {kind:<8} {r:>10.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_report_kv(report: CorrelationReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"sample_count = {report.sample_count}", f"mean_r = {report.mean_r():.10f}"]
    lines.append(
        "degenerate_sites = " + (",".join(f"{s}.{k}" for s, k in report.degenerate_sites) or "none")
    )
    for (sid, kind), r in report.per_site.items():
        lines.append(f"r.{sid}.{kind} = {r:.10f}")
    for (block, kind), r in sorted(report.per_block.items()):
        lines.append(f"block_r.{block}.{kind} = {r:.10f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
