"""Deterministic HR -> LR image degradation and pair-manifest construction.

The pipeline is fixed: bicubic down-sample by an integer ratio, Gaussian
blur of the small image (reflect borders), bicubic up-sample back to the
original size.  Identical input and spec always yield bit-identical output,
so degraded corpora can be regenerated and hash-compared.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, DataError, DimensionError
from .validation import check_image, check_image_batch

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def default_blur_sigma(ratio: int) -> float:
    return ratio / 2.0


def default_blur_kernel_size(sigma: float) -> int:
    return 2 * math.ceil(2.0 * sigma) + 1


@dataclass(frozen=True)
class DegradeSpec:
    """Down-sampling ratio plus Gaussian blur parameters."""

    ratio: int
    blur_sigma: float
    blur_kernel_size: int

    def __post_init__(self):
        if not isinstance(self.ratio, int) or self.ratio < 1:
            raise ConfigError(f"ratio must be an integer >= 1, got {self.ratio!r}")
        k = self.blur_kernel_size
        if not isinstance(k, int) or k < 1 or k % 2 == 0:
            raise ConfigError(f"blur_kernel_size must be an odd integer >= 1, got {k!r}")
        if self.ratio > 1 and not self.blur_sigma > 0:
            raise ConfigError(
                f"blur_sigma must be > 0 for ratio {self.ratio}, got {self.blur_sigma!r}"
            )

    @classmethod
    def create(cls, ratio: int, blur_sigma=None, blur_kernel_size=None) -> "DegradeSpec":
        """Build a spec, filling unset blur parameters from the ratio."""
        if not isinstance(ratio, int) or isinstance(ratio, bool):
            raise ConfigError(f"ratio must be an integer, got {ratio!r}")
        sigma = default_blur_sigma(ratio) if blur_sigma is None else float(blur_sigma)
        kernel = default_blur_kernel_size(sigma) if blur_kernel_size is None else int(blur_kernel_size)
        return cls(ratio=ratio, blur_sigma=sigma, blur_kernel_size=kernel)


def degrade_image(image, spec: DegradeSpec) -> np.ndarray:
    """Degrade one HxWx3 uint8 image; output has identical dimensions.

    ratio=1 bypasses the pipeline entirely (exact identity).
    """
    img = check_image(image)
    h, w = img.shape[:2]
    if h % spec.ratio or w % spec.ratio:
        raise DimensionError(
            f"image size {h}x{w} not divisible by ratio {spec.ratio}"
        )
    if spec.ratio == 1:
        return img.copy()
    small = Image.fromarray(img).resize(
        (w // spec.ratio, h // spec.ratio), Image.Resampling.BICUBIC
    )
    arr = np.asarray(small, dtype=np.float64)
    radius = (spec.blur_kernel_size - 1) // 2
    blurred = np.empty_like(arr)
    for c in range(3):
        blurred[:, :, c] = gaussian_filter(
            arr[:, :, c], sigma=spec.blur_sigma, mode="reflect", radius=radius
        )
    quantized = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
    up = Image.fromarray(quantized).resize((w, h), Image.Resampling.BICUBIC)
    return np.asarray(up)


class ImageDegrader(TransformerMixin, BaseEstimator):
    """Resolution degradation as a scikit-learn transformer.

    Parameters mirror DegradeSpec; unset blur parameters are derived from
    the ratio at fit time (sigma = ratio/2, kernel = 2*ceil(2*sigma)+1).
    """

    def __init__(self, ratio: int = 4, blur_sigma=None, blur_kernel_size=None):
        self.ratio = ratio
        self.blur_sigma = blur_sigma
        self.blur_kernel_size = blur_kernel_size

    def fit(self, X=None, y=None):
        self.spec_ = DegradeSpec.create(self.ratio, self.blur_sigma, self.blur_kernel_size)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "spec_")
        batch = check_image_batch(X)
        return np.stack([degrade_image(im, self.spec_) for im in batch])


@dataclass(frozen=True)
class ImagePairRecord:
    """One HR/LR image pair with its contiguous identity label."""

    hr_path: str
    lr_path: str
    identity_label: int
    ratio: int


@dataclass
class ManifestResult:
    records: list
    manifest_path: Path
    skipped_identities: int
    failures: list  # (path, message) for unreadable images


def write_manifest(records, path) -> Path:
    """Write records as `<hr>\\t<lr>\\t<label>\\t<ratio>` lines, paths relative to the manifest."""
    path = Path(path)
    base = path.parent
    lines = []
    for r in records:
        hr_rel = Path(os.path.relpath(r.hr_path, base)) if Path(r.hr_path).is_absolute() else Path(r.hr_path)
        lr_rel = Path(os.path.relpath(r.lr_path, base)) if Path(r.lr_path).is_absolute() else Path(r.lr_path)
        lines.append(f"{hr_rel.as_posix()}\t{lr_rel.as_posix()}\t{r.identity_label}\t{r.ratio}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def read_manifest(path) -> list:
    """Read a pair manifest; relative paths are resolved against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        hr, lr, label, ratio = parts
        records.append(
            ImagePairRecord(
                hr_path=str((base / hr).resolve()),
                lr_path=str((base / lr).resolve()),
                identity_label=int(label),
                ratio=int(ratio),
            )
        )
    return records


def _list_identity_dirs(dataset_root: Path):
    return sorted(d for d in dataset_root.iterdir() if d.is_dir())


def _list_images(identity_dir: Path):
    return sorted(
        p for p in identity_dir.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def _degrade_one(hr_path: Path, lr_path: Path, spec: DegradeSpec):
    try:
        with Image.open(hr_path) as im:
            img = np.asarray(im.convert("RGB"))
    except Exception as exc:
        return str(hr_path), f"unreadable image: {exc}"
    try:
        lr = degrade_image(img, spec)
    except DimensionError as exc:
        return str(hr_path), str(exc)
    lr_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(lr).save(lr_path, format="PNG")
    return None


def build_pair_manifest(dataset_root, spec: DegradeSpec, out_root, workers: int = 1) -> ManifestResult:
    """Degrade every image under ``dataset_root`` and write the pair manifest.

    ``dataset_root`` holds one sub-directory per identity.  Labels are
    contiguous integers assigned by sorted identity-directory name over
    identities that produced at least one pair.  Empty directories are
    skipped (counted); unreadable images are recorded as failures and
    processing continues.
    """
    dataset_root = Path(dataset_root).resolve()
    out_root = Path(out_root).resolve()
    if not dataset_root.is_dir():
        raise DataError(f"dataset root not found: {dataset_root}")
    out_root.mkdir(parents=True, exist_ok=True)

    skipped = 0
    jobs = []  # (identity_name, hr_path, lr_path)
    for ident_dir in _list_identity_dirs(dataset_root):
        images = _list_images(ident_dir)
        if not images:
            skipped += 1
            continue
        for hr_path in images:
            lr_path = out_root / "lr" / ident_dir.name / (hr_path.stem + ".png")
            jobs.append((ident_dir.name, hr_path, lr_path))

    failures = []
    ok = []  # (identity_name, hr_path, lr_path) in job order
    if workers > 1 and jobs:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: _degrade_one(j[1], j[2], spec), jobs))
    else:
        results = [_degrade_one(hr, lr, spec) for _, hr, lr in jobs]
    for job, err in zip(jobs, results):
        if err is None:
            ok.append(job)
        else:
            failures.append(err)

    labels = {}
    for name, _, _ in ok:
        if name not in labels:
            labels[name] = len(labels)
    records = [
        ImagePairRecord(
            hr_path=str(hr), lr_path=str(lr), identity_label=labels[name], ratio=spec.ratio
        )
        for name, hr, lr in ok
    ]
    manifest_path = write_manifest(records, out_root / "manifest.tsv")
    return ManifestResult(
        records=records,
        manifest_path=manifest_path,
        skipped_identities=skipped,
        failures=failures,
    )
