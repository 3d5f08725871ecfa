"""Procedural face-like toy corpus with identity-specific local structure.

Each identity is defined by the geometry of small facial parts: eye
spacing/size/depth, mouth position/width/curvature, an 8x8 mid-frequency
texture stamp at a fixed facial offset, and face ellipse axes.  Everything
global (skin tone, tint, illumination, background gradient, a distractor
blob) is randomized per image, so identity is recoverable only from local
structure, which is exactly what resolution degradation erodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class IdentitySpec:
    eye_dx: float          # half the eye spacing, pixels
    eye_dy: float          # eyes above center
    eye_sigma: float
    eye_depth: float
    mouth_dy: float
    mouth_halfwidth: float
    mouth_thickness: float
    mouth_depth: float
    mouth_curve: float
    stamp: tuple           # 16 bits, row-major 4x4, rendered 2x upsampled
    stamp_dy: int
    stamp_dx: int
    stamp_contrast: float
    face_a: float          # vertical semi-axis
    face_b: float          # horizontal semi-axis


def sample_identity(rng: np.random.Generator) -> IdentitySpec:
    return IdentitySpec(
        eye_dx=float(rng.uniform(3.5, 8.0)),
        eye_dy=float(rng.uniform(3.0, 6.5)),
        eye_sigma=float(rng.uniform(1.2, 2.2)),
        eye_depth=float(rng.uniform(80.0, 130.0)),
        mouth_dy=float(rng.uniform(5.0, 9.0)),
        mouth_halfwidth=float(rng.uniform(3.0, 7.0)),
        mouth_thickness=float(rng.uniform(1.0, 2.0)),
        mouth_depth=float(rng.uniform(60.0, 110.0)),
        mouth_curve=float(rng.uniform(-0.15, 0.15)),
        stamp=tuple(int(b) for b in rng.integers(0, 2, size=16)),
        stamp_dy=int(rng.integers(-10, -4)),
        stamp_dx=int(rng.integers(-10, 4)),
        stamp_contrast=float(rng.uniform(30.0, 50.0)),
        face_a=float(rng.uniform(11.0, 15.5)),
        face_b=float(rng.uniform(8.5, 13.0)),
    )


def render_face(spec: IdentitySpec, rng: np.random.Generator, size: int = 40) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    jy, jx = rng.integers(-2, 3, size=2)
    cy, cx = size / 2.0 + jy, size / 2.0 + jx

    # nuisance background: random linear gradient plus one bright blob
    theta = rng.uniform(0.0, 2.0 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy) / size
    g0, g1 = rng.uniform(30.0, 90.0, size=2)
    gray = g0 + (g1 - g0) * (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1e-9)
    by, bx = rng.uniform(0, size, size=2)
    br = rng.uniform(2.0, 4.0)
    gray += rng.uniform(50.0, 90.0) * np.exp(-(((yy - by) ** 2 + (xx - bx) ** 2) / (2 * br * br)))

    # face: elliptical disk, tone randomized per image
    mask = ((yy - cy) / spec.face_a) ** 2 + ((xx - cx) / spec.face_b) ** 2 <= 1.0
    tone = rng.uniform(140.0, 185.0)
    gray = np.where(mask, tone, gray)

    # identity-bearing local parts
    for side in (-1.0, 1.0):
        ey, ex = cy - spec.eye_dy, cx + side * spec.eye_dx
        gray -= spec.eye_depth * np.exp(
            -(((yy - ey) ** 2 + (xx - ex) ** 2) / (2 * spec.eye_sigma ** 2))
        ) * mask
    mouth_y = cy + spec.mouth_dy + spec.mouth_curve * (xx - cx) ** 2
    in_mouth = np.abs(xx - cx) <= spec.mouth_halfwidth
    gray -= spec.mouth_depth * np.exp(
        -((yy - mouth_y) ** 2) / (2 * spec.mouth_thickness ** 2)
    ) * in_mouth * mask

    pattern = np.kron(np.array(spec.stamp, dtype=np.float64).reshape(4, 4), np.ones((2, 2)))
    r0 = min(max(int(round(cy + spec.stamp_dy)), 0), size - 8)
    c0 = min(max(int(round(cx + spec.stamp_dx)), 0), size - 8)
    gray[r0:r0 + 8, c0:c0 + 8] += spec.stamp_contrast * (2.0 * pattern - 1.0)

    # per-image illumination, tint, sensor noise
    gain = rng.uniform(0.92, 1.08)
    bias = rng.uniform(-8.0, 8.0)
    tint = rng.uniform(-10.0, 10.0, size=3)
    img = gain * gray[:, :, None] + bias + tint[None, None, :]
    img += rng.normal(0.0, 4.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_corpus(root, n_identities: int = 20, images_per_identity: int = 44,
                    size: int = 40, seed: int = 0):
    """Write a toy identity tree `root/id_###/img_###.png`.

    Returns (paths, labels, identity_names) with labels contiguous in
    sorted directory order.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths, labels, names = [], [], []
    for i in range(n_identities):
        name = f"id_{i:03d}"
        names.append(name)
        ident_dir = root / name
        ident_dir.mkdir(exist_ok=True)
        spec = sample_identity(np.random.default_rng([int(seed), 1, i]))
        for j in range(images_per_identity):
            img = render_face(spec, np.random.default_rng([int(seed), 2, i, j]), size=size)
            p = ident_dir / f"img_{j:03d}.png"
            Image.fromarray(img).save(p)
            paths.append(str(p))
            labels.append(i)
    return paths, np.array(labels, dtype=np.int64), names
