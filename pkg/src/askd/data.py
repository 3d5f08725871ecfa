"""Image file IO and array/tensor conversion."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError


def load_image(path) -> np.ndarray:
    """Load one image file as an HxWx3 uint8 array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise DataError(f"image not found: {path}")
    except Exception as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc


def load_image_stack(paths) -> np.ndarray:
    """Load a list of same-sized image files as an NxHxWx3 uint8 array."""
    imgs = [load_image(p) for p in paths]
    if not imgs:
        raise DataError("no images to load")
    first = imgs[0].shape
    for p, im in zip(paths, imgs):
        if im.shape != first:
            raise DataError(f"{p}: shape {im.shape} differs from {first}")
    return np.stack(imgs)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 NxHxWx3 -> float32 (N,3,H,W) scaled to [-1, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()
    return t / 127.5 - 1.0
