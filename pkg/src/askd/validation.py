"""Input validation helpers, shaped after scikit-learn's check_array conventions."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def check_image(image) -> np.ndarray:
    """Return ``image`` as an H x W x 3 uint8 array or raise DimensionError."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer):
            raise DimensionError(f"expected 8-bit pixels, got dtype {arr.dtype}")
        if arr.min() < 0 or arr.max() > 255:
            raise DimensionError("integer pixel values outside [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def check_image_batch(X) -> np.ndarray:
    """Return ``X`` as an N x H x W x 3 uint8 array.

    Accepts a 4-D array or a sequence of same-sized HxWx3 images.
    """
    if isinstance(X, np.ndarray) and X.ndim == 4:
        if X.shape[3] != 3:
            raise DimensionError(f"expected NxHxWx3 images, got shape {X.shape}")
        return np.stack([check_image(im) for im in X])
    try:
        items = list(X)
    except TypeError:
        raise DimensionError("expected an array or sequence of images")
    if not items:
        raise DimensionError("empty image batch")
    imgs = [check_image(im) for im in items]
    first = imgs[0].shape
    for i, im in enumerate(imgs):
        if im.shape != first:
            raise DimensionError(
                f"image {i} has shape {im.shape}, expected {first}"
            )
    return np.stack(imgs)


def check_labels(y, n_classes: int | None = None) -> np.ndarray:
    """Return ``y`` as a 1-D int64 label array, optionally bounds-checked."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise DimensionError(f"expected 1-D labels, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DimensionError(f"expected integer labels, got dtype {arr.dtype}")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise DimensionError("labels must be non-negative")
    if n_classes is not None and arr.size and arr.max() >= n_classes:
        raise DimensionError(
            f"label {int(arr.max())} outside [0, {n_classes})"
        )
    return arr


def check_embeddings(X, dim: int | None = None) -> np.ndarray:
    """Return ``X`` as a 2-D float64 embedding matrix."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected an NxD embedding matrix, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionError(f"expected embedding dim {dim}, got {arr.shape[1]}")
    if not np.isfinite(arr).all():
        raise DimensionError("embeddings contain non-finite values")
    return arr
