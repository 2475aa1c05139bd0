"""Input checking for the estimator API."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .exceptions import ShapeError, ValidationError


def _one(img, name: str, index: int) -> np.ndarray:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 3:
        raise ShapeError(f"{name}[{index}]: expected a (3, h, w) image, got shape {np.shape(img)}")
    if not np.issubdtype(arr.dtype, np.number):
        raise ValidationError(f"{name}[{index}]: expected numeric data, got {arr.dtype}")
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}[{index}]: contains NaN or Inf")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValidationError(f"{name}[{index}]: values must lie in [0, 1]")
    return arr


def check_images(X, name: str = "X") -> list[np.ndarray]:
    """Normalise ``X`` to a list of ``(1, 3, h, w)`` float32 arrays in [0, 1].

    Accepts an ``(n, 3, h, w)`` array, a single ``(3, h, w)`` image, or a
    sequence of images that may differ in size.
    """
    if isinstance(X, Tensor):
        X = X.data
    if isinstance(X, np.ndarray):
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4:
            raise ShapeError(f"{name}: expected shape (n, 3, h, w), got {X.shape}")
        items = list(X)
    else:
        items = list(X)
    if not items:
        raise ValidationError(f"{name}: no images given")
    return [_one(img, name, i) for i, img in enumerate(items)]


def check_paired(X, y) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Validate rainy/clean training pairs: equal counts and matching shapes."""
    xs, ys = check_images(X, "X"), check_images(y, "y")
    if len(xs) != len(ys):
        raise ValidationError(f"X has {len(xs)} images but y has {len(ys)}")
    for i, (a, b) in enumerate(zip(xs, ys)):
        if a.shape != b.shape:
            raise ShapeError(f"pair {i}: X shape {a.shape[1:]} differs from y shape {b.shape[1:]}")
    return xs, ys
