"""Input validation helpers shared by the public API surface."""

from __future__ import annotations

import numpy as np

__all__ = ["check_gray_image", "check_mask", "check_points", "check_patch_pair"]


def check_gray_image(img, name: str = "image") -> np.ndarray:
    """Validate an 8-bit grayscale image: 2-D uint8 array, both dims >= 1."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"{name} must be uint8, got {arr.dtype}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be at least 1x1")
    return arr


def check_mask(mask, shape=None, name: str = "mask") -> np.ndarray:
    """Validate a foreground mask and return it as a bool array.

    Accepts bool or integer arrays (nonzero = foreground). When `shape` is
    given, dimensions must match it.
    """
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if arr.dtype != bool:
        arr = arr != 0
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} shape {arr.shape} does not match image shape {tuple(shape)}")
    return arr


def check_points(points, name: str = "points") -> np.ndarray:
    """Validate an (n, 2) array of (x, y) coordinates."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must have shape (n, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_patch_pair(img, mask, size: int, name: str = "patch"):
    """Validate a (patch image, patch mask) pair of an exact square size."""
    arr = check_gray_image(img, name)
    if arr.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {arr.shape}")
    m = check_mask(mask, arr.shape, name + " mask")
    return arr, m
