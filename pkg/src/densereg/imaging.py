"""Raster loading, ROI extraction, orientation fields, and oriented patches.

Images are 2-D uint8 numpy arrays (row-major, y down); masks are 2-D bool
arrays of the same shape. Supported raster formats are 8-bit grayscale
binary PGM (P5) and PNG; assumed resolution is 500 dpi (any file metadata
is ignored).

The orientation field is the classical averaged-squared-gradient estimate
on 8x8 blocks: per-pixel gradient tensor products are summed per block,
smoothed with a Gaussian (sigma = 1 block), and converted to the doubled
angle representation (cos 2O, sin 2O) plus a coherence in [0, 1].
Ridge orientation O is pi-periodic in [-90, 90); background blocks carry
coherence 0 and a zero (cos2, sin2) vector.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import cv2
import numpy as np

from ._validation import check_gray_image, check_mask
from .geometry import rigid_params_to_matrix, wrap90, wrap180

__all__ = [
    "ImageReadError",
    "UnsupportedImageError",
    "OrientationField",
    "PatchSpec",
    "ORIENTATION_BLOCK",
    "PATCH_FILL",
    "load_gray_image",
    "save_gray_image",
    "load_mask",
    "save_mask",
    "compute_roi",
    "estimate_orientation_field",
    "extract_patch",
    "foreground_fraction_map",
]

ORIENTATION_BLOCK = 8
PATCH_FILL = 255  # out-of-image samples read as white background
_ROI_DISK_RADIUS = 5
_EPS = 1e-12


class ImageReadError(Exception):
    """Raised when a raster file cannot be read at all."""


class UnsupportedImageError(Exception):
    """Raised for readable files that are not 8-bit grayscale PGM(P5)/PNG."""


@dataclass
class OrientationField:
    """Block orientation field in doubled-angle form.

    Attributes
    ----------
    block_size : int
        Edge of the square blocks in pixels (8).
    cos2, sin2 : float32 arrays, shape (ceil(h/8), ceil(w/8))
        Doubled-angle components; unit-norm where an orientation exists and
        the zero vector on background/degenerate blocks, so
        cos2^2 + sin2^2 <= 1 everywhere.
    coherence : float32 array, same shape
        Gradient-tensor anisotropy in [0, 1]; 0 on background blocks.
    """

    block_size: int
    cos2: np.ndarray
    sin2: np.ndarray
    coherence: np.ndarray

    def _block_index(self, x: float, y: float) -> tuple[int, int]:
        by = int(np.clip(y // self.block_size, 0, self.cos2.shape[0] - 1))
        bx = int(np.clip(x // self.block_size, 0, self.cos2.shape[1] - 1))
        return by, bx

    def orientation_at(self, x: float, y: float) -> float:
        """Ridge orientation (degrees in [-90, 90)) at pixel (x, y)."""
        by, bx = self._block_index(x, y)
        o = 0.5 * np.rad2deg(np.arctan2(self.sin2[by, bx], self.cos2[by, bx]))
        return float(wrap90(o))

    def coherence_at(self, x: float, y: float) -> float:
        by, bx = self._block_index(x, y)
        return float(self.coherence[by, bx])


@dataclass
class PatchSpec:
    """Where and how to cut a patch: center (x, y), direction (deg), edge size."""

    center: tuple[float, float]
    direction: float
    size: int

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("patch size must be positive")
        self.direction = float(wrap180(self.direction))


def _check_suffix(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext not in (".pgm", ".png"):
        raise UnsupportedImageError(f"unsupported raster format: {path!r} (need .pgm or .png)")
    return ext


def load_gray_image(path: str) -> np.ndarray:
    """Load an 8-bit grayscale PGM(P5)/PNG file as a uint8 array.

    Raises ImageReadError for unreadable files and UnsupportedImageError for
    wrong formats or bit depths (e.g. 16-bit or color rasters, ASCII PGM).
    """
    ext = _check_suffix(path)
    if not os.path.isfile(path):
        raise ImageReadError(f"no such file: {path!r}")
    if ext == ".pgm":
        with open(path, "rb") as fh:
            magic = fh.read(2)
        if magic != b"P5":
            raise UnsupportedImageError(f"{path!r}: only binary (P5) PGM is supported")
    arr = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageReadError(f"could not read raster file: {path!r}")
    if arr.ndim != 2:
        raise UnsupportedImageError(f"{path!r}: color rasters are not supported")
    if arr.dtype != np.uint8:
        raise UnsupportedImageError(f"{path!r}: unsupported bit depth {arr.dtype}")
    return arr


def save_gray_image(path: str, img: np.ndarray) -> None:
    _check_suffix(path)
    arr = check_gray_image(img)
    if not cv2.imwrite(path, arr):
        raise ImageReadError(f"could not write raster file: {path!r}")


def load_mask(path: str) -> np.ndarray:
    """Load a mask raster; nonzero pixels are foreground."""
    return load_gray_image(path) != 0


def save_mask(path: str, mask: np.ndarray) -> None:
    m = check_mask(mask)
    save_gray_image(path, np.where(m, 255, 0).astype(np.uint8))


def compute_roi(img: np.ndarray) -> np.ndarray:
    """Foreground mask: Otsu (darker class), close+open with a 5 px disk,
    largest connected component, hole fill.

    A constant image has nothing to split and returns all-background.
    """
    arr = check_gray_image(img)
    if arr.min() == arr.max():
        return np.zeros(arr.shape, dtype=bool)
    # THRESH_BINARY_INV marks the darker (ridge) class as foreground.
    _, bw = cv2.threshold(arr, 0, 255, cv2.THRESH_BINARY_INV + cv2.THRESH_OTSU)
    if not bw.any() or bw.all():
        return np.zeros(arr.shape, dtype=bool)
    d = 2 * _ROI_DISK_RADIUS + 1
    kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (d, d))
    bw = cv2.morphologyEx(bw, cv2.MORPH_CLOSE, kernel)
    bw = cv2.morphologyEx(bw, cv2.MORPH_OPEN, kernel)
    n, labels, stats, _ = cv2.connectedComponentsWithStats(bw, connectivity=8)
    if n <= 1:
        return np.zeros(arr.shape, dtype=bool)
    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    comp = (labels == largest).astype(np.uint8)
    # Fill holes: flood the background from the border of a padded canvas;
    # anything the flood cannot reach is enclosed and becomes foreground.
    padded = np.pad(comp, 1)
    flood_mask = np.zeros((padded.shape[0] + 2, padded.shape[1] + 2), np.uint8)
    cv2.floodFill(padded, flood_mask, (0, 0), 2)
    filled = padded[1:-1, 1:-1] != 2
    return filled


def foreground_fraction_map(mask: np.ndarray, block: int = ORIENTATION_BLOCK) -> np.ndarray:
    """Per-block foreground fraction, zero-padded to ceil(dims/block) blocks."""
    m = check_mask(mask).astype(np.float32)
    h, w = m.shape
    gh, gw = -(-h // block), -(-w // block)
    padded = np.zeros((gh * block, gw * block), np.float32)
    padded[:h, :w] = m
    return padded.reshape(gh, block, gw, block).mean(axis=(1, 3))


def estimate_orientation_field(img: np.ndarray, roi: np.ndarray) -> OrientationField:
    """Averaged-squared-gradient orientation on 8x8 blocks.

    Per-pixel Sobel gradients g = (gx, gy) give the tensor products
    a = gx^2 - gy^2, b = 2 gx gy, e = gx^2 + gy^2, masked to the ROI,
    summed per block, Gaussian-smoothed (sigma = 1 block). The gradient
    doubled angle is atan2(b, a); ridges run perpendicular, so
    (cos2O, sin2O) = (-a, -b)/|ab| and coherence = |(a, b)| / e.
    """
    arr = check_gray_image(img)
    mask = check_mask(roi, arr.shape)
    block = ORIENTATION_BLOCK
    f = arr.astype(np.float32)
    gx = cv2.Sobel(f, cv2.CV_32F, 1, 0, ksize=3)
    gy = cv2.Sobel(f, cv2.CV_32F, 0, 1, ksize=3)
    w = mask.astype(np.float32)
    a = (gx * gx - gy * gy) * w
    b = (2.0 * gx * gy) * w
    e = (gx * gx + gy * gy) * w

    h, wd = arr.shape
    gh, gw = -(-h // block), -(-wd // block)

    def _block_sum(m):
        padded = np.zeros((gh * block, gw * block), np.float32)
        padded[:h, :wd] = m
        return padded.reshape(gh, block, gw, block).sum(axis=(1, 3))

    a_blk, b_blk, e_blk = _block_sum(a), _block_sum(b), _block_sum(e)
    frac = foreground_fraction_map(mask, block)
    a_s = cv2.GaussianBlur(a_blk, (0, 0), 1.0)
    b_s = cv2.GaussianBlur(b_blk, (0, 0), 1.0)
    e_s = cv2.GaussianBlur(e_blk, (0, 0), 1.0)

    mag = np.hypot(a_s, b_s)
    valid = (mag > _EPS) & (e_s > _EPS) & (frac > 0.0)
    cos2 = np.where(valid, -a_s / np.maximum(mag, _EPS), 0.0).astype(np.float32)
    sin2 = np.where(valid, -b_s / np.maximum(mag, _EPS), 0.0).astype(np.float32)
    coherence = np.where(valid, mag / np.maximum(e_s, _EPS), 0.0)
    coherence = np.clip(coherence, 0.0, 1.0).astype(np.float32)
    return OrientationField(block, cos2, sin2, coherence)


def extract_patch(img: np.ndarray, roi: np.ndarray, spec: PatchSpec):
    """Cut the size x size window centered at spec.center, rotated by
    -spec.direction so the point direction maps to +x.

    Intensity is sampled bilinearly; out-of-image samples read 255 with
    mask 0; the mask itself is resampled nearest-neighbor. A patch pixel q
    maps to source position center + R(direction) @ (q - patch_center)
    with patch_center = (size//2, size//2), so direction 0 with an integer
    center inside the image is an exact pixel crop.
    """
    arr = check_gray_image(img)
    mask = check_mask(roi, arr.shape)
    size = spec.size
    pc = float(size // 2)
    r = rigid_params_to_matrix(0.0, 0.0, spec.direction, pivot=(pc, pc))
    # warpAffine with WARP_INVERSE_MAP wants the output->input map; ours is
    # src = R(direction) @ (q - pc) + center, i.e. the pivot form with the
    # patch center translated onto spec.center.
    m = r.copy()
    m[:, 2] += np.asarray(spec.center, dtype=float) - np.array([pc, pc])
    patch = cv2.warpAffine(
        arr, m[:2], (size, size),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT, borderValue=float(PATCH_FILL))
    pmask = cv2.warpAffine(
        mask.astype(np.uint8), m[:2], (size, size),
        flags=cv2.INTER_NEAREST | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return patch, pmask.astype(bool)
