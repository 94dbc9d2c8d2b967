"""Fixed-length descriptors of direction-aligned ridge patches.

A 200 x 200 patch is divided into an 8 x 8 grid of 25 px cells. Each cell
contributes 8 dimensions:

* 6-bin histogram of the doubled ridge orientation angle, soft-binned
  (linear split between the two nearest bin centers), weighted by the
  smoothed structure-tensor magnitude, L2-normalized per cell;
* mean in-band radial frequency of the cell spectrum, normalized by the
  band ceiling (0.3 cycles/px);
* square root of the fraction of AC spectral energy inside the ridge
  band (0.04 to 0.3 cycles/px).

Cells whose foreground fraction is below 0.5 are zeroed. The concatenated
512-vector is L2-normalized; an entirely empty patch maps to e1 so that
every descriptor is unit length. Layout: cell k (row-major over the grid)
occupies dimensions [8k, 8k+8) in the order above.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import cv2
import numpy as np

from ._parallel import parallel_map
from ._validation import check_gray_image, check_mask, check_patch_pair
from .alignment import PATCH_SIZE, _as_ori
from .geometry import wrap180
from .imaging import PatchSpec, estimate_orientation_field, extract_patch
from .sampling import GridConfig, SamplePoint, assign_directions, grid_sample_points

__all__ = [
    "DESCRIPTOR_DIM",
    "LATENT_BANK_DIRECTIONS",
    "describe_patch",
    "similarity",
    "similarity_matrix",
    "descriptor_losses",
    "BankMatch",
    "TemplateBank",
    "build_template_bank",
]

DESCRIPTOR_DIM = 512
_GRID = 8
_CELL = PATCH_SIZE // _GRID
_BINS = 6
_TENSOR_SIGMA = 3.0
_BAND_LO = 0.04
_BAND_HI = 0.3
_MIN_CELL_FG = 0.5
_EPS = 1e-12

LATENT_BANK_DIRECTIONS = tuple(float(d) for d in range(-90, 91, 10))

# radial frequency (cycles/px) of each rfft2 bin of a cell
_FY = np.fft.fftfreq(_CELL).astype(np.float64)
_FX = np.fft.rfftfreq(_CELL).astype(np.float64)
_RADIUS = np.hypot(_FY[:, None], _FX[None, :])
_BAND = (_RADIUS >= _BAND_LO) & (_RADIUS <= _BAND_HI)


def _cells(a: np.ndarray) -> np.ndarray:
    """(200, 200) -> (64, 625), cell-major row-major."""
    return (a.reshape(_GRID, _CELL, _GRID, _CELL)
             .transpose(0, 2, 1, 3)
             .reshape(_GRID * _GRID, _CELL * _CELL))


def describe_patch(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Unit-norm (512,) float32 descriptor of one direction-aligned patch."""
    img, mask = check_patch_pair(img, mask, PATCH_SIZE, "descriptor patch")
    gx = cv2.Sobel(img, cv2.CV_32F, 1, 0, ksize=3)
    gy = cv2.Sobel(img, cv2.CV_32F, 0, 1, ksize=3)
    a = cv2.GaussianBlur(gx * gx - gy * gy, (0, 0), _TENSOR_SIGMA)
    b = cv2.GaussianBlur(2.0 * gx * gy, (0, 0), _TENSOR_SIGMA)
    weight = np.hypot(a, b) * mask
    # ridge orientation doubled angle, in bin units of 60 degrees
    t = (np.degrees(np.arctan2(-b, -a)) % 360.0) / 60.0
    i0 = np.floor(t).astype(np.int64) % _BINS
    f = (t - np.floor(t)).astype(np.float32)
    w0 = _cells(weight * (1.0 - f))
    w1 = _cells(weight * f)
    c0 = _cells(i0)
    c1 = _cells((i0 + 1) % _BINS)
    hist = np.zeros((_GRID * _GRID, _BINS), dtype=np.float64)
    for k in range(_BINS):
        hist[:, k] = (w0 * (c0 == k)).sum(axis=1) + (w1 * (c1 == k)).sum(axis=1)
    norms = np.linalg.norm(hist, axis=1, keepdims=True)
    hist = np.where(norms > _EPS, hist / np.maximum(norms, _EPS), 0.0)

    fg = _cells(mask.astype(np.float32))
    frac = fg.mean(axis=1)
    pix = _cells(img.astype(np.float32))
    fg_mean = (pix * fg).sum(axis=1) / np.maximum(fg.sum(axis=1), 1.0)
    centered = ((pix - fg_mean[:, None]) * fg).reshape(-1, _CELL, _CELL)
    power = np.abs(np.fft.rfft2(centered)) ** 2
    band_p = (power * _BAND).sum(axis=(1, 2))
    total_p = power.sum(axis=(1, 2))
    mean_f = (power * (_BAND * _RADIUS)).sum(axis=(1, 2)) / np.maximum(band_p, _EPS)
    stat_freq = np.where(band_p > _EPS, mean_f / _BAND_HI, 0.0)
    stat_band = np.where(total_p > _EPS, np.sqrt(band_p / np.maximum(total_p, _EPS)), 0.0)

    desc = np.zeros((_GRID * _GRID, 8), dtype=np.float64)
    desc[:, :_BINS] = hist
    desc[:, 6] = stat_freq
    desc[:, 7] = stat_band
    desc[frac < _MIN_CELL_FG] = 0.0
    flat = desc.ravel()
    n = np.linalg.norm(flat)
    if n <= _EPS:
        out = np.zeros(DESCRIPTOR_DIM, dtype=np.float32)
        out[0] = 1.0
        return out
    return (flat / n).astype(np.float32)


def similarity(desc_a: np.ndarray, desc_b: np.ndarray) -> float:
    """Cosine similarity rescaled to [0, 1]."""
    a = np.asarray(desc_a, dtype=np.float64).ravel()
    b = np.asarray(desc_b, dtype=np.float64).ravel()
    if a.shape != (DESCRIPTOR_DIM,) or b.shape != (DESCRIPTOR_DIM,):
        raise ValueError(f"descriptors must be ({DESCRIPTOR_DIM},) vectors")
    return float(np.clip((1.0 + a @ b) / 2.0, 0.0, 1.0))


def similarity_matrix(descs_a: np.ndarray, descs_b: np.ndarray) -> np.ndarray:
    """(n, m) matrix of pairwise similarities between two descriptor stacks."""
    a = np.asarray(descs_a, dtype=np.float64)
    b = np.asarray(descs_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != DESCRIPTOR_DIM or b.shape[1] != DESCRIPTOR_DIM:
        raise ValueError("descriptor stacks must be (n, 512)")
    return np.clip((1.0 + a @ b.T) / 2.0, 0.0, 1.0)


def descriptor_losses(desc_a, desc_b, is_match, ori_gt1, ori_pred1, ori_gt2, ori_pred2,
                      margin: float = 1.0, lambda_ori: float = 0.5):
    """Contrastive + orientation losses of the descriptor task.

    Matched pairs are pulled by squared distance, non-matched pushed by the
    squared hinge max(0, margin - D)^2; l_simi adds lambda_ori times the
    two orientation-map MSEs. Accepts single pairs or batches (first axis).
    Returns (l_contrastive, l_ori1, l_ori2, l_simi).
    """
    a = np.atleast_2d(np.asarray(desc_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(desc_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("descriptor batches must have identical shapes")
    match = np.atleast_1d(np.asarray(is_match, dtype=bool))
    if match.shape != (a.shape[0],):
        raise ValueError("is_match must supply one flag per pair")
    d = np.linalg.norm(a - b, axis=1)
    per_pair = np.where(match, d ** 2, np.maximum(0.0, margin - d) ** 2)
    l_con = float(per_pair.mean())
    g1, p1 = _as_ori(ori_gt1, "ori_gt1"), _as_ori(ori_pred1, "ori_pred1")
    g2, p2 = _as_ori(ori_gt2, "ori_gt2"), _as_ori(ori_pred2, "ori_pred2")
    if g1.shape != p1.shape or g2.shape != p2.shape:
        raise ValueError("orientation map shapes do not match")
    l_ori1 = float(np.mean((g1 - p1) ** 2))
    l_ori2 = float(np.mean((g2 - p2) ** 2))
    l_simi = l_con + lambda_ori * (l_ori1 + l_ori2)
    return l_con, l_ori1, l_ori2, l_simi


_BANK_MAGIC = b"DRTB"
_BANK_VERSION = 1
_RECORD_FLOATS = 3 + DESCRIPTOR_DIM


@dataclass
class BankMatch:
    index: int
    x: float
    y: float
    direction: float
    descriptor: np.ndarray


class TemplateBank:
    """Precomputed descriptors on a fixed sampling lattice of one image.

    Latent banks hold every lattice point at 19 canned directions (10 degree
    steps over [-90, 90]); rolled banks hold one entry per point at its
    local field direction. Queries return the entry nearest in position,
    with ties broken by angular distance mod 180 and then by the smaller
    direction value. All payload data is float32 and the on-disk format
    round-trips bit-exactly.
    """

    def __init__(self, side: str, interval: float, positions, directions, descriptors):
        if side not in ("latent", "rolled"):
            raise ValueError("side must be 'latent' or 'rolled'")
        pos = np.asarray(positions, dtype=np.float32).reshape(-1, 2)
        dirs = np.asarray(directions, dtype=np.float32).ravel()
        descs = np.asarray(descriptors, dtype=np.float32).reshape(-1, DESCRIPTOR_DIM)
        if not (len(pos) == len(dirs) == len(descs)):
            raise ValueError("positions, directions, descriptors disagree in length")
        order = np.lexsort((dirs, pos[:, 0], pos[:, 1]))
        self.side = side
        self.interval = float(interval)
        self.positions = np.ascontiguousarray(pos[order])
        self.directions = np.ascontiguousarray(dirs[order])
        self.descriptors = np.ascontiguousarray(descs[order])

    def __len__(self) -> int:
        return len(self.directions)

    def query(self, x: float, y: float, direction: float) -> BankMatch:
        if len(self) == 0:
            raise ValueError("cannot query an empty bank")
        px = self.positions[:, 0].astype(np.float64)
        py = self.positions[:, 1].astype(np.float64)
        d2 = (px - float(x)) ** 2 + (py - float(y)) ** 2
        cand = np.flatnonzero(d2 <= d2.min())
        ang = np.abs(wrap180(self.directions[cand].astype(np.float64) - float(direction)))
        ang = np.minimum(ang, 180.0 - ang)
        cand = cand[ang <= ang.min()]
        idx = int(cand[np.argmin(self.directions[cand])])
        return BankMatch(idx, float(self.positions[idx, 0]), float(self.positions[idx, 1]),
                         float(self.directions[idx]), self.descriptors[idx])

    def save(self, path) -> None:
        side_byte = 0 if self.side == "latent" else 1
        header = _BANK_MAGIC + struct.pack("<IB3xIf", _BANK_VERSION, side_byte,
                                           len(self), np.float32(self.interval))
        records = np.empty((len(self), _RECORD_FLOATS), dtype="<f4")
        records[:, 0] = self.positions[:, 0]
        records[:, 1] = self.positions[:, 1]
        records[:, 2] = self.directions
        records[:, 3:] = self.descriptors
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(records.tobytes())

    @classmethod
    def load(cls, path) -> "TemplateBank":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 20 or blob[:4] != _BANK_MAGIC:
            raise ValueError("not a template bank file")
        version, side_byte, count, interval = struct.unpack_from("<IB3xIf", blob, 4)
        if version != _BANK_VERSION:
            raise ValueError(f"unsupported bank version {version}")
        if side_byte not in (0, 1):
            raise ValueError(f"invalid side byte {side_byte}")
        payload = blob[20:]
        expected = count * _RECORD_FLOATS * 4
        if len(payload) != expected:
            raise ValueError("bank payload size does not match record count")
        records = np.frombuffer(payload, dtype="<f4").reshape(count, _RECORD_FLOATS)
        side = "latent" if side_byte == 0 else "rolled"
        return cls(side, interval, records[:, :2], records[:, 2], records[:, 3:])


def build_template_bank(img: np.ndarray, roi: np.ndarray, side: str,
                        interval: float | None = None,
                        threads: int = 1) -> TemplateBank:
    """Sample the image on a lattice and describe a patch per entry.

    Rolled: 80 px lattice, one entry per point at the field direction.
    Latent: 16 px lattice, one entry per point and canned direction.
    The lattice keeps every in-mask point (no foreground-fraction cut) so
    nearby queries never fall into a hole.
    """
    img = check_gray_image(img, "image")
    roi = check_mask(roi, img.shape, "roi")
    if side not in ("latent", "rolled"):
        raise ValueError("side must be 'latent' or 'rolled'")
    iv = float(interval) if interval is not None else (80.0 if side == "rolled" else 16.0)
    cfg = GridConfig(interval_x=iv, interval_y=iv, min_foreground_fraction=0.0)
    points = grid_sample_points(roi, cfg, side=side)
    entries: list[tuple[SamplePoint, float]] = []
    if side == "rolled":
        field = estimate_orientation_field(img, roi)
        for p in assign_directions(points, field):
            entries.append((p, float(p.direction)))
    else:
        for p in points:
            for d in LATENT_BANK_DIRECTIONS:
                entries.append((p, d))
    positions = np.array([(p.x, p.y) for p, _ in entries], dtype=np.float32).reshape(-1, 2)
    directions = np.array([d for _, d in entries], dtype=np.float32)

    def describe_entry(entry):
        p, d = entry
        patch, pmask = extract_patch(img, roi, PatchSpec((p.x, p.y), d, PATCH_SIZE))
        return describe_patch(patch, pmask)

    descs = np.array(parallel_map(describe_entry, entries, threads),
                     dtype=np.float32).reshape(-1, DESCRIPTOR_DIM)
    return TemplateBank(side, iv, positions, directions, descs)
