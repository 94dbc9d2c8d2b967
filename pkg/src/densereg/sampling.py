"""Uniform key-point grids over the ROI and neighbor-pair enumeration.

Grid points are the "virtual minutiae" of the pipeline: lattice points at
half-interval offsets, kept only when they sit on foreground and their
200x200 window holds enough foreground. Rolled-side points take the local
ridge orientation as their direction; latent grid points carry none.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ._validation import check_mask
from .imaging import OrientationField

__all__ = [
    "SamplePoint",
    "GridConfig",
    "SAMPLE_WINDOW",
    "grid_sample_points",
    "assign_directions",
    "precise_candidate_pairs",
    "points_to_tsv",
    "points_from_tsv",
]

SAMPLE_WINDOW = 200  # foreground-fraction test window, the patch size


@dataclass
class SamplePoint:
    """A grid key point. `direction` is None on latent grid points.

    `low_confidence` flags rolled points whose orientation block had zero
    coherence; `adjusted` flags points produced by alignment adjustment.
    """

    id: int
    x: float
    y: float
    direction: Optional[float]
    side: str  # "latent" | "rolled"
    low_confidence: bool = False
    adjusted: bool = False

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass
class GridConfig:
    interval_x: float
    interval_y: float
    min_foreground_fraction: float = 0.4

    def __post_init__(self):
        if self.interval_x < 1 or self.interval_y < 1:
            raise ValueError("grid intervals must be >= 1 px")
        if not 0.0 <= self.min_foreground_fraction <= 1.0:
            raise ValueError("min_foreground_fraction must be in [0, 1]")


def _window_fraction(integral: np.ndarray, x: float, y: float, h: int, w: int) -> float:
    # Fraction of the SAMPLE_WINDOW^2 window (centered, clipped to the image)
    # that is foreground; out-of-image area counts as background.
    half = SAMPLE_WINDOW // 2
    x0 = max(int(round(x)) - half, 0)
    y0 = max(int(round(y)) - half, 0)
    x1 = min(int(round(x)) + half, w)
    y1 = min(int(round(y)) + half, h)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    s = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    return float(s) / float(SAMPLE_WINDOW * SAMPLE_WINDOW)


def grid_sample_points(roi: np.ndarray, cfg: GridConfig, side: str) -> list[SamplePoint]:
    """Lattice points at ((i + 0.5) * interval_x, (j + 0.5) * interval_y),
    kept iff the point is foreground and its 200x200 window has foreground
    fraction >= cfg.min_foreground_fraction. Ids are row-major over kept
    points. Directions are left unset (see assign_directions)."""
    mask = check_mask(roi)
    if side not in ("latent", "rolled"):
        raise ValueError(f"side must be 'latent' or 'rolled', got {side!r}")
    h, w = mask.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask, axis=0), axis=1, out=integral[1:, 1:])

    xs = np.arange(cfg.interval_x / 2.0, w, cfg.interval_x)
    ys = np.arange(cfg.interval_y / 2.0, h, cfg.interval_y)
    points = []
    next_id = 0
    for y in ys:
        iy = int(round(y))
        if iy >= h:
            continue
        for x in xs:
            ix = int(round(x))
            if ix >= w or not mask[iy, ix]:
                continue
            if _window_fraction(integral, x, y, h, w) < cfg.min_foreground_fraction:
                continue
            points.append(SamplePoint(next_id, float(x), float(y), None, side))
            next_id += 1
    return points


def assign_directions(points: list[SamplePoint], field: OrientationField) -> list[SamplePoint]:
    """Give rolled points the block ridge orientation in [-90, 90).

    Zero-coherence blocks yield direction 0 with the low-confidence flag.
    Latent points pass through unchanged."""
    out = []
    for p in points:
        if p.side != "rolled":
            out.append(p)
            continue
        if field.coherence_at(p.x, p.y) <= 0.0:
            out.append(replace(p, direction=0.0, low_confidence=True))
        else:
            out.append(replace(p, direction=field.orientation_at(p.x, p.y)))
    return out


def precise_candidate_pairs(latent_pts: list[SamplePoint], rolled_pts: list[SamplePoint],
                            radius: int = 2, interval: float = 24.0) -> list[tuple[int, int]]:
    """Neighbor-restricted comparison pairs for the precise stage.

    Both point sets must be sampled at the same `interval`; each latent
    point pairs with every rolled point within Chebyshev lattice distance
    <= radius (radius 2 = the 5x5 = 25-neighbor scheme).
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    by_cell: dict[tuple[int, int], list[SamplePoint]] = {}
    for r in rolled_pts:
        key = (int(round((r.x - interval / 2.0) / interval)),
               int(round((r.y - interval / 2.0) / interval)))
        by_cell.setdefault(key, []).append(r)
    pairs = []
    for l in latent_pts:
        ci = int(round((l.x - interval / 2.0) / interval))
        cj = int(round((l.y - interval / 2.0) / interval))
        for dj in range(-radius, radius + 1):
            for di in range(-radius, radius + 1):
                for r in by_cell.get((ci + di, cj + dj), ()):
                    pairs.append((l.id, r.id))
    return pairs


def points_to_tsv(points: list[SamplePoint]) -> str:
    """Serialize points as TSV: id, x, y, direction (blank if absent), side."""
    lines = ["id\tx\ty\tdirection\tside"]
    for p in points:
        d = "" if p.direction is None else repr(float(p.direction))
        lines.append(f"{p.id}\t{p.x!r}\t{p.y!r}\t{d}\t{p.side}")
    return "\n".join(lines) + "\n"


def points_from_tsv(text: str) -> list[SamplePoint]:
    points = []
    rows = [r for r in text.splitlines() if r.strip()]
    for row in rows[1:]:
        pid, x, y, d, side = row.split("\t")
        points.append(SamplePoint(int(pid), float(x), float(y),
                                  float(d) if d else None, side))
    return points
