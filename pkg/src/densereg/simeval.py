"""Impression simulation from learned distortion, and registration metrics.

A distortion profile captures how one impression deformed relative to its
source print: a thin-plate field fitted on matched points plus the region
where the match held. Replaying a profile on another rolled print (with
seeded appearance changes: gamma, contrast, band-limited noise, dropout
blobs) yields a simulated impression together with an exact correspondence
map, which is what makes the output usable as labeled training or
evaluation data.

Metrics: minutia location/direction deviations under a fitted transform
(with empirical CDFs), and a registration score defined as the mean
descriptor similarity over a fine lattice on the ROI overlap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import cv2
import numpy as np

from ._validation import check_gray_image, check_mask, check_points
from .alignment import PATCH_SIZE
from .descriptor import describe_patch, similarity
from .geometry import wrap180
from .imaging import (PatchSpec, estimate_orientation_field, extract_patch,
                      load_mask, save_mask)
from .sampling import GridConfig, assign_directions, grid_sample_points
from .transform import (RigidTransform2D, ThinPlateSpline, apply_transform,
                        fit_tps, transform_from_dict, transform_to_dict)

__all__ = [
    "DistortionProfile",
    "learn_distortion_profile",
    "check_profile_quality",
    "save_profile",
    "load_profile",
    "AugmentConfig",
    "CorrespondenceMap",
    "simulate_impression",
    "PatchCluster",
    "generate_patch_dataset",
    "MarkedMinutia",
    "minutiae_to_tsv",
    "minutiae_from_tsv",
    "pair_minutiae",
    "DeviationReport",
    "eval_deviations",
    "ScoreReport",
    "matching_score",
]

MIN_PATCH_FOREGROUND = 0.4
MIN_CLUSTER_PATCHES = 8  # clusters with at most this many patches are dropped
MIN_PROFILE_AREA = 20000.0
MAX_PROFILE_RESIDUAL = 2.0


# ---------------------------------------------------------------------------
# distortion profiles


@dataclass
class DistortionProfile:
    roi: np.ndarray
    tps: ThinPlateSpline
    center: tuple

    def __post_init__(self):
        self.roi = check_mask(self.roi, None, "roi")
        if not self.roi.any():
            raise ValueError("profile roi must be nonempty")
        self.center = (float(self.center[0]), float(self.center[1]))


def learn_distortion_profile(latent_pts, rolled_pts, latent_roi, rolled_roi,
                             rolled_center, lam: float = 0.0) -> DistortionProfile:
    """Fit the latent-to-rolled distortion field on matched points and keep
    the region where it is supported: the latent ROI pushed through the
    field, intersected with the rolled ROI. The anchor center travels with
    the profile so it can be re-seated on another print."""
    src = check_points(latent_pts, "latent_pts")
    dst = check_points(rolled_pts, "rolled_pts")
    latent_roi = check_mask(latent_roi, None, "latent_roi")
    rolled_roi = check_mask(rolled_roi, None, "rolled_roi")
    tps = fit_tps(src, dst, lam=lam)
    blank = np.zeros(latent_roi.shape, dtype=np.uint8)
    _, mapped = apply_transform(tps, blank, latent_roi, out_shape=rolled_roi.shape)
    roi = mapped & rolled_roi
    if not roi.any():
        raise ValueError("mapped latent roi does not intersect the rolled roi")
    return DistortionProfile(roi, tps, rolled_center)


def check_profile_quality(profile: DistortionProfile, latent_pts, rolled_pts,
                          max_residual: float = MAX_PROFILE_RESIDUAL,
                          min_area: float = MIN_PROFILE_AREA):
    """Automatic acceptance rule for learned profiles. Returns (ok, reason);
    reason is None when the profile passes."""
    src = check_points(latent_pts, "latent_pts")
    dst = check_points(rolled_pts, "rolled_pts")
    residual = float(np.linalg.norm(profile.tps.transform(src) - dst, axis=1).max())
    if residual > max_residual:
        return False, f"landmark residual {residual:.3f} px exceeds {max_residual}"
    area = float(profile.roi.sum())
    if area < min_area:
        return False, f"common roi area {area:.0f} px^2 below {min_area:.0f}"
    return True, None


def save_profile(profile: DistortionProfile, path) -> None:
    """JSON next to a PNG mask: <stem>.json + <stem>_roi.png."""
    path = Path(path)
    roi_name = path.stem + "_roi.png"
    save_mask(path.with_name(roi_name), profile.roi)
    payload = {
        "center": [profile.center[0], profile.center[1]],
        "roi_png": roi_name,
        "tps": transform_to_dict(profile.tps),
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def load_profile(path) -> DistortionProfile:
    path = Path(path)
    payload = json.loads(path.read_text())
    tps = transform_from_dict(payload["tps"])
    if not isinstance(tps, ThinPlateSpline):
        raise ValueError("profile transform must be a thin-plate spline")
    roi = load_mask(path.with_name(payload["roi_png"]))
    return DistortionProfile(roi, tps, tuple(payload["center"]))


# ---------------------------------------------------------------------------
# impression simulation


@dataclass(frozen=True)
class AugmentConfig:
    """Seeded appearance changes; each field is a closed sampling range."""
    gamma_range: tuple = (0.5, 2.0)
    contrast_range: tuple = (0.6, 1.4)
    noise_sigma_range: tuple = (0.0, 12.0)
    dropout_blob_count: tuple = (0, 6)
    dropout_blob_radius: tuple = (5.0, 25.0)

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls((1.0, 1.0), (1.0, 1.0), (0.0, 0.0), (0, 0), (5.0, 5.0))


def _invert_tps(tps: ThinPlateSpline, targets: np.ndarray,
                tol: float = 1e-9, max_iter: int = 30) -> np.ndarray:
    """Newton inversion: w with tps(w) = target, started at the target."""
    w = targets.astype(np.float64).copy()
    for _ in range(max_iter):
        r = tps.transform(w) - targets
        if np.abs(r).max(initial=0.0) < tol:
            break
        j = tps.jacobian(w)
        det = j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]
        safe = np.where(np.abs(det) > 1e-12, det, 1.0)
        dx = (j[:, 1, 1] * r[:, 0] - j[:, 0, 1] * r[:, 1]) / safe
        dy = (-j[:, 1, 0] * r[:, 0] + j[:, 0, 0] * r[:, 1]) / safe
        step = np.stack([dx, dy], axis=1)
        step[np.abs(det) <= 1e-12] = 0.0
        w -= step
    return w


@dataclass
class CorrespondenceMap:
    """Exact pointwise link between the source rolled frame and one
    simulated impression. Simulated pixel q shows the rolled content at
    tps(q + offset - shift) + shift; mapping a rolled point back therefore
    inverts the spline."""
    tps: ThinPlateSpline
    shift: tuple
    offset: tuple

    def rolled_from_sim(self, points) -> np.ndarray:
        pts = check_points(points, "points")
        single = np.asarray(points).ndim == 1
        s = np.asarray(self.shift, dtype=np.float64)
        o = np.asarray(self.offset, dtype=np.float64)
        out = self.tps.transform(pts + o - s) + s
        return out[0] if single else out

    def map_points(self, points) -> np.ndarray:
        """Rolled-frame points into the simulated frame."""
        pts = check_points(points, "points")
        single = np.asarray(points).ndim == 1
        s = np.asarray(self.shift, dtype=np.float64)
        o = np.asarray(self.offset, dtype=np.float64)
        w = _invert_tps(self.tps, pts - s)
        out = w + s - o
        return out[0] if single else out

    def map_minutiae(self, points, directions_deg):
        """Positions like map_points; directions are carried through the
        local inverse Jacobian of the warp."""
        pts = check_points(points, "points")
        dirs = np.asarray(directions_deg, dtype=np.float64).ravel()
        if len(dirs) != len(pts):
            raise ValueError("one direction per point required")
        s = np.asarray(self.shift, dtype=np.float64)
        o = np.asarray(self.offset, dtype=np.float64)
        w = _invert_tps(self.tps, pts - s)
        jac = self.tps.jacobian(w)
        rad = np.deg2rad(dirs)
        vec = np.stack([np.cos(rad), np.sin(rad)], axis=1)
        moved = np.linalg.solve(jac, vec[:, :, None])[:, :, 0]
        out_dirs = wrap180(np.degrees(np.arctan2(moved[:, 1], moved[:, 0])))
        return w + s - o, out_dirs

    def to_dict(self) -> dict:
        return {"tps": transform_to_dict(self.tps),
                "shift": [float(self.shift[0]), float(self.shift[1])],
                "offset": [float(self.offset[0]), float(self.offset[1])]}

    @classmethod
    def from_dict(cls, data: dict) -> "CorrespondenceMap":
        tps = transform_from_dict(data["tps"])
        if not isinstance(tps, ThinPlateSpline):
            raise ValueError("correspondence map transform must be a spline")
        return cls(tps, tuple(data["shift"]), tuple(data["offset"]))


def simulate_impression(rolled, profile: DistortionProfile,
                        appearance: AugmentConfig | None = None,
                        seed: int = 0):
    """Synthesize one impression of a rolled print under a learned profile.

    rolled is (img, roi, field, center); the field rides along for callers
    that probe directions and is not used here. The profile ROI is seated
    so its anchor lands on the rolled center (integer shift), cropped to
    the ROI bounding box inside the image, and the distortion field is
    replayed there; appearance changes are drawn from the given config with
    the given seed. Returns (image, mask, correspondence_map).
    """
    img, roi, _field, center = rolled
    img = check_gray_image(img, "rolled img")
    roi = check_mask(roi, img.shape, "rolled roi")
    appearance = appearance if appearance is not None else AugmentConfig()
    shift = np.rint(np.asarray(center, dtype=np.float64)
                    - np.asarray(profile.center, dtype=np.float64)).astype(int)
    ys, xs = np.nonzero(profile.roi)
    ys = ys + shift[1]
    xs = xs + shift[0]
    keep = (ys >= 0) & (ys < img.shape[0]) & (xs >= 0) & (xs < img.shape[1])
    if not keep.any():
        raise ValueError("translated profile roi falls outside the image")
    ys, xs = ys[keep], xs[keep]
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    h, w = y1 - y0 + 1, x1 - x0 + 1
    roi_crop = np.zeros((h, w), dtype=bool)
    roi_crop[ys - y0, xs - x0] = True

    sx, sy = float(shift[0]), float(shift[1])
    src_img = np.where(roi, img, np.uint8(255))
    mapx = np.empty((h, w), dtype=np.float32)
    mapy = np.empty((h, w), dtype=np.float32)
    cols = np.arange(w, dtype=np.float64) + x0
    chunk = max(1, int(2e6) // max(w, 1))
    for r0 in range(0, h, chunk):
        r1 = min(h, r0 + chunk)
        rows = np.arange(r0, r1, dtype=np.float64) + y0
        gx, gy = np.meshgrid(cols, rows)
        pts = np.stack([gx.ravel() - sx, gy.ravel() - sy], axis=1)
        source = profile.tps.transform(pts)
        mapx[r0:r1] = (source[:, 0] + sx).reshape(r1 - r0, w).astype(np.float32)
        mapy[r0:r1] = (source[:, 1] + sy).reshape(r1 - r0, w).astype(np.float32)
    sim = cv2.remap(src_img, mapx, mapy, cv2.INTER_LINEAR,
                    borderMode=cv2.BORDER_CONSTANT, borderValue=255)
    src_ok = cv2.remap(roi.astype(np.uint8), mapx, mapy, cv2.INTER_NEAREST,
                       borderMode=cv2.BORDER_CONSTANT, borderValue=0).astype(bool)
    mask = roi_crop & src_ok
    if not mask.any():
        raise ValueError("simulated mask is empty")

    rng = np.random.default_rng(seed)
    gamma = float(rng.uniform(*appearance.gamma_range))
    contrast = float(rng.uniform(*appearance.contrast_range))
    sigma = float(rng.uniform(*appearance.noise_sigma_range))
    lo, hi = appearance.dropout_blob_count
    n_blobs = int(rng.integers(int(lo), int(hi) + 1))
    f = sim.astype(np.float64) / 255.0
    if gamma != 1.0:
        f = f ** gamma
    if contrast != 1.0:
        f = 0.5 + contrast * (f - 0.5)
    if sigma > 0.0:
        noise = rng.standard_normal(f.shape)
        noise = cv2.GaussianBlur(noise, (0, 0), 2.0)
        std = noise.std()
        if std > 0:
            f = f + (sigma / 255.0) * (noise / std)
    out = np.rint(np.clip(f, 0.0, 1.0) * 255.0).astype(np.uint8)
    for _ in range(n_blobs):
        bx = rng.uniform(0.0, w)
        by = rng.uniform(0.0, h)
        br = rng.uniform(*appearance.dropout_blob_radius)
        cv2.circle(out, (int(round(bx)), int(round(by))), int(round(br)),
                   255, -1)
    out = np.where(mask, out, np.uint8(255))
    cmap = CorrespondenceMap(profile.tps, (sx, sy), (float(x0), float(y0)))
    return out, mask, cmap


# ---------------------------------------------------------------------------
# patch datasets


@dataclass
class PatchCluster:
    label: int
    patches: list
    sources: list


def _pose_of(key) -> tuple:
    if hasattr(key, "pos") and hasattr(key, "direction"):
        d = key.direction
        return float(key.pos[0]), float(key.pos[1]), float(0.0 if d is None else d)
    x, y, d = key
    return float(x), float(y), float(d)


def generate_patch_dataset(impressions, key_points) -> list:
    """Labeled direction-aligned patch clusters across impressions.

    impressions: (img, roi, correspondence_map) triples sharing one source
    frame; key_points: rolled-frame poses (objects with pos/direction, or
    (x, y, direction) triples). A patch enters only with >= 40% foreground;
    a cluster survives only with more than 8 patches. Labels are key-point
    indices, so every patch traces back to its source pose.
    """
    if len(impressions) == 0:
        raise ValueError("need at least one impression")
    clusters = []
    poses = [_pose_of(k) for k in key_points]
    for label, (x, y, d) in enumerate(poses):
        patches, sources = [], []
        for idx, (img, roi, cmap) in enumerate(impressions):
            (pos, dirs) = cmap.map_minutiae([[x, y]], [d])
            spec = PatchSpec((float(pos[0, 0]), float(pos[0, 1])),
                             float(dirs[0]), PATCH_SIZE)
            patch, pmask = extract_patch(img, roi, spec)
            if pmask.mean() >= MIN_PATCH_FOREGROUND:
                patches.append((patch, pmask))
                sources.append(idx)
        if len(patches) > MIN_CLUSTER_PATCHES:
            clusters.append(PatchCluster(label, patches, sources))
    return clusters


# ---------------------------------------------------------------------------
# deviation metrics


@dataclass
class MarkedMinutia:
    pair_id: int
    x: float
    y: float
    direction: float

    def __post_init__(self):
        self.pair_id = int(self.pair_id)
        self.x = float(self.x)
        self.y = float(self.y)
        self.direction = float(wrap180(self.direction))

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


_MINUTIA_HEADER = "pair_id\tx\ty\tdirection"


def minutiae_to_tsv(minutiae) -> str:
    rows = [_MINUTIA_HEADER]
    for m in minutiae:
        rows.append(f"{m.pair_id}\t{m.x!r}\t{m.y!r}\t{m.direction!r}")
    return "\n".join(rows) + "\n"


def minutiae_from_tsv(text: str) -> list:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _MINUTIA_HEADER:
        raise ValueError("unrecognized minutiae table header")
    out, seen = [], set()
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 4:
            raise ValueError("malformed minutiae row")
        m = MarkedMinutia(int(parts[0]), float(parts[1]), float(parts[2]),
                          float(parts[3]))
        if m.pair_id in seen:
            raise ValueError(f"duplicate pair id {m.pair_id}")
        seen.add(m.pair_id)
        out.append(m)
    return out


def pair_minutiae(latent_minutiae, rolled_minutiae) -> list:
    """Join two marked sides on pair id; both sides must cover exactly the
    same ids."""
    lat = {m.pair_id: m for m in latent_minutiae}
    rol = {m.pair_id: m for m in rolled_minutiae}
    if set(lat) != set(rol):
        raise ValueError("latent and rolled minutiae pair ids do not agree")
    return [(lat[k], rol[k]) for k in sorted(lat)]


def _map_pose(transform, pts: np.ndarray, dirs: np.ndarray):
    """Positions and directions under a rigid motion, a spline, or any
    object exposing map_points (directions then via finite differences)."""
    if isinstance(transform, RigidTransform2D):
        return transform.apply(pts), wrap180(dirs + transform.da)
    if isinstance(transform, ThinPlateSpline):
        moved = transform.transform(pts)
        jac = transform.jacobian(pts)
        rad = np.deg2rad(dirs)
        vec = np.stack([np.cos(rad), np.sin(rad)], axis=1)
        out = np.einsum("nij,nj->ni", jac, vec)
        return moved, wrap180(np.degrees(np.arctan2(out[:, 1], out[:, 0])))
    if hasattr(transform, "map_points"):
        h = 0.5
        rad = np.deg2rad(dirs)
        vec = np.stack([np.cos(rad), np.sin(rad)], axis=1)
        moved = transform.map_points(pts)
        ahead = transform.map_points(pts + h * vec)
        behind = transform.map_points(pts - h * vec)
        step = ahead - behind
        return moved, wrap180(np.degrees(np.arctan2(step[:, 1], step[:, 0])))
    raise TypeError(f"unsupported transform type {type(transform).__name__}")


@dataclass
class DeviationReport:
    per_pair: list
    accuracy_loc: float
    accuracy_dir: float
    loc_threshold: float
    dir_threshold: float
    loc_cdf: list = dc_field(default_factory=list)
    dir_cdf: list = dc_field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "per_pair": [[float(a), float(b)] for a, b in self.per_pair],
            "accuracy_loc": self.accuracy_loc,
            "accuracy_dir": self.accuracy_dir,
            "loc_threshold": self.loc_threshold,
            "dir_threshold": self.dir_threshold,
            "loc_cdf": [[int(t), float(f)] for t, f in self.loc_cdf],
            "dir_cdf": [[int(t), float(f)] for t, f in self.dir_cdf],
        }

    def cdf_csv(self) -> str:
        rows = ["kind,threshold,fraction"]
        for t, f in self.loc_cdf:
            rows.append(f"location,{t},{f!r}")
        for t, f in self.dir_cdf:
            rows.append(f"direction,{t},{f!r}")
        return "\n".join(rows) + "\n"


def eval_deviations(gt_pairs, transform, loc_threshold: float = 20.0,
                    dir_threshold: float = 15.0) -> DeviationReport:
    """Deviation report of ground-truth minutia pairs under a transform.

    Latent minutiae are mapped into the rolled frame; location deviation is
    Euclidean, direction deviation the wrapped absolute difference in
    [0, 180]. Accuracies count pairs within the thresholds; empirical CDFs
    are sampled every 1 px (up to the observed maximum) and every 1 degree
    (up to 180).
    """
    pairs = list(gt_pairs)
    if not pairs:
        raise ValueError("need at least one minutia pair")
    lat = np.array([[m.x, m.y] for m, _ in pairs], dtype=np.float64)
    lat_dirs = np.array([m.direction for m, _ in pairs], dtype=np.float64)
    rol = np.array([[m.x, m.y] for _, m in pairs], dtype=np.float64)
    rol_dirs = np.array([m.direction for _, m in pairs], dtype=np.float64)
    moved, moved_dirs = _map_pose(transform, lat, lat_dirs)
    loc = np.linalg.norm(moved - rol, axis=1)
    drc = np.abs(wrap180(moved_dirs - rol_dirs))
    per_pair = [(float(a), float(b)) for a, b in zip(loc, drc)]
    acc_loc = float((loc <= loc_threshold).mean())
    acc_dir = float((drc <= dir_threshold).mean())
    loc_cdf = [(t, float((loc <= t).mean()))
               for t in range(int(np.ceil(loc.max())) + 1)]
    dir_cdf = [(t, float((drc <= t).mean())) for t in range(181)]
    return DeviationReport(per_pair, acc_loc, acc_dir,
                           float(loc_threshold), float(dir_threshold),
                           loc_cdf, dir_cdf)


# ---------------------------------------------------------------------------
# registration score


@dataclass
class ScoreReport:
    score: float
    empty_overlap: bool
    per_point: list
    points: list

    def to_json_dict(self) -> dict:
        return {"score": self.score, "empty_overlap": self.empty_overlap,
                "per_point": [float(s) for s in self.per_point]}


def matching_score(warped_latent_img, warped_latent_roi, rolled_img, rolled_roi,
                   rolled_field=None, describe=None, failed: bool = False,
                   interval: float = 24.0) -> ScoreReport:
    """Mean descriptor similarity over a lattice on the ROI overlap.

    The latent must already sit in the rolled frame. Each lattice point
    takes the rolled local ridge direction; both patches are described by
    the given backend (default reference descriptors). A failed
    registration scores 0; an empty overlap scores 0 with the
    empty_overlap flag set.
    """
    if failed:
        return ScoreReport(0.0, False, [], [])
    describe = describe or describe_patch
    warped_latent_img = check_gray_image(warped_latent_img, "warped_latent_img")
    rolled_img = check_gray_image(rolled_img, "rolled_img")
    warped_latent_roi = check_mask(warped_latent_roi, warped_latent_img.shape,
                                   "warped_latent_roi")
    rolled_roi = check_mask(rolled_roi, rolled_img.shape, "rolled_roi")
    if warped_latent_img.shape != rolled_img.shape:
        raise ValueError("warped latent and rolled images must share a canvas")
    overlap = warped_latent_roi & rolled_roi
    pts = grid_sample_points(overlap, GridConfig(interval, interval, 0.0),
                             side="rolled")
    if not pts:
        return ScoreReport(0.0, True, [], [])
    if rolled_field is None:
        rolled_field = estimate_orientation_field(rolled_img, rolled_roi)
    pts = assign_directions(pts, rolled_field)
    sims = []
    for p in pts:
        spec = PatchSpec((p.x, p.y), p.direction or 0.0, PATCH_SIZE)
        rimg, rmask = extract_patch(rolled_img, rolled_roi, spec)
        limg, lmask = extract_patch(warped_latent_img, warped_latent_roi, spec)
        sims.append(similarity(describe(rimg, rmask), describe(limg, lmask)))
    return ScoreReport(float(np.mean(sims)), False, sims, pts)
