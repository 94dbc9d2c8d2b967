"""Rigid and thin-plate-spline transforms between image planes.

Conventions shared package-wide: points are (x, y) row vectors, angles are
degrees with positive rotation turning +x toward +y, and a rigid transform
with pivot c maps p to R(da) @ (p - c) + c + t. Thin-plate splines follow
the classic U(r) = r^2 log r formulation with an affine part and optional
ridge regularization on the bending weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_gray_image, check_mask, check_points
from .geometry import (circular_mean_deg, rigid_params_to_matrix,
                       rotation_matrix, wrap180)

__all__ = [
    "RigidTransform2D",
    "ThinPlateSpline",
    "fit_tps",
    "average_rigid",
    "apply_transform",
    "transform_to_dict",
    "transform_from_dict",
]

_COLLINEAR_RTOL = 1e-6
_RIDGE = 1e-6


@dataclass
class RigidTransform2D:
    dx: float = 0.0
    dy: float = 0.0
    da: float = 0.0
    pivot: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.dx = float(self.dx)
        self.dy = float(self.dy)
        self.da = float(wrap180(self.da))
        self.pivot = (float(self.pivot[0]), float(self.pivot[1]))

    def as_matrix(self) -> np.ndarray:
        """2x3 affine mapping input points to output points."""
        return rigid_params_to_matrix(self.dx, self.dy, self.da, self.pivot)

    def apply(self, points) -> np.ndarray:
        pts = check_points(points, "points")
        m = self.as_matrix()
        out = pts @ m[:, :2].T + m[:, 2]
        return out[0] if np.asarray(points).ndim == 1 else out

    def invert(self) -> "RigidTransform2D":
        return RigidTransform2D(-self.dx, -self.dy, -self.da,
                                (self.pivot[0] + self.dx, self.pivot[1] + self.dy))

    def compose(self, second: "RigidTransform2D") -> "RigidTransform2D":
        """Transform equal to applying self first, then second."""
        c1 = np.array(self.pivot)
        c2 = np.array(second.pivot)
        t1 = np.array([self.dx, self.dy])
        t2 = np.array([second.dx, second.dy])
        r2 = rotation_matrix(second.da)
        t = r2 @ (c1 + t1 - c2) + c2 + t2 - c1
        return RigidTransform2D(float(t[0]), float(t[1]),
                                wrap180(self.da + second.da),
                                (float(c1[0]), float(c1[1])))


def average_rigid(src, dst, rotations_deg) -> RigidTransform2D:
    """Single rigid motion summarizing per-point correspondences.

    The angle is the circular mean of the per-pair rotations, the pivot the
    source centroid, and the translation the mean residual after rotating
    the sources about that pivot.
    """
    s = check_points(src, "src")
    d = check_points(dst, "dst")
    rot = np.asarray(rotations_deg, dtype=np.float64).ravel()
    if len(s) == 0 or len(s) != len(d) or len(rot) != len(s):
        raise ValueError("need equal, nonzero numbers of points and rotations")
    da = circular_mean_deg(rot)
    pivot = s.mean(axis=0)
    r = rotation_matrix(da)
    moved = (s - pivot) @ r.T + pivot
    t = (d - moved).mean(axis=0)
    return RigidTransform2D(float(t[0]), float(t[1]), float(da),
                            (float(pivot[0]), float(pivot[1])))


def _tps_u(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r, written on squared distances; U(0) = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = 0.5 * r2 * np.log(r2)
    return np.where(r2 > 0.0, u, 0.0)


def _pair_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


class ThinPlateSpline(TransformerMixin, BaseEstimator):
    """2-D thin-plate-spline warp fitted on control point pairs.

    lam >= 0 adds ridge regularization on the bending energy; lam = 0
    interpolates the targets exactly. fit raises on fewer than 3 control
    points or a collinear configuration (the affine part is then
    underdetermined).
    """

    def __init__(self, lam: float = 0.0):
        self.lam = lam

    def fit(self, X, y):
        src = check_points(X, "X")
        dst = check_points(y, "y")
        if src.shape != dst.shape or len(src) < 3:
            raise ValueError("need >= 3 matched control point pairs")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        n = len(src)
        p = np.concatenate([np.ones((n, 1)), src], axis=1)
        sv = np.linalg.svd(p, compute_uv=False)
        if sv[-1] <= _COLLINEAR_RTOL * sv[0]:
            raise ValueError("control points are collinear")
        k = _tps_u(_pair_sq_dists(src, src)) + self.lam * np.eye(n)
        sys = np.zeros((n + 3, n + 3))
        sys[:n, :n] = k
        sys[:n, n:] = p
        sys[n:, :n] = p.T
        rhs = np.zeros((n + 3, 2))
        rhs[:n] = dst
        sol = self._solve(sys, rhs)
        self.control_points_ = src
        self.weights_ = sol[:n]
        self.affine_ = sol[n:]
        return self

    @staticmethod
    def _solve(sys: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        def attempt(a):
            sol = np.linalg.solve(a, rhs)
            sol += np.linalg.solve(a, rhs - a @ sol)  # one refinement step
            return sol

        try:
            sol = attempt(sys)
            if np.isfinite(sol).all():
                return sol
        except np.linalg.LinAlgError:
            pass
        ridged = sys.copy()
        n = sys.shape[0] - 3
        ridged[:n, :n] += _RIDGE * np.eye(n)
        return attempt(ridged)

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "weights_"):
            raise ValueError("ThinPlateSpline is not fitted")
        pts = check_points(X, "X")
        single = np.asarray(X).ndim == 1
        p = np.concatenate([np.ones((len(pts), 1)), pts], axis=1)
        u = _tps_u(_pair_sq_dists(pts, self.control_points_))
        out = p @ self.affine_ + u @ self.weights_
        return out[0] if single else out

    def jacobian(self, X) -> np.ndarray:
        """(n, 2, 2) spatial derivatives, J[k, i, j] = d f_i / d x_j at
        point k. grad U(r) = (p - c)(log r^2 + 1), taken as 0 at r = 0."""
        if not hasattr(self, "weights_"):
            raise ValueError("ThinPlateSpline is not fitted")
        pts = check_points(X, "X")
        diff = pts[:, None, :] - self.control_points_[None, :, :]
        d2 = np.einsum("nmi,nmi->nm", diff, diff)
        with np.errstate(divide="ignore"):
            g = np.log(d2) + 1.0
        g = np.where(d2 > 0.0, g, 0.0)
        j = np.einsum("mo,nm,nmi->noi", self.weights_, g, diff)
        j += self.affine_[1:].T[None, :, :]
        return j


def fit_tps(src, dst, lam: float = 0.0) -> ThinPlateSpline:
    return ThinPlateSpline(lam=lam).fit(src, dst)


def _tps_inverse_maps(spline: ThinPlateSpline, out_shape) -> tuple:
    """Dense output-to-input coordinate maps for remapping, built from the
    spline fitted in the opposite direction through the same controls."""
    ctrl = spline.control_points_
    images = spline.transform(ctrl)
    inverse = fit_tps(images, ctrl, lam=spline.lam)
    h, w = out_shape
    mapx = np.empty((h, w), dtype=np.float32)
    mapy = np.empty((h, w), dtype=np.float32)
    xs = np.arange(w, dtype=np.float64)
    chunk = max(1, int(2e6) // max(w, 1))
    for y0 in range(0, h, chunk):
        y1 = min(h, y0 + chunk)
        ys = np.arange(y0, y1, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        src = inverse.transform(pts)
        mapx[y0:y1] = src[:, 0].reshape(y1 - y0, w).astype(np.float32)
        mapy[y0:y1] = src[:, 1].reshape(y1 - y0, w).astype(np.float32)
    return mapx, mapy


def apply_transform(transform, img: np.ndarray, mask=None, out_shape=None):
    """Warp an image (and optionally its mask) by a fitted transform.

    The output pixel at p takes the input value at transform^-1(p):
    bilinear with white fill for intensities, nearest with background fill
    for masks. Returns (warped_img, warped_mask_or_None).
    """
    img = check_gray_image(img, "img")
    if mask is not None:
        mask = check_mask(mask, img.shape, "mask")
    h, w = img.shape if out_shape is None else (int(out_shape[0]), int(out_shape[1]))
    if isinstance(transform, RigidTransform2D):
        m_oi = transform.invert().as_matrix()
        warped = cv2.warpAffine(img, m_oi[:2], (w, h),
                                flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                                borderMode=cv2.BORDER_CONSTANT, borderValue=255)
        wmask = None
        if mask is not None:
            wmask = cv2.warpAffine(mask.astype(np.uint8), m_oi[:2], (w, h),
                                   flags=cv2.INTER_NEAREST | cv2.WARP_INVERSE_MAP,
                                   borderMode=cv2.BORDER_CONSTANT,
                                   borderValue=0).astype(bool)
        return warped, wmask
    if isinstance(transform, ThinPlateSpline):
        mapx, mapy = _tps_inverse_maps(transform, (h, w))
        warped = cv2.remap(img, mapx, mapy, cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=255)
        wmask = None
        if mask is not None:
            wmask = cv2.remap(mask.astype(np.uint8), mapx, mapy, cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_CONSTANT,
                              borderValue=0).astype(bool)
        return warped, wmask
    raise TypeError(f"unsupported transform type {type(transform).__name__}")


def transform_to_dict(transform) -> dict:
    """JSON-ready dict; floats keep full precision so the round trip is
    exact."""
    if isinstance(transform, RigidTransform2D):
        return {"type": "rigid", "dx": transform.dx, "dy": transform.dy,
                "da": transform.da, "pivot": list(transform.pivot)}
    if isinstance(transform, ThinPlateSpline):
        if not hasattr(transform, "weights_"):
            raise ValueError("cannot serialize an unfitted spline")
        return {"type": "tps", "lam": float(transform.lam),
                "control_points": transform.control_points_.tolist(),
                "weights": transform.weights_.tolist(),
                "affine": transform.affine_.tolist()}
    raise TypeError(f"unsupported transform type {type(transform).__name__}")


def transform_from_dict(data: dict):
    kind = data.get("type")
    if kind == "rigid":
        return RigidTransform2D(data["dx"], data["dy"], data["da"],
                                tuple(data["pivot"]))
    if kind == "tps":
        spline = ThinPlateSpline(lam=data["lam"])
        spline.control_points_ = np.asarray(data["control_points"], dtype=np.float64)
        spline.weights_ = np.asarray(data["weights"], dtype=np.float64)
        spline.affine_ = np.asarray(data["affine"], dtype=np.float64)
        if spline.control_points_.shape[1] != 2 or spline.weights_.shape != spline.control_points_.shape \
                or spline.affine_.shape != (3, 2):
            raise ValueError("malformed spline payload")
        return spline
    raise ValueError(f"unknown transform type {kind!r}")
