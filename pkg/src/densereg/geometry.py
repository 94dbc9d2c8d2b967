"""Planar geometry helpers and the angle conventions used across the package.

Conventions
-----------
* Pixel coordinates: x grows rightward, y grows downward.
* Angles are degrees. A positive rotation turns the +x axis toward +y,
  which reads as clockwise on screen.
* Ridge orientations are pi-periodic and normalized to [-90, 90).
* Point directions are full-circle and normalized to [-180, 180).

Every rotation in the package goes through :func:`rotation_matrix` /
:func:`rigid_params_to_matrix` so the sign convention lives in one place.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "wrap180",
    "wrap90",
    "rotation_matrix",
    "rigid_params_to_matrix",
    "invert_affine",
    "apply_affine",
    "circular_mean_deg",
    "angle_diff_deg",
]


def wrap180(angle):
    """Wrap an angle (degrees) into [-180, 180). Works on scalars and arrays."""
    return (np.asarray(angle, dtype=float) + 180.0) % 360.0 - 180.0


def wrap90(angle):
    """Wrap an orientation (degrees, pi-periodic) into [-90, 90)."""
    return (np.asarray(angle, dtype=float) + 90.0) % 180.0 - 90.0


def rotation_matrix(angle_deg: float) -> np.ndarray:
    """2x2 rotation matrix for our convention: R @ (1,0) = (cos a, sin a).

    With y pointing down this turns +x toward +y for positive angles.
    """
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]], dtype=float)


def rigid_params_to_matrix(dx: float, dy: float, da: float,
                           pivot=(0.0, 0.0)) -> np.ndarray:
    """2x3 affine for p' = R(da) @ (p - pivot) + pivot + (dx, dy)."""
    r = rotation_matrix(da)
    pivot = np.asarray(pivot, dtype=float)
    t = pivot + np.array([dx, dy], dtype=float) - r @ pivot
    return np.hstack([r, t[:, None]])


def invert_affine(m: np.ndarray) -> np.ndarray:
    """Invert a 2x3 affine matrix."""
    a = np.asarray(m, dtype=float)
    r_inv = np.linalg.inv(a[:, :2])
    t_inv = -r_inv @ a[:, 2]
    return np.hstack([r_inv, t_inv[:, None]])


def apply_affine(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 2x3 affine to an (n, 2) array of (x, y) points."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = pts @ np.asarray(m)[:, :2].T + np.asarray(m)[:, 2]
    return out[0] if single else out


def circular_mean_deg(angles) -> float:
    """Circular mean of angles in degrees, wrapped to [-180, 180).

    The degenerate case (resultant vector ~0, e.g. two opposite angles)
    falls back to 0 by the atan2(0, 0) = 0 convention.
    """
    a = np.deg2rad(np.asarray(angles, dtype=float))
    return float(wrap180(np.rad2deg(np.arctan2(np.mean(np.sin(a)),
                                               np.mean(np.cos(a))))))


def angle_diff_deg(a, b):
    """Signed wrapped difference a - b in [-180, 180) degrees."""
    return wrap180(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
