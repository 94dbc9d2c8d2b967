"""Synthetic ridge-image fixtures shared across the test suite.

Images are blended radial wave systems with phase singularities (which act
like ridge endings and bifurcations) and smooth amplitude texture, so both
across-ridge phase and along-ridge landmarks exist; a plain parallel-ridge
pattern would be unregisterable along the ridge direction by any method.
Mated pairs come with an analytic ground-truth latent-to-rolled map.
"""

from __future__ import annotations

import cv2
import numpy as np

from densereg.geometry import rigid_params_to_matrix
from densereg.transform import RigidTransform2D, fit_tps

RIDGE_PERIOD = 9.5
MINUTIA_DENSITY = 3e-4  # singularities per px^2
TEXTURE = 0.3


def ridge_image(h: int, w: int, seed: int, period: float = RIDGE_PERIOD,
                minutia_density: float = MINUTIA_DENSITY,
                texture: float = TEXTURE) -> np.ndarray:
    """Synthetic ridge pattern, uint8 (h, w), ridge period ~period px."""
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = np.zeros((h, w))
    ks = r.uniform(0.8, 1.2, 3)
    ks = ks / ks.sum() * (2.0 * np.pi / period)
    for k in ks:
        cx = r.uniform(-0.5 * w, 1.5 * w)
        cy = r.uniform(-0.5 * h, 1.5 * h)
        phase += k * np.hypot(xx - cx, yy - cy)
    for _ in range(int(round(minutia_density * h * w))):
        mx, my = r.uniform(0, w), r.uniform(0, h)
        phase += r.choice([-1.0, 1.0]) * np.arctan2(yy - my, xx - mx)
    amp = np.full((h, w), 55.0)
    if texture > 0:
        t = cv2.GaussianBlur(r.normal(0.0, 1.0, (h, w)), (0, 0), 12)
        amp *= 1.0 + texture * t / max(np.abs(t).max(), 1e-9)
    img = 127.5 + amp * np.cos(phase)
    return np.clip(img, 0, 255).astype(np.uint8)


def ellipse_roi(h: int, w: int, scale: float = 0.92) -> np.ndarray:
    roi = np.zeros((h, w), np.uint8)
    cv2.ellipse(roi, (int((w - 1) / 2), int((h - 1) / 2)),
                (int(w * scale / 2), int(h * scale / 2)),
                0.0, 0.0, 360.0, 255, -1)
    return roi


def rolled_impression(seed: int, size: int = 384):
    """(img, roi) for a full reference impression."""
    img = ridge_image(size, size, seed)
    roi = ellipse_roi(size, size)
    img = img.copy()
    img[roi == 0] = 255
    return img, roi


def add_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    r = np.random.default_rng(seed)
    out = img.astype(np.float64) + r.normal(0.0, sigma, img.shape)
    return np.clip(out, 0, 255).astype(np.uint8)


def mated_pair(seed: int, rolled_size: int = 384, latent_size: int = 288,
               max_shift: float = 45.0, max_rot: float = 36.0,
               tps_sigma: float = 2.5, noise_sigma: float = 0.0):
    """Rolled impression plus a latent warped off it by a known map.

    Returns (rolled_img, rolled_roi, latent_img, latent_roi, gt) where gt
    maps latent coordinates onto rolled coordinates (rigid composed with
    smooth TPS jitter of control points, so gt.transform is exact
    everywhere by construction).
    """
    r = np.random.default_rng(seed)
    rolled_img, rolled_roi = rolled_impression(seed, rolled_size)

    c = (latent_size - 1) / 2.0
    offset = (rolled_size - latent_size) / 2.0
    da = r.uniform(-max_rot, max_rot)
    tx = offset + r.uniform(-max_shift, max_shift)
    ty = offset + r.uniform(-max_shift, max_shift)
    rigid = RigidTransform2D(dx=tx, dy=ty, da=da, pivot=(c, c))

    n = 6
    grid = np.linspace(0, latent_size - 1, n)
    src = np.stack(np.meshgrid(grid, grid), axis=-1).reshape(-1, 2)
    dst = rigid.apply(src) + r.normal(0.0, tps_sigma, (n * n, 2))
    gt = fit_tps(src, dst, lam=0.0)

    yy, xx = np.mgrid[0:latent_size, 0:latent_size].astype(np.float64)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    mapped = gt.transform(pts).astype(np.float32)
    mapx = mapped[:, 0].reshape(latent_size, latent_size)
    mapy = mapped[:, 1].reshape(latent_size, latent_size)
    latent_img = cv2.remap(rolled_img, mapx, mapy, cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=255)
    src_ok = cv2.remap(rolled_roi, mapx, mapy, cv2.INTER_NEAREST,
                       borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    latent_roi = ellipse_roi(latent_size, latent_size)
    latent_roi[src_ok == 0] = 0
    latent_img = latent_img.copy()
    latent_img[latent_roi == 0] = 255
    if noise_sigma > 0:
        noisy = add_noise(latent_img, noise_sigma, seed + 1)
        latent_img = np.where(latent_roi > 0, noisy, latent_img).astype(np.uint8)
    return rolled_img, rolled_roi, latent_img, latent_roi, gt


def patch_with_pose(seed: int, dx: float, dy: float, da: float,
                    noise_sigma: float = 0.0, patch: int = 200):
    """A rolled patch and a latent patch offset from it by exactly
    (dx, dy, da): latent content at q sits at R(da)(q - c) + c + t in the
    rolled patch. Returns (rolled_patch, latent_patch) as (img, mask)."""
    big = ridge_image(2 * patch, 2 * patch, seed)
    y0 = x0 = patch // 2
    rolled = np.ascontiguousarray(big[y0:y0 + patch, x0:x0 + patch])
    mask = np.full((patch, patch), 255, np.uint8)
    m = rigid_params_to_matrix(dx, dy, da, pivot=((patch - 1) / 2.0,) * 2)
    latent = cv2.warpAffine(rolled, m[:2], (patch, patch),
                            flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                            borderMode=cv2.BORDER_CONSTANT, borderValue=255)
    ok = cv2.warpAffine(mask, m[:2], (patch, patch),
                        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                        borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    lmask = (ok >= 254).astype(np.uint8) * 255
    if noise_sigma > 0:
        latent = add_noise(latent, noise_sigma, seed + 1)
    return (rolled, mask), (latent, lmask)
