"""Relative rigid alignment of patch pairs by ridge-feature correlation.

The estimate theta = (dx, dy, da) maps the latent patch onto the rolled
patch: latent content at patch coordinate q appears at
R(da) @ (q - c) + c + (dx, dy) in the rolled frame.

The score of a candidate pose is the normalized cross-correlation of
coherence-weighted doubled-angle maps (cos 2O, sin 2O of the smoothed
gradient tensor) plus a contrast-normalized ridge-energy channel, sampled
on a half-resolution grid. Support masks are binary, so by Cauchy-Schwarz
the score never exceeds 1 and equals 1 only where the overlapping features
match exactly; fractional-support weighting would inflate scores at
partial-overlap lags and corrupt the argmax.

The search is exhaustive over the configured lattice in two passes: a
cheap correlation of block-averaged maps scores every rotation and picks
a window of candidates, then the half-resolution correlation scores every
translation for the windowed rotations. Translation surfaces come from
FFT cross-correlation at integer sample lags; the translation lattice
lands on integer lags except for odd 1 px steps, which are defined as
bilinear interpolation of the neighboring lags (still bounded by 1, since
the bound survives convex combination).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import cv2
import numpy as np

from ._validation import check_patch_pair
from .geometry import rigid_params_to_matrix, rotation_matrix, wrap180
from .sampling import SamplePoint

__all__ = [
    "AlignmentEstimate",
    "AlignStageConfig",
    "COARSE_ALIGN",
    "PRECISE_ALIGN",
    "PATCH_SIZE",
    "MIN_OVERLAP_PIXELS",
    "align_patches",
    "PairAligner",
    "adjust_point",
    "alignment_losses",
]

PATCH_SIZE = 200
MIN_OVERLAP_PIXELS = 400  # 1% of a patch; below this alignment is meaningless

_STRIDE = 2          # px per feature sample
_PRE_BLOCK = 8       # px per sample in the rotation pre-pass
_TENSOR_SIGMA = 3.0
_ENERGY_SIGMA = 1.0
_ENERGY_WEIGHT = 0.75
_ROT_WINDOW = 5      # refined rotations each side of the pre-pass pick
_EPS = 1e-9


@dataclass
class AlignmentEstimate:
    dx: float
    dy: float
    da: float
    score: float
    insufficient_overlap: bool = False


@dataclass
class AlignStageConfig:
    max_translation: float
    max_rotation: float
    translation_step: float
    rotation_step: float

    def __post_init__(self):
        if self.translation_step < 1.0 or self.rotation_step < 1.0:
            raise ValueError("steps must be >= 1 px / 1 deg")
        if self.max_translation <= 0 or self.max_rotation <= 0:
            raise ValueError("search bounds must be positive")


COARSE_ALIGN = AlignStageConfig(50.0, 40.0, 2.0, 2.0)
PRECISE_ALIGN = AlignStageConfig(25.0, 20.0, 1.0, 1.0)


def _search_values(bound: float, step: float) -> np.ndarray:
    n = int(round(2.0 * bound / step)) + 1
    return np.linspace(-bound, bound, n)


def _fft_len(n_map: int, lag_max: int) -> int:
    # Circular correlation equals linear for |lag| <= lag_max once the
    # transform is at least n_map + lag_max wide; pad to a multiple of 8.
    return int(np.ceil((n_map + lag_max + 1) / 8.0) * 8)


def _patch_feature_stack(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(4, 100, 100) float32 half-resolution stack [c0, c1, c2, support].

    c0, c1 are the doubled-angle tensor components scaled by coherence;
    c2 is the smoothed gradient energy standardized over the foreground
    (it oscillates across ridges, which pins down translation); support
    is binary. All channels are zero outside the support.
    """
    img, mask = check_patch_pair(img, mask, PATCH_SIZE, "patch")
    # Shrink the mask a little so the ridge/background transition at the
    # boundary does not leak gradient energy into the features.
    kern = np.ones((5, 5), np.uint8)
    inner = cv2.erode((mask > 0).astype(np.uint8), kern)
    gx = cv2.Sobel(img, cv2.CV_32F, 1, 0, ksize=3)
    gy = cv2.Sobel(img, cv2.CV_32F, 0, 1, ksize=3)
    gx *= inner
    gy *= inner
    a = cv2.GaussianBlur(gx * gx - gy * gy, (0, 0), _TENSOR_SIGMA)
    b = cv2.GaussianBlur(2.0 * gx * gy, (0, 0), _TENSOR_SIGMA)
    den = cv2.GaussianBlur(gx * gx + gy * gy, (0, 0), _TENSOR_SIGMA)
    eng = cv2.GaussianBlur(gx * gx + gy * gy, (0, 0), _ENERGY_SIGMA)

    n = PATCH_SIZE // _STRIDE

    def down(arr):
        return arr.reshape(n, _STRIDE, n, _STRIDE).mean(axis=(1, 3))

    sup = down(inner.astype(np.float32)) >= 0.5
    a, b, den, eng = down(a), down(b), down(den), down(eng)
    if sup.any():
        den_eps = 1e-3 * float(den[sup].mean()) + 1e-12
    else:
        den_eps = 1e-12
    c0 = np.where(sup, a / (den + den_eps), 0.0)
    c1 = np.where(sup, b / (den + den_eps), 0.0)
    c2 = np.zeros_like(c0)
    if sup.any():
        mu = float(eng[sup].mean())
        sd = float(eng[sup].std())
        if sd > 1e-12:
            c2 = np.where(sup, _ENERGY_WEIGHT * (eng - mu) / sd, 0.0)
    return np.stack([c0, c1, c2, sup.astype(np.float32)]).astype(np.float32)


def _block_reduce(stack: np.ndarray) -> np.ndarray:
    """Box-average the half-resolution stack down to the pre-pass grid,
    re-binarizing support and re-masking the channels."""
    f = _PRE_BLOCK // _STRIDE
    n = stack.shape[1] // f
    s = stack.reshape(stack.shape[0], n, f, n, f).mean(axis=(2, 4))
    sup = (s[3] >= 0.5).astype(np.float32)
    out = s * sup
    out[3] = sup
    return out.astype(np.float32)


def _rotated_spectra(stack: np.ndarray, da: float, fft: int,
                     conjugate: bool) -> np.ndarray:
    """Spectra of the five correlation maps [c0, c1, c2, E, S] for the
    feature stack rotated by +da about the patch center.

    Rotating content by da rotates gradients with it, which turns the
    doubled-angle pair by 2*da; the energy channel and support only move.
    Support is re-binarized and the channels re-masked after the warp so
    the Cauchy-Schwarz bound on the score stays exact.
    """
    if abs(da) < 1e-12:
        c0, c1, c2, sup = stack
    else:
        n = stack.shape[1]
        c = (n - 1) / 2.0
        m = rigid_params_to_matrix(0.0, 0.0, -da, pivot=(c, c))
        warped = cv2.warpAffine(
            np.ascontiguousarray(stack.transpose(1, 2, 0)), m[:2], (n, n),
            flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
            borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
        c0w, c1w, c2w, supw = warped.transpose(2, 0, 1)
        sup = (supw >= 0.5).astype(np.float32)
        r = np.deg2rad(2.0 * da)
        cr, sr = np.float32(np.cos(r)), np.float32(np.sin(r))
        c0 = (cr * c0w - sr * c1w) * sup
        c1 = (sr * c0w + cr * c1w) * sup
        c2 = c2w * sup
    energy = c0 * c0 + c1 * c1 + c2 * c2
    spec = np.fft.rfft2(np.stack([c0, c1, c2, energy, sup]), s=(fft, fft))
    spec = spec.astype(np.complex64)
    return np.conj(spec) if conjugate else spec


def _surfaces(ra: np.ndarray, lb: np.ndarray, fft: int) -> np.ndarray:
    """Correlation volumes (R, 4, fft, fft): numerator, E_A over B support,
    E_B over A support, and overlap, for rolled spectra ra (5, ...) against
    per-rotation conjugated latent spectra lb (R, 5, ...)."""
    spec = np.empty((lb.shape[0], 4) + ra.shape[1:], np.complex64)
    spec[:, 0] = ra[0] * lb[:, 0] + ra[1] * lb[:, 1] + ra[2] * lb[:, 2]
    spec[:, 1] = ra[3] * lb[:, 4]
    spec[:, 2] = ra[4] * lb[:, 3]
    spec[:, 3] = ra[4] * lb[:, 4]
    return np.fft.irfft2(spec, s=(fft, fft))


class _Lattice:
    """Search lattice plus gather indices into the correlation volumes."""

    def __init__(self, cfg: AlignStageConfig):
        self.rotations = _search_values(cfg.max_rotation, cfg.rotation_step)
        self.shifts = _search_values(cfg.max_translation, cfg.translation_step)

        n_fine = PATCH_SIZE // _STRIDE
        lag_fine = int(np.ceil(cfg.max_translation / _STRIDE))
        self.fft_fine = _fft_len(n_fine, lag_fine)
        lags = self.shifts / _STRIDE
        lo = np.floor(lags).astype(int)
        self._fy0 = lo % self.fft_fine
        self._fy1 = (lo + 1) % self.fft_fine
        self._fw = (lags - lo).astype(np.float32)

        n_pre = PATCH_SIZE // _PRE_BLOCK
        lag_pre = int(np.ceil(cfg.max_translation / _PRE_BLOCK))
        self.fft_pre = _fft_len(n_pre, lag_pre)
        self._py = np.arange(-lag_pre, lag_pre + 1) % self.fft_pre

        self._penalty_t2 = (self.shifts[None, :] ** 2
                            + self.shifts[:, None] ** 2).ravel()

    def gather_pre(self, vol: np.ndarray) -> np.ndarray:
        return vol[..., self._py[:, None], self._py[None, :]]

    def gather_fine(self, vol: np.ndarray) -> np.ndarray:
        iy0, iy1, wy = self._fy0[:, None], self._fy1[:, None], self._fw[:, None]
        ix0, ix1, wx = self._fy0[None, :], self._fy1[None, :], self._fw[None, :]
        v00 = vol[..., iy0, ix0]
        v01 = vol[..., iy0, ix1]
        v10 = vol[..., iy1, ix0]
        v11 = vol[..., iy1, ix1]
        return ((1 - wy) * (1 - wx) * v00 + (1 - wy) * wx * v01
                + wy * (1 - wx) * v10 + wy * wx * v11)


@dataclass
class _RolledState:
    pre_spec: np.ndarray   # (5, fft_pre, fft_pre//2+1)
    fine_spec: np.ndarray  # (5, fft_fine, fft_fine//2+1)


@dataclass
class _LatentState:
    pre_spec: np.ndarray   # (R, 5, ...) conjugated, every lattice rotation
    fine_stack: np.ndarray


def _insufficient() -> AlignmentEstimate:
    return AlignmentEstimate(0.0, 0.0, 0.0, 0.0, insufficient_overlap=True)


class PairAligner:
    """Batch-friendly aligner: caches per-point feature spectra so one
    patch can be aligned against many partners cheaply. Results are
    independent of insertion and call order."""

    def __init__(self, cfg: AlignStageConfig,
                 min_overlap_pixels: int = MIN_OVERLAP_PIXELS):
        self.cfg = cfg
        self.min_overlap = float(min_overlap_pixels)
        self._lat = _Lattice(cfg)
        self._rolled: dict[int, _RolledState] = {}
        self._latent: dict[int, _LatentState] = {}

    @property
    def rotations(self) -> np.ndarray:
        return self._lat.rotations

    @property
    def shifts(self) -> np.ndarray:
        return self._lat.shifts

    def set_rolled(self, key: int, img: np.ndarray, mask: np.ndarray) -> None:
        fine = _patch_feature_stack(img, mask)
        pre = _block_reduce(fine)
        self._rolled[key] = _RolledState(
            pre_spec=_rotated_spectra(pre, 0.0, self._lat.fft_pre, False),
            fine_spec=_rotated_spectra(fine, 0.0, self._lat.fft_fine, False))

    def set_latent(self, key: int, img: np.ndarray, mask: np.ndarray) -> None:
        fine = _patch_feature_stack(img, mask)
        pre = _block_reduce(fine)
        spec = np.stack([_rotated_spectra(pre, da, self._lat.fft_pre, True)
                         for da in self._lat.rotations])
        self._latent[key] = _LatentState(pre_spec=spec, fine_stack=fine)

    def drop_latent(self, key: int) -> None:
        self._latent.pop(key, None)

    def _fine_spectra(self, state: _LatentState, r_idx: int,
                      cache: dict | None) -> np.ndarray:
        if cache is not None and r_idx in cache:
            return cache[r_idx]
        spec = _rotated_spectra(state.fine_stack, self._lat.rotations[r_idx],
                                self._lat.fft_fine, True)
        if cache is not None:
            cache[r_idx] = spec
        return spec

    def align(self, latent_key: int, rolled_key: int,
              cache: dict | None = None) -> AlignmentEstimate:
        """Best (dx, dy, da) on the lattice with its score in [0, 1].

        cache, if given, memoizes the latent's per-rotation spectra across
        align calls that share the latent; it only avoids recompute and
        never changes the result.
        """
        rolled = self._rolled[rolled_key]
        latent = self._latent[latent_key]
        lat = self._lat

        # Rotation pre-pass: every lattice rotation, block-grid lags only.
        vol = _surfaces(rolled.pre_spec, latent.pre_spec, lat.fft_pre)
        g = lat.gather_pre(vol).astype(np.float64)
        n, ea, eb, ov = g[:, 0], g[:, 1], g[:, 2], g[:, 3]
        valid = ((ov * _PRE_BLOCK * _PRE_BLOCK >= self.min_overlap)
                 & (ea > _EPS) & (eb > _EPS))
        if not valid.any():
            return _insufficient()
        score = np.where(valid, n / np.sqrt(np.maximum(ea * eb, _EPS)), -np.inf)
        profile = score.reshape(score.shape[0], -1).max(axis=1)
        order = np.lexsort((np.arange(profile.size),
                            np.abs(lat.rotations), -profile))
        r0 = int(order[0])

        window = np.arange(max(0, r0 - _ROT_WINDOW),
                           min(lat.rotations.size, r0 + _ROT_WINDOW + 1))
        lb = np.stack([self._fine_spectra(latent, int(r), cache)
                       for r in window])
        vol = _surfaces(rolled.fine_spec, lb, lat.fft_fine)
        g = lat.gather_fine(vol).astype(np.float64)
        n, ea, eb, ov = g[:, 0], g[:, 1], g[:, 2], g[:, 3]
        valid = ((ov * _STRIDE * _STRIDE >= self.min_overlap)
                 & (ea > _EPS) & (eb > _EPS))
        if not valid.any():
            return _insufficient()
        score = np.where(valid, n / np.sqrt(np.maximum(ea * eb, _EPS)), -np.inf)

        flat = score.ravel()
        best = flat.max()
        ties = np.flatnonzero(flat >= best)
        nshift = lat.shifts.size
        if ties.size > 1:
            rot_abs = np.abs(lat.rotations[window[ties // (nshift * nshift)]])
            order = np.lexsort((ties, lat._penalty_t2[ties % (nshift * nshift)],
                                rot_abs))
            pick = int(ties[order[0]])
        else:
            pick = int(ties[0])
        r, rem = divmod(pick, nshift * nshift)
        iy, ix = divmod(rem, nshift)
        return AlignmentEstimate(float(lat.shifts[ix]), float(lat.shifts[iy]),
                                 float(lat.rotations[window[r]]),
                                 float(np.clip(best, 0.0, 1.0)))


def align_patches(rolled_patch, latent_patch, cfg: AlignStageConfig) -> AlignmentEstimate:
    """Estimate theta = (dx, dy, da) aligning the latent patch to the rolled
    patch. rolled_patch = (img, mask, ...) and latent_patch = (img, mask);
    trailing tuple entries (direction tags) ride along untouched. Ties break
    by smallest |da|, then smallest dx^2 + dy^2, then search order. Fewer
    than MIN_OVERLAP_PIXELS overlapping foreground pixels at every candidate
    yields the insufficient-overlap result (score 0, theta = 0)."""
    aligner = PairAligner(cfg)
    aligner.set_rolled(0, rolled_patch[0], rolled_patch[1])
    aligner.set_latent(0, latent_patch[0], latent_patch[1])
    return aligner.align(0, 0, cache={})


def adjust_point(latent_point: SamplePoint, rolled_point: SamplePoint,
                 est: AlignmentEstimate) -> SamplePoint:
    """Point C: the latent point hypothesized to correspond exactly to the
    rolled point, given the patch alignment between them.

    Position shifts by the inverse of (dx, dy, da) in latent-image
    coordinates; direction is the rolled direction composed with -da,
    wrapped to [-180, 180). An insufficient-overlap estimate returns the
    latent point unchanged with adjusted=False."""
    if est.insufficient_overlap:
        return replace(latent_point, adjusted=False)
    t_inv = -(rotation_matrix(-est.da) @ np.array([est.dx, est.dy]))
    direction = None
    if rolled_point.direction is not None:
        direction = float(wrap180(rolled_point.direction - est.da))
    return replace(latent_point,
                   x=latent_point.x + float(t_inv[0]),
                   y=latent_point.y + float(t_inv[1]),
                   direction=direction,
                   adjusted=True)


def _as_theta(arr, name: str) -> np.ndarray:
    a = np.asarray(arr, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (3,) or (batch, 3), got {a.shape}")
    if np.abs(a[:, :2]).max(initial=0.0) > 1.0 + 1e-9:
        raise ValueError(f"{name} translations must be normalized to [-1, 1]")
    return a


def _as_ori(arr, name: str) -> np.ndarray:
    a = np.asarray(arr, dtype=float)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[1] != 2:
        raise ValueError(f"{name} must have shape (2, h, w) or (batch, 2, h, w), got {a.shape}")
    return a


def alignment_losses(theta_gt, theta_pred, ori_gt1, ori_pred1, ori_gt2, ori_pred2,
                     lambda_match: float = 0.25):
    """Regression + orientation losses of the alignment task.

    theta vectors are (dx, dy, da) with translations pre-normalized to
    [-1, 1]; orientation maps are two-channel (cos2O, sin2O) at 1/8 image
    resolution. Returns (l_para, l_ori1, l_ori2, l_match) where every term
    is the mean over all scalar components and
    l_match = l_para + lambda_match * (l_ori1 + l_ori2).
    """
    tg, tp = _as_theta(theta_gt, "theta_gt"), _as_theta(theta_pred, "theta_pred")
    if tg.shape != tp.shape:
        raise ValueError("theta shapes do not match")
    g1, p1 = _as_ori(ori_gt1, "ori_gt1"), _as_ori(ori_pred1, "ori_pred1")
    g2, p2 = _as_ori(ori_gt2, "ori_gt2"), _as_ori(ori_pred2, "ori_pred2")
    if g1.shape != p1.shape or g2.shape != p2.shape:
        raise ValueError("orientation map shapes do not match")
    l_para = float(np.mean((tg - tp) ** 2))
    l_ori1 = float(np.mean((g1 - p1) ** 2))
    l_ori2 = float(np.mean((g2 - p2) ** 2))
    l_match = l_para + lambda_match * (l_ori1 + l_ori2)
    return l_para, l_ori1, l_ori2, l_match
