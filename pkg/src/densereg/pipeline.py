"""Coarse-to-fine registration of a latent impression onto a rolled print.

The coarse stage scores every pair of widely spaced sampling points (80 px
on the rolled side, 48 px on the latent) with a generous alignment search,
selects a consistent correspondence subset, and summarizes it as one rigid
motion. The latent is warped into the rolled canvas by that motion, then
the precise stage repeats the process on a shared 24 px lattice with a
narrow search and only nearby point pairs, producing a refined rigid
motion plus a thin-plate-spline warp fitted through the final
correspondences. Every stage is deterministic and independent of the
worker count; threads only split the per-point and per-pair loops into
contiguous chunks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from sklearn.base import BaseEstimator

from ._parallel import parallel_map
from ._validation import check_gray_image, check_mask
from .alignment import (COARSE_ALIGN, PATCH_SIZE, PRECISE_ALIGN,
                        AlignStageConfig, PairAligner, adjust_point)
from .descriptor import TemplateBank, describe_patch, similarity
from .imaging import PatchSpec, estimate_orientation_field, extract_patch
from .matching import (MUTUAL_TOP_N, SIM_TAU_COARSE, SIM_TAU_PRECISE,
                       CandidateCorrespondence, CorrespondenceSet,
                       match_candidates)
from .sampling import (GridConfig, assign_directions, grid_sample_points,
                       precise_candidate_pairs)
from .transform import (RigidTransform2D, ThinPlateSpline, apply_transform,
                        average_rigid, fit_tps, transform_to_dict)

__all__ = [
    "PipelineConfig",
    "RegistrationResult",
    "register",
    "register_coarse",
    "register_precise",
    "warp_latent",
    "DenseRegistrar",
]

STATUS_OK = "ok"
STATUS_COARSE_ONLY = "coarse-only"
STATUS_FAILED = "failed"


@dataclass
class PipelineConfig:
    coarse_interval_rolled: float = 80.0
    coarse_interval_latent: float = 48.0
    precise_interval: float = 24.0
    neighbor_radius: int = 2
    min_foreground_fraction: float = 0.4
    tau_coarse: float = SIM_TAU_COARSE
    tau_precise: float = SIM_TAU_PRECISE
    top_n: int = MUTUAL_TOP_N
    tps_lam: float = 0.0
    min_correspondences: int = 3
    align_coarse: AlignStageConfig = dc_field(default_factory=lambda: COARSE_ALIGN)
    align_precise: AlignStageConfig = dc_field(default_factory=lambda: PRECISE_ALIGN)

    def __post_init__(self):
        if self.min_correspondences < 3:
            raise ValueError("min_correspondences must be >= 3")
        if self.neighbor_radius < 0:
            raise ValueError("neighbor_radius must be >= 0")


@dataclass
class RegistrationResult:
    status: str
    coarse: CorrespondenceSet | None = None
    precise: CorrespondenceSet | None = None
    coarse_rigid: RigidTransform2D | None = None
    precise_rigid: RigidTransform2D | None = None
    final_rigid: RigidTransform2D | None = None
    tps: ThinPlateSpline | None = None
    timings: dict = dc_field(default_factory=dict)

    def map_points(self, points) -> np.ndarray:
        """Latent coordinates to rolled coordinates under the full final
        transform (spline when available, rigid otherwise)."""
        if self.status == STATUS_FAILED or self.coarse_rigid is None:
            raise ValueError("registration failed; no transform available")
        moved = self.coarse_rigid.apply(points)
        if self.tps is not None:
            return self.tps.transform(moved)
        if self.precise_rigid is not None:
            return self.precise_rigid.apply(moved)
        return moved

    def to_json_dict(self) -> dict:
        """Deterministic JSON payload. Timings are deliberately excluded:
        they vary run to run while the payload must not."""
        def tf(t):
            return None if t is None else transform_to_dict(t)

        def stage(cset):
            if cset is None:
                return None
            return {"candidates": len(cset.candidates),
                    "selected": len(cset.selected),
                    "total_score": cset.total_score}

        return {
            "status": self.status,
            "coarse_rigid": tf(self.coarse_rigid),
            "precise_rigid": tf(self.precise_rigid),
            "final_rigid": tf(self.final_rigid),
            "tps": tf(self.tps),
            "coarse": stage(self.coarse),
            "precise": stage(self.precise),
        }


def _score_stage(latent_img, latent_roi, rolled_img, rolled_roi,
                 latent_pts, rolled_pts, pairs, align_cfg,
                 latent_bank: TemplateBank | None,
                 rolled_bank: TemplateBank | None,
                 threads: int) -> list:
    """Alignment + descriptor similarity for each requested point pair,
    returned in pair order as CandidateCorrespondence records."""
    aligner = PairAligner(align_cfg)
    lat_by_id = {p.id: p for p in latent_pts}
    rol_by_id = {p.id: p for p in rolled_pts}
    rolled_descs: dict[int, np.ndarray] = {}

    def prep_rolled(p):
        img, mask = extract_patch(rolled_img, rolled_roi,
                                  PatchSpec((p.x, p.y), 0.0, PATCH_SIZE))
        aligner.set_rolled(p.id, img, mask)
        direction = 0.0 if p.direction is None else float(p.direction)
        if rolled_bank is not None:
            desc = rolled_bank.query(p.x, p.y, direction).descriptor
        else:
            dimg, dmask = extract_patch(rolled_img, rolled_roi,
                                        PatchSpec((p.x, p.y), direction, PATCH_SIZE))
            desc = describe_patch(dimg, dmask)
        return p.id, desc

    def prep_latent(p):
        img, mask = extract_patch(latent_img, latent_roi,
                                  PatchSpec((p.x, p.y), 0.0, PATCH_SIZE))
        aligner.set_latent(p.id, img, mask)
        return p.id

    for pid, desc in parallel_map(prep_rolled, list(rolled_pts), threads):
        rolled_descs[pid] = desc
    parallel_map(prep_latent, list(latent_pts), threads)

    def score(pair, cache):
        lid, rid = pair
        lat, rol = lat_by_id[lid], rol_by_id[rid]
        est = aligner.align(lid, rid, cache=cache)
        adj = adjust_point(lat, rol, est)
        if est.insufficient_overlap:
            return CandidateCorrespondence(lat, rol, adj, est, 0.0)
        direction = 0.0 if adj.direction is None else float(adj.direction)
        if latent_bank is not None:
            ldesc = latent_bank.query(adj.x, adj.y, direction).descriptor
        else:
            dimg, dmask = extract_patch(latent_img, latent_roi,
                                        PatchSpec((adj.x, adj.y), direction, PATCH_SIZE))
            ldesc = describe_patch(dimg, dmask)
        raw = similarity(rolled_descs[rid], ldesc)
        return CandidateCorrespondence(lat, rol, adj, est, raw)

    # One group per latent point: the rotated-spectra cache pays off across
    # that point's partners and is dropped with the group.
    groups: dict[int, list] = {}
    for pair in pairs:
        groups.setdefault(pair[0], []).append(pair)

    def score_group(item):
        _, group = item
        cache: dict = {}
        return [score(pair, cache) for pair in group]

    scored = parallel_map(score_group, list(groups.items()), threads)
    by_pair = {}
    for group_result in scored:
        for cand in group_result:
            by_pair[(cand.latent.id, cand.rolled.id)] = cand
    return [by_pair[tuple(pair)] for pair in pairs]


def _stage_transforms(cset: CorrespondenceSet, min_correspondences: int):
    if len(cset.selected) < min_correspondences:
        return None
    src, dst = cset.control_points()
    rots = [c.estimate.da for c in cset.selected_candidates()]
    return average_rigid(src, dst, rots)


def register_coarse(latent_img, latent_roi, rolled_img, rolled_roi,
                    config: PipelineConfig | None = None,
                    latent_bank: TemplateBank | None = None,
                    rolled_bank: TemplateBank | None = None,
                    threads: int = 1):
    """First-stage registration over all cross pairs of the wide lattices.
    Returns (correspondence_set, rigid_or_None)."""
    cfg = config or PipelineConfig()
    latent_img = check_gray_image(latent_img, "latent_img")
    rolled_img = check_gray_image(rolled_img, "rolled_img")
    latent_roi = check_mask(latent_roi, latent_img.shape, "latent_roi")
    rolled_roi = check_mask(rolled_roi, rolled_img.shape, "rolled_roi")
    lat_grid = GridConfig(cfg.coarse_interval_latent, cfg.coarse_interval_latent,
                          cfg.min_foreground_fraction)
    rol_grid = GridConfig(cfg.coarse_interval_rolled, cfg.coarse_interval_rolled,
                          cfg.min_foreground_fraction)
    latent_pts = grid_sample_points(latent_roi, lat_grid, side="latent")
    rolled_pts = grid_sample_points(rolled_roi, rol_grid, side="rolled")
    field = estimate_orientation_field(rolled_img, rolled_roi)
    rolled_pts = assign_directions(rolled_pts, field)
    pairs = [(lp.id, rp.id) for lp in latent_pts for rp in rolled_pts]
    scored = _score_stage(latent_img, latent_roi, rolled_img, rolled_roi,
                          latent_pts, rolled_pts, pairs, cfg.align_coarse,
                          latent_bank, rolled_bank, threads)
    cset = match_candidates(scored, cfg.tau_coarse, cfg.top_n)
    return cset, _stage_transforms(cset, cfg.min_correspondences)


def register_precise(latent_img, latent_roi, rolled_img, rolled_roi,
                     config: PipelineConfig | None = None,
                     threads: int = 1):
    """Second-stage registration of an already coarsely aligned latent.
    Both sides use the shared fine lattice; only pairs within
    neighbor_radius lattice cells are scored. Returns
    (correspondence_set, rigid_or_None, tps_or_None)."""
    cfg = config or PipelineConfig()
    latent_img = check_gray_image(latent_img, "latent_img")
    rolled_img = check_gray_image(rolled_img, "rolled_img")
    latent_roi = check_mask(latent_roi, latent_img.shape, "latent_roi")
    rolled_roi = check_mask(rolled_roi, rolled_img.shape, "rolled_roi")
    grid = GridConfig(cfg.precise_interval, cfg.precise_interval,
                      cfg.min_foreground_fraction)
    latent_pts = grid_sample_points(latent_roi, grid, side="latent")
    rolled_pts = grid_sample_points(rolled_roi, grid, side="rolled")
    field = estimate_orientation_field(rolled_img, rolled_roi)
    rolled_pts = assign_directions(rolled_pts, field)
    pairs = precise_candidate_pairs(latent_pts, rolled_pts,
                                    radius=cfg.neighbor_radius,
                                    interval=cfg.precise_interval)
    scored = _score_stage(latent_img, latent_roi, rolled_img, rolled_roi,
                          latent_pts, rolled_pts, pairs, cfg.align_precise,
                          None, None, threads)
    cset = match_candidates(scored, cfg.tau_precise, cfg.top_n)
    rigid = _stage_transforms(cset, cfg.min_correspondences)
    tps = None
    if rigid is not None:
        src, dst = cset.control_points()
        try:
            tps = fit_tps(src, dst, lam=cfg.tps_lam)
        except ValueError:
            # degenerate (collinear) control points: treat as stage failure
            rigid, tps = None, None
    return cset, rigid, tps


def warp_latent(result: RegistrationResult, latent_img, latent_roi, out_shape):
    """Render the latent in the rolled canvas under the final transform:
    the coarse rigid motion followed by the fitted spline when present."""
    if result.status == STATUS_FAILED or result.coarse_rigid is None:
        raise ValueError("registration failed; nothing to warp")
    img, mask = apply_transform(result.coarse_rigid, latent_img, latent_roi,
                                out_shape=out_shape)
    if result.tps is not None:
        img, mask = apply_transform(result.tps, img, mask, out_shape=out_shape)
    elif result.precise_rigid is not None:
        img, mask = apply_transform(result.precise_rigid, img, mask,
                                    out_shape=out_shape)
    return img, mask


def register(latent_img, latent_roi, rolled_img, rolled_roi,
             config: PipelineConfig | None = None,
             latent_bank: TemplateBank | None = None,
             rolled_bank: TemplateBank | None = None,
             threads: int = 1) -> RegistrationResult:
    """Full coarse-to-fine registration. Status is "failed" when the coarse
    stage finds too few consistent correspondences (no transforms at all),
    "coarse-only" when only the precise stage does, "ok" otherwise."""
    cfg = config or PipelineConfig()
    t0 = time.perf_counter()
    coarse_set, coarse_rigid = register_coarse(
        latent_img, latent_roi, rolled_img, rolled_roi, cfg,
        latent_bank=latent_bank, rolled_bank=rolled_bank, threads=threads)
    t1 = time.perf_counter()
    if coarse_rigid is None:
        return RegistrationResult(STATUS_FAILED, coarse=coarse_set,
                                  timings={"coarse_s": t1 - t0,
                                           "total_s": t1 - t0})
    rolled_img = check_gray_image(rolled_img, "rolled_img")
    warped_img, warped_roi = apply_transform(coarse_rigid, latent_img,
                                             latent_roi,
                                             out_shape=rolled_img.shape)
    precise_set, precise_rigid, tps = register_precise(
        warped_img, warped_roi, rolled_img, rolled_roi, cfg, threads=threads)
    t2 = time.perf_counter()
    timings = {"coarse_s": t1 - t0, "precise_s": t2 - t1, "total_s": t2 - t0}
    if precise_rigid is None:
        return RegistrationResult(STATUS_COARSE_ONLY, coarse=coarse_set,
                                  precise=precise_set,
                                  coarse_rigid=coarse_rigid,
                                  final_rigid=coarse_rigid, timings=timings)
    return RegistrationResult(STATUS_OK, coarse=coarse_set, precise=precise_set,
                              coarse_rigid=coarse_rigid,
                              precise_rigid=precise_rigid,
                              final_rigid=coarse_rigid.compose(precise_rigid),
                              tps=tps, timings=timings)


class DenseRegistrar(BaseEstimator):
    """Parameter-introspectable front end over the registration pipeline.

    Construction only stores parameters (so grid searches and cloning work
    the usual way); register() builds the pipeline configuration on the
    fly and runs the full two-stage procedure.
    """

    def __init__(self, coarse_interval_rolled=80.0, coarse_interval_latent=48.0,
                 precise_interval=24.0, neighbor_radius=2,
                 min_foreground_fraction=0.4, tau_coarse=SIM_TAU_COARSE,
                 tau_precise=SIM_TAU_PRECISE, top_n=MUTUAL_TOP_N,
                 tps_lam=0.0, min_correspondences=3, threads=1):
        self.coarse_interval_rolled = coarse_interval_rolled
        self.coarse_interval_latent = coarse_interval_latent
        self.precise_interval = precise_interval
        self.neighbor_radius = neighbor_radius
        self.min_foreground_fraction = min_foreground_fraction
        self.tau_coarse = tau_coarse
        self.tau_precise = tau_precise
        self.top_n = top_n
        self.tps_lam = tps_lam
        self.min_correspondences = min_correspondences
        self.threads = threads

    def _config(self) -> PipelineConfig:
        return PipelineConfig(
            coarse_interval_rolled=self.coarse_interval_rolled,
            coarse_interval_latent=self.coarse_interval_latent,
            precise_interval=self.precise_interval,
            neighbor_radius=self.neighbor_radius,
            min_foreground_fraction=self.min_foreground_fraction,
            tau_coarse=self.tau_coarse, tau_precise=self.tau_precise,
            top_n=self.top_n, tps_lam=self.tps_lam,
            min_correspondences=self.min_correspondences)

    def register(self, latent_img, latent_roi, rolled_img, rolled_roi,
                 latent_bank=None, rolled_bank=None) -> RegistrationResult:
        return register(latent_img, latent_roi, rolled_img, rolled_roi,
                        self._config(), latent_bank=latent_bank,
                        rolled_bank=rolled_bank, threads=self.threads)
