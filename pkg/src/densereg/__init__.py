"""Dense sampling-point registration of ridge images.

Registers a small, distorted impression (latent) onto a full rolled print
by matching densely sampled local patches coarse-to-fine, then summarizing
the surviving correspondences as a rigid motion plus a thin-plate-spline
warp. Includes descriptor template banks, impression simulation from
learned distortion profiles, and evaluation metrics. The command-line
interface lives under ``python -m densereg``.
"""

from .alignment import (COARSE_ALIGN, PATCH_SIZE, PRECISE_ALIGN,
                        AlignmentEstimate, AlignStageConfig, PairAligner,
                        adjust_point, align_patches, alignment_losses)
from .descriptor import (DESCRIPTOR_DIM, BankMatch, TemplateBank,
                         build_template_bank, describe_patch,
                         descriptor_losses, similarity, similarity_matrix)
from .geometry import wrap90, wrap180
from .imaging import (OrientationField, PatchSpec, compute_roi,
                      estimate_orientation_field, extract_patch,
                      foreground_fraction_map, load_gray_image, load_mask,
                      save_gray_image, save_mask)
from .matching import (CandidateCorrespondence, CorrespondenceSet,
                       build_compatibility, match_candidates,
                       select_candidates, spectral_select)
from .pipeline import (DenseRegistrar, PipelineConfig, RegistrationResult,
                       register, register_coarse, register_precise,
                       warp_latent)
from .sampling import (GridConfig, SamplePoint, assign_directions,
                       grid_sample_points, precise_candidate_pairs)
from .simeval import (AugmentConfig, CorrespondenceMap, DeviationReport,
                      DistortionProfile, MarkedMinutia, PatchCluster,
                      ScoreReport, check_profile_quality, eval_deviations,
                      generate_patch_dataset, learn_distortion_profile,
                      load_profile, matching_score, minutiae_from_tsv,
                      minutiae_to_tsv, pair_minutiae, save_profile,
                      simulate_impression)
from .transform import (RigidTransform2D, ThinPlateSpline, apply_transform,
                        average_rigid, fit_tps, transform_from_dict,
                        transform_to_dict)

__version__ = "0.1.0"

__all__ = [
    "AlignmentEstimate", "AlignStageConfig", "PairAligner", "adjust_point",
    "align_patches", "alignment_losses", "COARSE_ALIGN", "PRECISE_ALIGN",
    "PATCH_SIZE", "DESCRIPTOR_DIM", "BankMatch", "TemplateBank",
    "build_template_bank", "describe_patch", "descriptor_losses",
    "similarity", "similarity_matrix", "wrap90", "wrap180",
    "OrientationField", "PatchSpec", "compute_roi",
    "estimate_orientation_field", "extract_patch", "foreground_fraction_map",
    "load_gray_image", "load_mask", "save_gray_image", "save_mask",
    "CandidateCorrespondence", "CorrespondenceSet", "build_compatibility",
    "match_candidates", "select_candidates", "spectral_select",
    "DenseRegistrar", "PipelineConfig", "RegistrationResult", "register",
    "register_coarse", "register_precise", "warp_latent", "GridConfig",
    "SamplePoint", "assign_directions", "grid_sample_points",
    "precise_candidate_pairs", "AugmentConfig", "CorrespondenceMap",
    "DeviationReport", "DistortionProfile", "MarkedMinutia", "PatchCluster",
    "ScoreReport", "check_profile_quality", "eval_deviations",
    "generate_patch_dataset", "learn_distortion_profile", "load_profile",
    "matching_score", "minutiae_from_tsv", "minutiae_to_tsv", "pair_minutiae",
    "save_profile", "simulate_impression", "RigidTransform2D",
    "ThinPlateSpline", "apply_transform", "average_rigid", "fit_tps",
    "transform_from_dict", "transform_to_dict",
]
