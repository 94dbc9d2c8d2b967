"""Command-line front end.

Subcommands: register, template, simulate, eval, score. Exit codes:
0 success, 1 registration failed, 2 bad input (missing or malformed files,
unknown flags), 3 internal error. Every subcommand writes only under its
--out directory, and identical invocations produce byte-identical files;
timing goes to stderr so it never perturbs outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import cv2
import numpy as np

from .descriptor import TemplateBank, build_template_bank
from .imaging import (ImageReadError, UnsupportedImageError, compute_roi,
                      estimate_orientation_field, load_gray_image, load_mask,
                      save_gray_image, save_mask)
from .matching import correspondences_to_tsv
from .pipeline import (STATUS_FAILED, STATUS_OK, PipelineConfig,
                       RegistrationResult, register, warp_latent)
from .simeval import (AugmentConfig, DistortionProfile, eval_deviations,
                      load_profile, matching_score, minutiae_from_tsv,
                      pair_minutiae, simulate_impression)
from .transform import apply_transform, transform_from_dict

__all__ = ["main"]

_PALETTE = [  # BGR, fixed order
    (180, 119, 31), (14, 127, 255), (44, 160, 44), (40, 39, 214),
    (189, 103, 148), (75, 86, 140), (194, 119, 227), (127, 127, 127),
    (34, 189, 188), (207, 190, 23),
]

_CONFIG_KEYS = {
    "coarse_interval_rolled", "coarse_interval_latent", "precise_interval",
    "neighbor_radius", "min_foreground_fraction", "tau_coarse", "tau_precise",
    "top_n", "tps_lam", "min_correspondences",
}


class CliInputError(Exception):
    pass


def _read_image(path: str) -> np.ndarray:
    try:
        return load_gray_image(path)
    except (ImageReadError, UnsupportedImageError) as exc:
        raise CliInputError(str(exc)) from exc


def _read_mask(path: str) -> np.ndarray:
    try:
        return load_mask(path)
    except (ImageReadError, UnsupportedImageError) as exc:
        raise CliInputError(str(exc)) from exc


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliInputError(f"missing file: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliInputError(f"malformed JSON in {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise CliInputError(f"expected a JSON object in {p}")
    return data


def _read_text(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliInputError(f"missing file: {p}")
    return p.read_text()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_config(args) -> tuple:
    """(PipelineConfig, threads). --threads overrides a 'threads' key in
    the config file; unknown keys are rejected."""
    kwargs, threads = {}, None
    if getattr(args, "config", None):
        data = _read_json(args.config)
        for key, value in data.items():
            if key == "threads":
                threads = int(value)
            elif key in _CONFIG_KEYS:
                kwargs[key] = value
            else:
                raise CliInputError(f"unknown config key: {key}")
    if args.threads is not None:
        threads = args.threads
    try:
        cfg = PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliInputError(f"invalid config: {exc}") from exc
    return cfg, (threads if threads is not None else 1)


def _load_banks(templates_dir: str | None):
    if templates_dir is None:
        return None, None
    root = Path(templates_dir)
    banks = []
    for side in ("latent", "rolled"):
        path = root / f"{side}.drtb"
        if not path.is_file():
            raise CliInputError(f"missing file: {path}")
        try:
            banks.append(TemplateBank.load(path))
        except ValueError as exc:
            raise CliInputError(f"bad template bank {path}: {exc}") from exc
    return banks[0], banks[1]


def _overlay(left: np.ndarray, right: np.ndarray, segments) -> np.ndarray:
    """Side-by-side panel with correspondence segments drawn across it."""
    h = max(left.shape[0], right.shape[0])
    w = left.shape[1] + right.shape[1]
    canvas = np.full((h, w), 255, dtype=np.uint8)
    canvas[:left.shape[0], :left.shape[1]] = left
    canvas[:right.shape[0], left.shape[1]:] = right
    out = cv2.cvtColor(canvas, cv2.COLOR_GRAY2BGR)
    xoff = left.shape[1]
    for i, ((lx, ly), (rx, ry)) in enumerate(segments):
        color = _PALETTE[i % len(_PALETTE)]
        a = (int(round(lx)), int(round(ly)))
        b = (int(round(rx)) + xoff, int(round(ry)))
        cv2.line(out, a, b, color, 1, cv2.LINE_AA)
        cv2.circle(out, a, 3, color, -1, cv2.LINE_AA)
        cv2.circle(out, b, 3, color, -1, cv2.LINE_AA)
    return out


def _cmd_register(args) -> int:
    latent = _read_image(args.latent)
    rolled = _read_image(args.rolled)
    cfg, threads = _load_config(args)
    latent_bank, rolled_bank = _load_banks(args.templates)
    out = _out_dir(args)
    latent_roi = compute_roi(latent)
    rolled_roi = compute_roi(rolled)
    result = register(latent, latent_roi, rolled, rolled_roi, cfg,
                      latent_bank=latent_bank, rolled_bank=rolled_bank,
                      threads=threads)
    for name, secs in sorted(result.timings.items()):
        print(f"timing {name}: {secs:.3f}", file=sys.stderr)
    _dump_json(out / "result.json", result.to_json_dict())
    final_set = result.precise if result.precise is not None else result.coarse
    (out / "correspondences.tsv").write_text(correspondences_to_tsv(final_set))
    if result.status != STATUS_FAILED:
        warped, _ = warp_latent(result, latent, latent_roi, rolled.shape)
        save_gray_image(out / "warped_latent.png", warped)
        left = latent
        if result.status == STATUS_OK:
            left, _ = apply_transform(result.coarse_rigid, latent, latent_roi,
                                      out_shape=rolled.shape)
        segments = [((c.latent.x, c.latent.y), (c.rolled.x, c.rolled.y))
                    for c in final_set.selected_candidates()]
        cv2.imwrite(str(out / "overlay.png"), _overlay(left, rolled, segments))
    print(f"status: {result.status}")
    if result.status == STATUS_FAILED:
        return 1
    return 0


def _cmd_template(args) -> int:
    img = _read_image(args.image)
    roi = _read_mask(args.roi) if args.roi else compute_roi(img)
    if roi.shape != img.shape:
        raise CliInputError("roi shape does not match the image")
    out = _out_dir(args)
    threads = args.threads if args.threads is not None else 1
    bank = build_template_bank(img, roi, args.side, interval=args.interval,
                               threads=threads)
    path = out / f"{args.side}.drtb"
    bank.save(path)
    print(f"wrote {len(bank)} entries")
    return 0


def _cmd_simulate(args) -> int:
    img = _read_image(args.rolled)
    if args.count < 1:
        raise CliInputError("--count must be >= 1")
    try:
        profile = load_profile(args.profile)
    except FileNotFoundError as exc:
        raise CliInputError(f"missing file: {exc.filename}") from exc
    except (ValueError, KeyError) as exc:
        raise CliInputError(f"bad profile {args.profile}: {exc}") from exc
    out = _out_dir(args)
    roi = compute_roi(img)
    if not roi.any():
        raise CliInputError("rolled image has an empty foreground")
    field = estimate_orientation_field(img, roi)
    ys, xs = np.nonzero(roi)
    center = (float(xs.mean()), float(ys.mean()))
    for i in range(args.count):
        seed = args.seed + i
        sim, mask, cmap = simulate_impression((img, roi, field, center),
                                              profile, AugmentConfig(), seed)
        save_gray_image(out / f"impression_{i:03d}.png", sim)
        save_mask(out / f"impression_{i:03d}_mask.png", mask)
        payload = cmap.to_dict()
        payload["seed"] = seed
        _dump_json(out / f"impression_{i:03d}_map.json", payload)
    print(f"wrote {args.count} impressions")
    return 0


def _final_rigid_of(result_data: dict, path: str):
    if result_data.get("status") == STATUS_FAILED:
        return None
    raw = result_data.get("final_rigid")
    if raw is None:
        raise CliInputError(f"no final transform in {path}")
    try:
        return transform_from_dict(raw)
    except (KeyError, ValueError) as exc:
        raise CliInputError(f"bad transform in {path}: {exc}") from exc


def _cmd_eval(args) -> int:
    data = _read_json(args.result)
    rigid = _final_rigid_of(data, args.result)
    if rigid is None:
        print("registration failed; nothing to evaluate", file=sys.stderr)
        return 1
    try:
        lat = minutiae_from_tsv(_read_text(args.gt_latent))
        rol = minutiae_from_tsv(_read_text(args.gt_rolled))
        pairs = pair_minutiae(lat, rol)
    except ValueError as exc:
        raise CliInputError(str(exc)) from exc
    out = _out_dir(args)
    report = eval_deviations(pairs, rigid)
    _dump_json(out / "deviations.json", report.to_json_dict())
    (out / "deviations_cdf.csv").write_text(report.cdf_csv())
    print(f"accuracy: location {report.accuracy_loc:.4f}, "
          f"direction {report.accuracy_dir:.4f}")
    return 0


def _cmd_score(args) -> int:
    data = _read_json(args.result)
    latent = _read_image(args.latent)
    rolled = _read_image(args.rolled)
    out = _out_dir(args)
    if data.get("status") == STATUS_FAILED:
        report = matching_score(None, None, None, None, failed=True)
    else:
        def tf(key):
            raw = data.get(key)
            if raw is None:
                return None
            try:
                return transform_from_dict(raw)
            except (KeyError, ValueError) as exc:
                raise CliInputError(f"bad transform in {args.result}: {exc}") from exc

        result = RegistrationResult(status=data.get("status", STATUS_OK),
                                    coarse_rigid=tf("coarse_rigid"),
                                    precise_rigid=tf("precise_rigid"),
                                    final_rigid=tf("final_rigid"),
                                    tps=tf("tps"))
        if result.coarse_rigid is None:
            raise CliInputError(f"no coarse transform in {args.result}")
        latent_roi = compute_roi(latent)
        rolled_roi = compute_roi(rolled)
        warped, warped_roi = warp_latent(result, latent, latent_roi,
                                         rolled.shape)
        report = matching_score(warped, warped_roi, rolled, rolled_roi)
    payload = report.to_json_dict()
    payload["n_points"] = len(report.per_point)
    _dump_json(out / "score.json", payload)
    print(f"score: {report.score:.6f}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densereg",
        description="Dense sampling-point registration of ridge images.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_threads(p):
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap; results are identical for any value")

    p = sub.add_parser("register", help="register a latent onto a rolled print")
    p.add_argument("--latent", required=True)
    p.add_argument("--rolled", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--templates", default=None,
                   help="directory with latent.drtb and rolled.drtb")
    p.add_argument("--config", default=None, help="pipeline config JSON")
    add_threads(p)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("template", help="precompute a descriptor bank")
    p.add_argument("--image", required=True)
    p.add_argument("--roi", default=None,
                   help="mask PNG; derived from the image when omitted")
    p.add_argument("--side", required=True, choices=("latent", "rolled"))
    p.add_argument("--out", required=True)
    p.add_argument("--interval", type=float, default=None)
    add_threads(p)
    p.set_defaults(func=_cmd_template)

    p = sub.add_parser("simulate", help="synthesize impressions of a print")
    p.add_argument("--rolled", required=True)
    p.add_argument("--profile", required=True, help="distortion profile JSON")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    add_threads(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("eval", help="minutia deviations under a result")
    p.add_argument("--result", required=True, help="result.json from register")
    p.add_argument("--gt-latent", required=True, help="latent minutiae TSV")
    p.add_argument("--gt-rolled", required=True, help="rolled minutiae TSV")
    p.add_argument("--out", required=True)
    add_threads(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("score", help="registration score of a result")
    p.add_argument("--result", required=True, help="result.json from register")
    p.add_argument("--latent", required=True)
    p.add_argument("--rolled", required=True)
    p.add_argument("--out", required=True)
    add_threads(p)
    p.set_defaults(func=_cmd_score)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:  # noqa: BLE001 - boundary of the process
        traceback.print_exc()
        return 3
