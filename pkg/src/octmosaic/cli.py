"""Command-line entry point: ``octmosaic <subcommand> ...``.

Exit codes: 0 success, 1 usage/config/input error, 2 partial or quality
failure (a field failed to register, or verification had no prompts).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, config_items, format_config, load_config
from .core import load_image, load_mask, save_image, save_mask, save_rgb
from .deform import min_interior_jacobian, write_field
from .errors import ConfigError, MosaicError, ValidationError
from .evalverify import (PAIR_COLUMNS, evaluate_all_pairs, rotation_angle, rotation_error,
                         verify_mosaic)
from .features import (export_keypoints, export_matches, import_keypoints, import_matches,
                       match_images, detect_keypoints)
from .affine import write_affine
from .mosaic import OverlayMode, render_overlay
from .phantoms import vessel_phantom
from .pipeline import FieldFailure, preprocess, register_pair, stitch
from .report import artifact_listing, mean_std, write_csv, write_json
from .synthbench import export_dataset, generate_subfields, is_dataset_dir, load_dataset

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2
REPORT_NAME = "report.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--blend", choices=["average", "feather", "first_wins"],
                   help="override pipeline.blend")
    p.add_argument("--no-clahe", action="store_true", help="skip CLAHE preprocessing")
    p.add_argument("--no-syn", action="store_true", help="skip the deformable refinement")
    p.add_argument("--deterministic-report", action="store_true",
                   help="omit timestamps and timings from reports")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective configuration and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="octmosaic", description="Feature-guided OCT/OCTA en-face mosaicking.")
    ap.add_argument("--version", action="version", version=f"octmosaic {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("stitch", help="register moving fields to a reference and build a mosaic")
    p.add_argument("reference")
    p.add_argument("moving", nargs="+")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--matches", nargs="+", metavar="FILE",
                   help="one match file per moving field (skips the built-in matcher)")
    _common(p)

    p = sub.add_parser("synth", help="generate a synthetic multi-field dataset")
    p.add_argument("source", nargs="?", help="source image (default: a vessel phantom)")
    p.add_argument("--out", required=True)
    p.add_argument("--phantom-size", type=int, default=400)
    _common(p)

    p = sub.add_parser("eval", help="evaluate a synthetic dataset or all pairs of a folder")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("verify", help="segmentation-consistency check of a mosaic")
    p.add_argument("reference")
    p.add_argument("mosaic", help="mosaic resampled on the reference grid")
    p.add_argument("--matches", required=True, help="match file (reference is the fixed side)")
    p.add_argument("--keypoints", help="all reference keypoints (default: matched ones)")
    p.add_argument("--overlap", help="overlap mask PNG (default: whole raster)")
    p.add_argument("--ext-seg", nargs=2, metavar=("REF_MASK", "MOSAIC_MASK"),
                   help="externally produced segmentations; bypasses the built-in segmenter")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("detect", help="export keypoints in the interchange format")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("match", help="export built-in matches in the interchange format")
    p.add_argument("fixed")
    p.add_argument("moving")
    p.add_argument("--out", required=True)
    p.add_argument("--keypoints-out", help="also write all fixed-image keypoints here")
    _common(p)
    return ap


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.blend:
        cfg.pipeline.blend = args.blend
    if args.no_clahe:
        cfg.clahe.enabled = False
    if args.no_syn:
        cfg.pipeline.use_syn = False
    cfg.validate()
    return cfg


def _base_report(cmd: str, cfg: RunConfig, args) -> dict:
    rep = {"tool": {"name": "octmosaic", "version": __version__}, "command": cmd,
           "config": dict(config_items(cfg))}
    if not args.deterministic_report:
        rep["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return rep


def _finish(rep: dict, out: Path, args, timings: dict | None = None) -> None:
    if timings is not None and not args.deterministic_report:
        rep["timings"] = timings
    rep["artifacts"] = artifact_listing(out, exclude={REPORT_NAME})
    write_json(rep, out / REPORT_NAME)


def _affine_list(t):
    return [t.a11, t.a12, t.tx, t.a21, t.a22, t.ty]


def _pair_summary(res) -> dict:
    d = {"label": res.label, "status": "ok", "matcher": res.matches.source,
         "matches": len(res.matches), "ls_init": _affine_list(res.ls_init),
         "affine": _affine_list(res.affine), "rotation_deg": rotation_angle(res.affine),
         "metrics": vars(res.metrics), "metrics_affine": vars(res.metrics_affine),
         "warnings": list(res.warnings)}
    if res.syn is not None:
        s = res.syn
        d["syn"] = {"initial_lncc": s.initial_metric, "final_lncc": s.final_metric,
                    "iterations": [len(t) - 1 for t in s.per_level_metric_trace],
                    "min_jacobian": min_interior_jacobian(s.forward),
                    "diffeomorphic": s.diffeomorphic}
    for key, ver in (("verification", res.verification),
                     ("verification_affine", res.verification_affine)):
        d[key] = ver.summary() if ver is not None else None
    return d


STITCH_COLUMNS = ("label", "status", "matcher", "matches", "rmse", "ssim", "psnr",
                  "rmse_affine", "ssim_affine", "psnr_affine", "dice", "asd", "hd95",
                  "dice_affine", "reason")


def _stitch_row(p) -> dict:
    if isinstance(p, FieldFailure):
        return {"label": p.label, "status": "failed", "reason": p.reason}
    row = {"label": p.label, "status": "ok", "matcher": p.matches.source, "matches": len(p.matches),
           "rmse": p.metrics.rmse, "ssim": p.metrics.ssim, "psnr": p.metrics.psnr,
           "rmse_affine": p.metrics_affine.rmse, "ssim_affine": p.metrics_affine.ssim,
           "psnr_affine": p.metrics_affine.psnr}
    if p.verification is not None:
        row.update(dice=p.verification.dice, asd=p.verification.asd, hd95=p.verification.hd95)
    if p.verification_affine is not None:
        row["dice_affine"] = p.verification_affine.dice
    return row


def cmd_stitch(args, cfg: RunConfig) -> int:
    t_start = time.perf_counter()
    reference = load_image(args.reference)
    moving = [load_image(m) for m in args.moving]
    labels = [Path(m).stem for m in args.moving]
    if len(set(labels)) != len(labels):
        labels = [f"field_{k + 1:02d}" for k in range(len(moving))]
    matches = None
    if args.matches:
        if len(args.matches) != len(moving):
            raise ConfigError(f"--matches needs {len(moving)} files, got {len(args.matches)}")
        matches = [import_matches(m) for m in args.matches]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = stitch(reference, moving, cfg.to_pipeline(), labels, matches)
    mos = result.mosaic
    save_image(mos.canvas, out / "mosaic.png", bit_depth=16)
    save_mask(mos.canvas.mask, out / "mosaic_mask.png")
    save_rgb(render_overlay(mos, OverlayMode.CONTOURS, include_reference=True),
             out / "overlay_contours.png")
    ok = [p for p in result.pairs if not isinstance(p, FieldFailure)]
    for k, p in enumerate(ok):
        save_rgb(render_overlay(mos, OverlayMode.DIFF_COLORMAP, reference, k),
                 out / f"diff_{p.label}.png")
        write_affine(p.affine, out / f"{p.label}.affine")
        export_matches(p.matches, out / f"{p.label}.matches")
        if p.syn is not None:
            write_field(p.syn.forward, out / f"{p.label}.field")
    rows = [_stitch_row(p) for p in result.pairs]
    write_csv(rows, STITCH_COLUMNS, out / "metrics.csv")

    rep = _base_report("stitch", cfg, args)
    rep["inputs"] = {"reference": args.reference, "moving": list(args.moving),
                     "matches": list(args.matches) if args.matches else None}
    rep["pairs"] = [_pair_summary(p) if not isinstance(p, FieldFailure)
                    else {"label": p.label, "status": "failed", "reason": p.reason}
                    for p in result.pairs]
    rep["mosaic"] = {"canvas_size": [mos.canvas.width, mos.canvas.height],
                     "canvas_offset": list(mos.canvas_offset), "labels": mos.labels,
                     "bounding_boxes": mos.bounding_boxes(), "blend": mos.blend.value}
    timings = {"total": time.perf_counter() - t_start,
               "per_field": {p.label: p.timings for p in ok}}
    _finish(rep, out, args, timings)
    for f in result.failures:
        print(f"octmosaic: field {f.label} failed: {f.reason}", file=sys.stderr)
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = cfg.synth_spec()
    if args.source:
        source = load_image(args.source)
        src_desc = args.source
    else:
        source = vessel_phantom(args.phantom_size, seed=cfg.seed)
        src_desc = f"phantom:{args.phantom_size}:{cfg.seed}"
    ds = generate_subfields(source, spec)
    out = Path(args.out)
    manifest = export_dataset(ds, out)
    rep = _base_report("synth", cfg, args)
    rep["inputs"] = {"source": src_desc}
    rep["fields"] = [{"label": f.label, "rotation_deg": f.rotation_deg,
                      "translation": list(f.translation), "crop_origin": list(f.crop_origin),
                      "gt_affine": _affine_list(f.gt_affine),
                      "max_elastic": f.gt_field.max_magnitude()} for f in ds.fields]
    rep["manifest"] = manifest.name
    _finish(rep, out, args)
    return EXIT_OK


EVAL_COLUMNS = ("label", "status", "gt_rotation", "est_rotation", "rotation_error", "rmse",
                "ssim", "psnr", "dice", "reason")


def _image_files(d: Path) -> list:
    files = [p for p in sorted(d.iterdir())
             if p.suffix.lower() in (".png", ".pgm") and not p.stem.endswith("_mask")]
    return files


def cmd_eval(args, cfg: RunConfig) -> int:
    d = Path(args.dataset)
    if not d.is_dir():
        raise ValidationError(f"{d}: not a directory")
    out = Path(args.out)
    pcfg = cfg.to_pipeline()
    t_start = time.perf_counter()
    rep = _base_report("eval", cfg, args)
    if is_dataset_dir(d):
        ds = load_dataset(d)
        if not ds.fields:
            raise ValidationError(f"{d}: dataset has no moving fields")
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for f in ds.fields:
            row = {"label": f.label, "gt_rotation": rotation_angle(f.gt_affine)}
            try:
                res = register_pair(ds.reference, f.image, pcfg, label=f.label)
                row.update(status="ok", est_rotation=rotation_angle(res.affine),
                           rotation_error=rotation_error(res.affine, f.gt_affine).delta,
                           rmse=res.metrics.rmse, ssim=res.metrics.ssim, psnr=res.metrics.psnr,
                           dice=res.verification.dice if res.verification else None)
            except MosaicError as exc:
                row.update(status="failed", reason=f"{type(exc).__name__}: {exc}")
            rows.append(row)
        write_csv(rows, EVAL_COLUMNS, out / "rotation_errors.csv")
        rep["mode"] = "ground_truth"
        rep["rows"] = rows
        rep["aggregate"] = {k: mean_std(r.get(k) for r in rows)
                            for k in ("rotation_error", "rmse", "ssim", "psnr", "dice")}
    else:
        files = _image_files(d)
        if len(files) < 2:
            raise ValidationError(f"{d}: need at least two images for pairwise evaluation")
        images = [load_image(p) for p in files]
        out.mkdir(parents=True, exist_ok=True)
        table = evaluate_all_pairs(images, pcfg, [p.stem for p in files])
        rows = table.rows
        write_csv(rows, PAIR_COLUMNS, out / "pairs.csv")
        rep["mode"] = "pairwise"
        rep["rows"] = rows
        rep["aggregate"] = table.aggregate
    _finish(rep, out, args, {"total": time.perf_counter() - t_start})
    return EXIT_PARTIAL if any(r["status"] != "ok" for r in rows) else EXIT_OK


def cmd_verify(args, cfg: RunConfig) -> int:
    reference = load_image(args.reference)
    mosaic = load_image(args.mosaic)
    if mosaic.shape != reference.shape:
        raise ValidationError(f"{args.mosaic}: mosaic must be resampled on the reference grid "
                              f"({reference.width}x{reference.height})")
    ms = import_matches(args.matches)
    kps = import_keypoints(args.keypoints)[0] if args.keypoints else ms.fixed
    overlap = load_mask(args.overlap) if args.overlap else np.ones(reference.shape, bool)
    ext = None
    if args.ext_seg:
        ext = tuple(load_mask(p) for p in args.ext_seg)
    out = Path(args.out)
    rep = _base_report("verify", cfg, args)
    rep["inputs"] = {"reference": args.reference, "mosaic": args.mosaic, "matches": args.matches,
                     "keypoints": args.keypoints, "overlap": args.overlap,
                     "ext_seg": list(args.ext_seg) if args.ext_seg else None}
    rep["segmenter"] = "external" if ext is not None else "builtin"
    try:
        ver = verify_mosaic(reference, mosaic, overlap, ms, kps, cfg.verify, external_masks=ext)
    except ValidationError as exc:
        print(f"octmosaic: verification failed: {exc}", file=sys.stderr)
        out.mkdir(parents=True, exist_ok=True)
        rep["verification"] = None
        rep["error"] = str(exc)
        _finish(rep, out, args)
        return EXIT_PARTIAL
    out.mkdir(parents=True, exist_ok=True)
    save_mask(ver.reference_mask, out / "reference_segmentation.png")
    save_mask(ver.mosaic_mask, out / "mosaic_segmentation.png")
    rep["verification"] = ver.summary()
    _finish(rep, out, args)
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    img = load_image(args.image)
    p = cfg.features
    kps = detect_keypoints(preprocess(img, cfg.clahe), p.max_count, p.nms_radius, p.min_score,
                           p.tensor_sigma, p.border)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_keypoints(kps, (img.width, img.height), args.out)
    return EXIT_OK


def cmd_match(args, cfg: RunConfig) -> int:
    fixed = load_image(args.fixed)
    moving = load_image(args.moving)
    ms, kf, _ = match_images(preprocess(fixed, cfg.clahe), preprocess(moving, cfg.clahe),
                             cfg.features)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_matches(ms, args.out)
    if args.keypoints_out:
        export_keypoints(kf, (fixed.width, fixed.height), args.keypoints_out)
    return EXIT_OK


COMMANDS = {"stitch": cmd_stitch, "synth": cmd_synth, "eval": cmd_eval, "verify": cmd_verify,
            "detect": cmd_detect, "match": cmd_match}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _load_run_config(args)
    except MosaicError as exc:
        print(f"octmosaic: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return EXIT_OK
    try:
        return COMMANDS[args.command](args, cfg)
    except (MosaicError, OSError, ValueError) as exc:
        print(f"octmosaic: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
