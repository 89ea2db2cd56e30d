"""Command-line driver: synth, match, segment, extract, skeleton, eval.

Exit codes: 0 success, 1 input error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, arap, figures, pipeline, synth
from .core import InputError
from .metrics import image_metrics, mse_to_psnr
from .sheet_io import corr_filename, load_corr_dir, load_sheet, read_label_map, write_corr, write_label_map
from .skeleton import skeleton_from_labels

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2
log = logging.getLogger("spriteparts")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _config(args) -> pipeline.PipelineConfig:
    overrides = {k: getattr(args, k, None) for k in ("seed", "jobs", "mode")}
    return pipeline.PipelineConfig.load(args.config, **overrides)


def _print_json(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


# -- subcommands ------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    opts = {"k": args.k} if args.template == "star" else {}
    rig = synth.make_puppet(args.template, seed=args.seed, **opts)
    poses = synth.make_sheet(rig, args.poses, seed=args.seed, jitter=args.jitter)
    manifest = synth.write_dataset(rig, poses, _out_dir(args.out))
    print(manifest)
    return EXIT_OK


def cmd_match(args) -> int:
    sheet = load_sheet(args.manifest)
    corrs = pipeline.compute_correspondences(sheet, _config(args))
    out = _out_dir(Path(args.out) / "corr")
    for (s, t), c in sorted(corrs.items()):
        write_corr(c, out / corr_filename(s, t))
    print(out)
    return EXIT_OK


def cmd_segment(args) -> int:
    sheet = load_sheet(args.manifest)
    segs = pipeline.segment_sheet(sheet, _config(args))
    out = _out_dir(Path(args.out) / "segments")
    for i, seg in sorted(segs.items()):
        write_label_map(seg.labels, out / f"pose_{i:02d}.png")
    print(out)
    return EXIT_OK


def _load_corrs(args, sheet):
    n = len(sheet.poses)
    if args.corr is not None:
        corrs = load_corr_dir(args.corr, n)
        if corrs is None:
            raise InputError(f"{args.corr} does not hold correspondences for every ordered pose pair")
        return corrs, "files"
    if args.use_gt_corr:
        corrs = pipeline.load_gt_corrs(pipeline.find_ground_truth(args.manifest), n)
        if corrs is None:
            raise InputError("--use-gt-corr: no complete gt/corr directory next to the manifest")
        return corrs, "ground_truth"
    return None, "descriptor"


def cmd_extract(args) -> int:
    cfg = _config(args)
    sheet = load_sheet(args.manifest)
    corrs, source = _load_corrs(args, sheet)
    res = pipeline.extract(sheet, cfg, corrs)
    gt_dir = pipeline.find_ground_truth(args.manifest)
    doc = pipeline.write_outputs(res, sheet, _out_dir(args.out), gt_dir, source)
    summary = {"parts": len(doc["parts"]), "cost": doc["cost"], "lp_bound": doc["lp_bound"],
               "mean_mse": float(np.mean(res.pose_mse))}
    metrics = Path(args.out) / "metrics.json"
    if metrics.is_file():
        summary["metrics"] = json.loads(metrics.read_text())
    _print_json(summary)
    return EXIT_OK


def cmd_skeleton(args) -> int:
    labels = read_label_map(args.labels).labels
    fg = None
    image = None
    if args.manifest is not None:
        sheet = load_sheet(args.manifest)
        if not 0 <= args.pose < len(sheet.poses):
            raise InputError(f"pose {args.pose} not in sheet of {len(sheet.poses)} poses")
        pose = sheet.poses[args.pose]
        if pose.shape != labels.shape:
            raise InputError(f"label map {labels.shape} does not match pose {pose.shape}")
        fg, image = pose.mask, pose.image
    if not (labels > 0).any():
        raise InputError(f"{args.labels} has no labeled parts")
    skel = skeleton_from_labels(labels, fg)
    out = _out_dir(args.out)
    (out / "skeleton.json").write_text(skel.dumps())
    if image is not None:
        figures.skeleton_figure(image, skel, out / "skeleton.png", labels)
    print(out / "skeleton.json")
    return EXIT_OK


def _read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def _images_of(directory: Path, n: int):
    """Reconstructions in ``recon/``, else the sheet next to a ground-truth directory."""
    rec = [directory / "recon" / f"pose_{i:02d}.png" for i in range(n)]
    if all(p.is_file() for p in rec):
        return [_read_rgb(p) for p in rec]
    manifest = directory.parent / "manifest.json"
    if manifest.is_file():
        return [p.image for p in load_sheet(manifest).poses]
    return None


def run_eval(pred_dir, gt_dir, manifest=None) -> dict:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    n = len(sorted((gt_dir / "labels").glob("pose_*.png")))
    if n == 0:
        raise InputError(f"{gt_dir}/labels holds no ground-truth label maps")
    gt_labels = pipeline.load_gt_labels(gt_dir, n)
    pred_labels = pipeline.load_gt_labels(pred_dir, n)
    if pred_labels is None:
        raise InputError(f"{pred_dir}/labels lacks label maps for {n} poses")
    if any(p.shape != g.shape for p, g in zip(pred_labels, gt_labels)):
        raise InputError("predicted and ground-truth label maps differ in size")
    gt_corrs = load_corr_dir(gt_dir / "corr", n) if n > 1 else None
    pred_corrs = load_corr_dir(pred_dir / "corr", n) if n > 1 else None

    pose_mse = None
    sheet_path = Path(manifest) if manifest is not None else gt_dir.parent / "manifest.json"
    images = _images_of(pred_dir, n)
    if sheet_path.is_file() and images is not None:
        sheet = load_sheet(sheet_path)
        if len(sheet.poses) != n:
            raise InputError(f"{sheet_path} has {len(sheet.poses)} poses, ground truth has {n}")
        pose_mse = [image_metrics(img, p)[0] for img, p in zip(images, sheet.poses)]
    report = pipeline.evaluate(pred_labels, gt_labels, pred_corrs, gt_corrs, pose_mse)
    doc = report.to_json()
    if pose_mse is not None:
        doc["pose_mse"] = pose_mse
        doc["pose_psnr"] = [mse_to_psnr(m) for m in pose_mse]
    return doc


def cmd_eval(args) -> int:
    doc = run_eval(args.pred, args.gt, args.manifest)
    if args.out is not None:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _print_json(doc)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spriteparts", description="Extract articulated parts from sprite sheets.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def pipeline_flags(sp, with_mode=False):
        sp.add_argument("--manifest", required=True, help="sprite-sheet manifest JSON")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="PipelineConfig JSON file")
        sp.add_argument("--seed", type=int, help="global seed (overrides config)")
        sp.add_argument("--jobs", type=int, help="worker processes for pose-pair stages")
        if with_mode:
            sp.add_argument("--mode", choices=arap.MODES, help="reconstruction mode")

    sp = sub.add_parser("synth", help="generate a synthetic puppet dataset")
    sp.add_argument("--template", choices=synth.TEMPLATES, default="star")
    sp.add_argument("--k", type=int, default=4, help="limb count of the star template")
    sp.add_argument("--poses", type=int, default=6)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--jitter", choices=("none", "arap"), default="none")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("match", help="descriptor correspondences for every ordered pose pair")
    pipeline_flags(sp)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("segment", help="superpixels of every pose")
    pipeline_flags(sp)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("extract", help="full part extraction")
    pipeline_flags(sp, with_mode=True)
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--use-gt-corr", action="store_true", help="use gt/corr next to the manifest")
    src.add_argument("--corr", help="directory of APCR files for every ordered pose pair")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("skeleton", help="joints and bones from a part label map")
    sp.add_argument("--labels", required=True, help="part label map PNG")
    sp.add_argument("--manifest", help="sheet supplying the foreground mask and image")
    sp.add_argument("--pose", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_skeleton)

    sp = sub.add_parser("eval", help="score predicted parts against ground truth")
    sp.add_argument("--pred", required=True, help="extract output directory")
    sp.add_argument("--gt", required=True, help="ground-truth directory (labels/, corr/)")
    sp.add_argument("--manifest", help="sheet with the true pose images (default: next to --gt)")
    sp.add_argument("--out", help="write the report JSON here as well")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:  # noqa: BLE001 - any other failure is an internal error
        traceback.print_exc(file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
