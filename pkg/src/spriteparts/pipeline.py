"""End-to-end part extraction: match, segment, cluster every pair, select, reconstruct."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import arap, clustering, correspondence, figures, selection, superpixel
from .core import CorrespondenceMap, InputError, SpriteSheet
from .metrics import MetricReport, epe, image_metrics, mse_to_psnr, part_iou, pose_part_iou
from .motion import RansacParams, build_voting_map, fit_superpixel_motions
from .sheet_io import corr_filename, load_corr_dir, read_label_map, write_corr, write_label_map
from .skeleton import skeleton_from_labels

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    target_count: int = superpixel.DEFAULT_TARGET_COUNT
    compactness: float = superpixel.DEFAULT_COMPACTNESS
    match_mode: str = "hard"  # hard | soft
    kappa: int = correspondence.DEFAULT_KAPPA
    fb_eps: float = correspondence.DEFAULT_FB_EPS
    ransac_iterations: int = 100
    inlier_threshold: float = 2.0
    affinity_sigma: float | str = clustering.DEFAULT_SIGMA
    max_clusters: int = clustering.MAX_CLUSTERS
    tau_cov: float = selection.DEFAULT_TAU
    min_rigidity: float = selection.MIN_RIGIDITY
    rounds: int = selection.DEFAULT_ROUNDS
    lambda_r: float = arap.DEFAULT_LAMBDA
    mesh_spacing: float = arap.DEFAULT_SPACING
    mode: str = "corr_guided"
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(ok, msg):
            if not ok:
                raise InputError(f"config: {msg}")

        need(isinstance(self.target_count, int) and self.target_count >= 1, "target_count must be an integer >= 1")
        need(self.compactness > 0, "compactness must be > 0")
        need(self.match_mode in ("hard", "soft"), "match_mode must be 'hard' or 'soft'")
        need(isinstance(self.kappa, int) and self.kappa >= 1, "kappa must be an integer >= 1")
        need(self.fb_eps >= 0, "fb_eps must be >= 0")
        need(isinstance(self.ransac_iterations, int) and self.ransac_iterations >= 1, "ransac_iterations must be >= 1")
        need(self.inlier_threshold > 0, "inlier_threshold must be > 0")
        need(self.affinity_sigma == "median" or (not isinstance(self.affinity_sigma, str) and self.affinity_sigma > 0),
             "affinity_sigma must be > 0 or 'median'")
        need(isinstance(self.max_clusters, int) and self.max_clusters >= 1, "max_clusters must be >= 1")
        need(0 < self.tau_cov <= 1, "tau_cov must lie in (0, 1]")
        need(0 <= self.min_rigidity <= 1, "min_rigidity must lie in [0, 1]")
        need(isinstance(self.rounds, int) and self.rounds >= 1, "rounds must be >= 1")
        need(self.lambda_r > 0, "lambda_r must be > 0")
        need(self.mesh_spacing > 0, "mesh_spacing must be > 0")
        need(self.mode in arap.MODES, f"mode must be one of {arap.MODES}")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        need(isinstance(self.jobs, int) and self.jobs >= 1, "jobs must be >= 1")

    @property
    def ransac(self) -> RansacParams:
        return RansacParams(self.ransac_iterations, self.inlier_threshold)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict, **overrides) -> PipelineConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise InputError(f"config: unknown keys {sorted(unknown)}")
        merged = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
        try:
            return cls(**merged)
        except TypeError as exc:
            raise InputError(f"config: {exc}") from exc

    @classmethod
    def load(cls, path=None, **overrides) -> PipelineConfig:
        """Defaults, then the JSON file (if any), then non-None ``overrides``."""
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise InputError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise InputError("config must be a JSON object")
        return cls.from_json(doc, **overrides)


@dataclass
class ExtractResult:
    config: PipelineConfig
    segs: dict
    corrs: dict
    clusterings: dict
    parts: list
    cover: selection.CoverageMatrix
    lp_value: float
    solutions: list
    best: object
    labels: list  # per-pose label maps, ids 1..k
    recon: list  # per-pose (image, coverage)
    pose_mse: list
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


# -- per-task workers (module level so they pickle) ----------------------------------------


def _descriptor_task(pose):
    return correspondence.compute_descriptors(pose)


def _match_task(args):
    s, t, ds, dt, ms, mt, cfg = args
    return correspondence.match(ds, dt, ms, mt, cfg.match_mode, cfg.kappa, source_pose=s, target_pose=t)


def _segment_task(args):
    pose, cfg = args
    seg = superpixel.segment(pose, cfg.target_count, cfg.compactness)
    seg.pose_id = pose.pose_id
    return seg


def cluster_pair(seg, corr: CorrespondenceMap, cfg: PipelineConfig, seed) -> tuple[np.ndarray, np.ndarray]:
    """Cluster one pose pair.

    Returns per-superpixel labels of ``seg`` (index id - 1, values >= 1) and
    the matches that agree with their own superpixel's rigid fit.
    """
    adj = superpixel.adjacency(seg)
    nbrs = superpixel.neighbor_lists(seg, adj)
    vm = build_voting_map(seg, corr)
    mf = fit_superpixel_motions(vm, seg, adj, cfg.ransac, seed=seed)
    try:
        res = clustering.residual_matrix(mf, seg, corr)
    except ValueError:
        # no usable motion: one whole-body cluster
        return np.ones(seg.count, dtype=np.int64), mf.inlier_pixels
    aff = clustering.affinity(res, cfg.affinity_sigma)
    cr = clustering.cluster(aff, seed=seed, max_clusters=cfg.max_clusters)
    return clustering.assign_invalid(cr.full_labels(seg.count), nbrs), mf.inlier_pixels


def _cluster_task(args):
    s, t, seg, corr, cfg = args
    return cluster_pair(seg, corr, cfg, [cfg.seed, s, t])


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(a) for a in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


# -- driver ---------------------------------------------------------------------------------


def compute_correspondences(sheet: SpriteSheet, cfg: PipelineConfig) -> dict:
    poses = sheet.poses
    desc = _map(_descriptor_task, poses, cfg.jobs)
    pairs = [(s, t) for s in range(len(poses)) for t in range(len(poses)) if s != t]
    tasks = [(s, t, desc[s], desc[t], poses[s].mask, poses[t].mask, cfg) for s, t in pairs]
    raw = dict(zip(pairs, _map(_match_task, tasks, cfg.jobs)))
    return {(s, t): correspondence.filter_mutual(raw[(s, t)], raw[(t, s)], cfg.fb_eps) for s, t in pairs}


def segment_sheet(sheet: SpriteSheet, cfg: PipelineConfig) -> dict:
    segs = _map(_segment_task, [(p, cfg) for p in sheet.poses], cfg.jobs)
    return {p.pose_id: s for p, s in zip(sheet.poses, segs)}


def extract(sheet: SpriteSheet, cfg: PipelineConfig | None = None, corrs: dict | None = None) -> ExtractResult:
    """Run the full pipeline in memory. ``corrs`` (all ordered pairs) skips descriptor matching."""
    cfg = cfg or PipelineConfig()
    for i, p in enumerate(sheet.poses):
        if p.pose_id != i:
            raise InputError(f"pose ids must be 0..n-1 in order; pose {i} has id {p.pose_id}")
    timings, warnings = {}, []
    clock = time.perf_counter

    t0 = clock()
    if corrs is None:
        corrs = compute_correspondences(sheet, cfg)
    timings["match"] = clock() - t0

    t0 = clock()
    segs = segment_sheet(sheet, cfg)
    timings["segment"] = clock() - t0

    t0 = clock()
    pairs = sorted(corrs)
    out = _map(_cluster_task, [(s, t, segs[s], corrs[(s, t)], cfg) for s, t in pairs], cfg.jobs)
    clusterings = {p: o[0] for p, o in zip(pairs, out)}
    reliable = {p: o[1] for p, o in zip(pairs, out)}
    timings["cluster"] = clock() - t0
    if all(int(l.max()) <= 1 for l in clusterings.values()):
        msg = "no relative motion detected between any pose pair; the result is a single whole-body part"
        log.warning(msg)
        warnings.append(msg)

    t0 = clock()
    parts = selection.pool_candidates(clusterings, segs)
    cover = selection.coverage(parts, segs, corrs, cfg.tau_cov, seed=cfg.seed, reliable=reliable,
                               min_rigidity=cfg.min_rigidity)
    if cover.dropped:
        warnings.append(f"{len(cover.dropped)} superpixels could not be covered and were dropped")
    solutions, lp_value = selection.solve_set_cover(cover, cfg.rounds, seed=cfg.seed)
    timings["select"] = clock() - t0

    t0 = clock()
    cache = selection.PartRenderCache(parts, sheet, corrs, cfg.mode, cfg.lambda_r, cfg.mesh_spacing, cfg.seed)
    best, scored = selection.rank_solutions(solutions, cache)
    timings["rank"] = clock() - t0

    pids = best.selected
    pose_labels = [selection.transfer_labels(pids, cache, p.pose_id) for p in sheet.poses]
    recon = [cache.reconstruct(pids, p.pose_id) for p in sheet.poses]
    pose_mse = [image_metrics(img, p, cov)[0] for (img, cov), p in zip(recon, sheet.poses)]
    return ExtractResult(cfg, segs, corrs, clusterings, parts, cover, lp_value, scored, best,
                         pose_labels, recon, pose_mse, timings, warnings)


# -- files ----------------------------------------------------------------------------------


def find_ground_truth(manifest_path) -> Path | None:
    """The ``gt`` directory written next to a synthetic manifest, if present."""
    gt = Path(manifest_path).parent / "gt"
    return gt if (gt / "labels").is_dir() else None


def load_gt_corrs(gt_dir, n_poses: int) -> dict | None:
    if gt_dir is None:
        return None
    return load_corr_dir(Path(gt_dir) / "corr", n_poses)


def load_gt_labels(gt_dir, n_poses: int) -> list[np.ndarray] | None:
    paths = [Path(gt_dir) / "labels" / f"pose_{i:02d}.png" for i in range(n_poses)]
    if not all(p.is_file() for p in paths):
        return None
    return [read_label_map(p).labels for p in paths]


def evaluate(pred_labels, gt_labels=None, pred_corrs=None, gt_corrs=None, pose_mse=None) -> MetricReport:
    rep = MetricReport()
    if gt_labels is not None:
        rep.part_iou = part_iou(pred_labels, gt_labels)
    if pred_corrs is not None and gt_corrs is not None:
        rep.epe = float(np.mean([epe(pred_corrs[k], gt_corrs[k]) for k in sorted(gt_corrs)]))
    if pose_mse is not None:
        rep.mse = float(np.mean(pose_mse))
        rep.psnr = mse_to_psnr(rep.mse)
    return rep


def _save_png(arr, path):
    Image.fromarray(arr).save(path, optimize=False)


def write_outputs(res: ExtractResult, sheet: SpriteSheet, out_dir, gt_dir=None, corr_source="descriptor") -> dict:
    """Write every artifact of an extraction run; returns the results document.

    All files except ``run_log.json`` (wall-clock timings) depend only on the
    inputs and the seed.
    """
    from .sheet_io import save_results

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    n = len(sheet.poses)

    for sub in ("segments", "recon", "corr"):
        (out / sub).mkdir(exist_ok=True)
    for i, seg in res.segs.items():
        write_label_map(seg.labels, out / "segments" / f"pose_{i:02d}.png")
    if corr_source == "descriptor":
        for (s, t), c in sorted(res.corrs.items()):
            write_corr(c, out / "corr" / corr_filename(s, t))
    for i, (img, _) in enumerate(res.recon):
        _save_png(img, out / "recon" / f"pose_{i:02d}.png")

    skel = skeleton_from_labels(res.labels[0], sheet.poses[0].mask)
    (out / "skeleton.json").write_text(skel.dumps())

    report, gt_labels = None, None
    if gt_dir is not None:
        gt_labels = load_gt_labels(gt_dir, n)
        gt_corrs = load_gt_corrs(gt_dir, n) if corr_source == "descriptor" else None
        report = evaluate(res.labels, gt_labels, res.corrs if gt_corrs else None, gt_corrs, res.pose_mse)
        (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")

    extra = {
        "config": res.config.to_json() | {"jobs": None},
        "correspondences": corr_source,
        "candidates": len(res.parts),
        "universe": len(res.cover.universe),
        "dropped_elements": len(res.cover.dropped),
        "lp_bound": res.lp_value,
        "solutions": [{"selected": s.selected, "cost": s.cost, "recon_error": _finite(s.recon_error)}
                      for s in res.solutions],
        "pose_mse": res.pose_mse,
        "pose_psnr": [mse_to_psnr(m) for m in res.pose_mse],
        "warnings": res.warnings,
    }
    best = res.best
    best.recon_error = _finite(best.recon_error)
    path = save_results(res.parts, best, out, pose_labels=res.labels, extra=extra)
    doc = json.loads(path.read_text())

    (out / "figures").mkdir(exist_ok=True)
    figures.parts_figure(sheet, res.labels, out / "figures" / "parts.png")
    figures.recon_figure(sheet, res.recon, res.pose_mse, out / "figures" / "recon.png")
    figures.skeleton_figure(sheet.poses[0].image, skel, out / "figures" / "skeleton.png", res.labels[0])
    rows = []
    for i, (lab, m) in enumerate(zip(res.labels, res.pose_mse)):
        row = {"pose": i, "parts": int(len(np.unique(lab[lab > 0]))), "mse": f"{m:.4f}"}
        psnr = mse_to_psnr(m)
        row["psnr"] = psnr if isinstance(psnr, str) else f"{psnr:.4f}"
        if gt_labels is not None:
            row["part_iou"] = f"{pose_part_iou(lab, gt_labels[i]):.4f}"
        rows.append(row)
    figures.write_report(rows, out / "report.tsv")

    log_doc = {"timings_s": {k: round(v, 3) for k, v in res.timings.items()}, "lp_bound": res.lp_value,
               "candidates": len(res.parts), "selected": best.selected, "warnings": res.warnings}
    (out / "run_log.json").write_text(json.dumps(log_doc, indent=2, sort_keys=True) + "\n")
    return doc


def _finite(v):
    return None if v is None or not math.isfinite(v) else float(v)
