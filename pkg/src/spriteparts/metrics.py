"""Evaluation metrics: Hungarian part IoU, end-point error, image MSE/PSNR."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import CorrespondenceMap, LabelMap, Pose


@dataclass
class MetricReport:
    part_iou: float | None = None
    epe: float | None = None
    mse: float | None = None
    psnr: float | str | None = None  # "infinite" when mse == 0

    def to_json(self) -> dict:
        return asdict(self)


def _labels(x) -> np.ndarray:
    return np.asarray(x.labels if isinstance(x, LabelMap) else x)


def iou_matrix(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU between every predicted and every ground-truth part of one pose.

    Returns ``(iou, pred_ids, gt_ids)``; label 0 is background and ignored.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    p_ids = np.unique(pred[pred > 0])
    g_ids = np.unique(gt[gt > 0])
    if not len(p_ids) or not len(g_ids):
        return np.zeros((len(p_ids), len(g_ids))), p_ids, g_ids
    p_idx = np.searchsorted(p_ids, pred)
    g_idx = np.searchsorted(g_ids, gt)
    both = (pred > 0) & (gt > 0)
    inter = np.zeros((len(p_ids), len(g_ids)))
    np.add.at(inter, (p_idx[both], g_idx[both]), 1)
    p_area = np.bincount(p_idx[pred > 0], minlength=len(p_ids))
    g_area = np.bincount(g_idx[gt > 0], minlength=len(g_ids))
    union = p_area[:, None] + g_area[None, :] - inter
    return inter / np.maximum(union, 1), p_ids, g_ids


def pose_part_iou(pred, gt) -> float:
    """Mean IoU over ground-truth parts after 1-IoU Hungarian matching; unmatched parts score 0."""
    pred, gt = _labels(pred), _labels(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"label maps differ in shape: {pred.shape} vs {gt.shape}")
    iou, _, g_ids = iou_matrix(pred, gt)
    if not len(g_ids):
        raise ValueError("ground truth has no parts")
    if not iou.size:
        return 0.0
    rows, cols = linear_sum_assignment(1.0 - iou)
    return float(iou[rows, cols].sum() / len(g_ids))


def part_iou(pred, gt) -> float:
    """Average of per-pose part IoU over a list of poses."""
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted label maps for {len(gt)} ground-truth ones")
    return float(np.mean([pose_part_iou(p, g) for p, g in zip(pred, gt)]))


def epe(pred: CorrespondenceMap, gt: CorrespondenceMap) -> float:
    """Mean end-point error over pixels with a ground-truth target.

    A missing prediction costs the image diagonal.
    """
    if (pred.source_pose, pred.target_pose) != (gt.source_pose, gt.target_pose):
        raise ValueError(
            f"pose pairs differ: {pred.source_pose}->{pred.target_pose} vs {gt.source_pose}->{gt.target_pose}"
        )
    if pred.shape != gt.shape:
        raise ValueError("correspondence maps differ in shape")
    defined = gt.valid
    if not defined.any():
        raise ValueError("ground truth defines no correspondences")
    h, w = gt.shape
    d = np.linalg.norm(pred.targets[defined].astype(np.float64) - gt.targets[defined].astype(np.float64), axis=1)
    d = np.where(np.isnan(d), math.hypot(h, w), d)
    return float(d.mean())


def mse_to_psnr(mse: float) -> float | str:
    return "infinite" if mse == 0 else float(10.0 * math.log10(255.0 ** 2 / mse))


def image_metrics(recon: np.ndarray, gt: Pose, coverage: np.ndarray | None = None) -> tuple[float, float | str]:
    """MSE and PSNR over the union of the ground-truth foreground and rendered pixels.

    ``coverage`` marks rendered pixels; by default any nonzero pixel counts.
    """
    recon = np.asarray(recon, dtype=np.float64)
    if recon.shape != gt.image.shape:
        raise ValueError(f"reconstruction {recon.shape} vs ground truth {gt.image.shape}")
    if coverage is None:
        coverage = recon.any(axis=-1)
    region = gt.mask | np.asarray(coverage, dtype=bool)
    diff = recon[region] - gt.image[region].astype(np.float64)
    mse = float((diff ** 2).mean()) if diff.size else 0.0
    return mse, mse_to_psnr(mse)
