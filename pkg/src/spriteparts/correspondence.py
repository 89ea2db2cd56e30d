"""Hand-crafted per-pixel descriptors and cosine-similarity matching."""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.color import rgb2lab

from .core import CorrespondenceMap, InputError, Pose

COLOR_SCALES = (1.0, 2.0, 4.0, 8.0)
N_ORIENT_BINS = 8
HIST_WINDOW = 9
SUPPORT_RADIUS = 8  # descriptors depend only on the 17x17 neighborhood
SOFT_TEMPERATURE = 0.07
DEFAULT_KAPPA = 3
DEFAULT_FB_EPS = 3.0
HIST_WEIGHT = 0.1
_CHUNK = 2048


def _masked_blur(values, mask, sigma):
    """Gaussian blur using foreground pixels only (normalized convolution)."""
    truncate = min(4.0, SUPPORT_RADIUS / sigma)
    w = mask.astype(np.float64)
    den = ndimage.gaussian_filter(w, sigma, truncate=truncate, mode="constant")
    out = np.empty_like(values)
    for ch in range(values.shape[-1]):
        num = ndimage.gaussian_filter(values[..., ch] * w, sigma, truncate=truncate, mode="constant")
        out[..., ch] = num / np.maximum(den, 1e-12)
    return out


def _orientation_histogram(lightness, mask):
    gy = ndimage.sobel(lightness, axis=0, mode="nearest")
    gx = ndimage.sobel(lightness, axis=1, mode="nearest")
    mag = np.hypot(gx, gy) * mask
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi) * N_ORIENT_BINS).astype(int), N_ORIENT_BINS - 1)
    hist = np.empty((*lightness.shape, N_ORIENT_BINS))
    for b in range(N_ORIENT_BINS):
        hist[..., b] = ndimage.uniform_filter(np.where(bins == b, mag, 0.0), HIST_WINDOW, mode="constant")
    norm = np.linalg.norm(hist, axis=-1, keepdims=True)
    flat = norm[..., 0] < 1e-9
    hist = hist / np.maximum(norm, 1e-12)
    hist[flat] = 1.0 / np.sqrt(N_ORIENT_BINS)
    # start each histogram at its dominant bin so rotated parts still match
    start = np.argmax(hist, axis=-1)
    shift = (start[..., None] + np.arange(N_ORIENT_BINS)) % N_ORIENT_BINS
    return np.take_along_axis(hist, shift, axis=-1)


def compute_descriptors(pose: Pose) -> np.ndarray:
    """(H, W, 20) unit-norm descriptors; zero off the foreground.

    Layout: Lab color blurred at 1, 2, 4, 8 px (12 values, Lab scaled to
    roughly unit range) followed by an 8-bin gradient-orientation histogram
    over a 9x9 window, rotated to start at its dominant bin.
    """
    mask = np.asarray(pose.mask, dtype=bool)
    if not mask.any():
        raise InputError("descriptors need a non-empty foreground")
    lab = rgb2lab(pose.image)
    lab_n = np.stack([lab[..., 0] / 100.0, lab[..., 1] / 128.0, lab[..., 2] / 128.0], axis=-1)
    parts = [_masked_blur(lab_n, mask, s) for s in COLOR_SCALES]
    parts.append(HIST_WEIGHT * _orientation_histogram(lab[..., 0], mask))
    desc = np.concatenate(parts, axis=-1)
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    desc = desc / np.maximum(norm, 1e-12)
    desc[~mask] = 0.0
    return desc


def _top_matches(src_desc, tgt_desc, k):
    """Indices and similarities of the ``k`` best target rows for every source row."""
    n = len(src_desc)
    idx = np.empty((n, k), dtype=np.int64)
    sim = np.empty((n, k))
    for start in range(0, n, _CHUNK):
        s = src_desc[start:start + _CHUNK] @ tgt_desc.T
        if k == 1:
            best = np.argmax(s, axis=1)[:, None]
        else:
            part = np.argpartition(-s, k - 1, axis=1)[:, :k]
            vals = np.take_along_axis(s, part, axis=1)
            # descending similarity, ties broken by lower target index
            order = np.lexsort((part, -vals), axis=1)
            best = np.take_along_axis(part, order, axis=1)
        idx[start:start + _CHUNK] = best
        sim[start:start + _CHUNK] = np.take_along_axis(s, best, axis=1)
    return idx, sim


def match(
    src: np.ndarray,
    tgt: np.ndarray,
    src_mask: np.ndarray,
    tgt_mask: np.ndarray,
    mode: str = "hard",
    kappa: int = DEFAULT_KAPPA,
    temperature: float = SOFT_TEMPERATURE,
    source_pose: int = 0,
    target_pose: int = 1,
) -> CorrespondenceMap:
    """Nearest-descriptor correspondences from the source to the target foreground."""
    if src.shape[-1] != tgt.shape[-1]:
        raise ValueError("descriptor dimensions differ")
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    if mode not in ("hard", "soft"):
        raise ValueError(f"mode must be 'hard' or 'soft', not {mode!r}")
    src_mask = np.asarray(src_mask, bool)
    tgt_mask = np.asarray(tgt_mask, bool)
    if not tgt_mask.any():
        raise InputError("target foreground is empty")
    sr, sc = np.nonzero(src_mask)
    tr, tc = np.nonzero(tgt_mask)
    tgt_xy = np.stack([tc, tr], axis=1).astype(np.float64)
    k = 1 if mode == "hard" else min(kappa, len(tr))
    idx, sim = _top_matches(src[sr, sc], tgt[tr, tc], k)

    if k == 1:
        xy = tgt_xy[idx[:, 0]]
    else:
        logits = (sim - sim[:, :1]) / temperature
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        xy = np.einsum("nk,nkd->nd", w, tgt_xy[idx])
        _, nearest = cKDTree(tgt_xy).query(xy)
        xy = tgt_xy[nearest]

    targets = np.full((*src_mask.shape, 2), np.nan, dtype=np.float64)
    targets[sr, sc] = xy
    conf = np.zeros(src_mask.shape, dtype=np.float32)
    conf[sr, sc] = np.clip((sim[:, 0] + 1.0) / 2.0, 0.0, 1.0)
    return CorrespondenceMap(source_pose, target_pose, targets, conf)


def filter_mutual(fwd: CorrespondenceMap, bwd: CorrespondenceMap, eps: float = DEFAULT_FB_EPS) -> CorrespondenceMap:
    """Drop forward matches whose backward match lands more than ``eps`` px away."""
    if fwd.source_pose != bwd.target_pose or fwd.target_pose != bwd.source_pose:
        raise ValueError(
            f"pose pairs do not mirror: {fwd.source_pose}->{fwd.target_pose} vs {bwd.source_pose}->{bwd.target_pose}"
        )
    h, w = bwd.shape
    rows, cols = np.nonzero(fwd.valid)
    tx = np.rint(fwd.targets[rows, cols, 0]).astype(np.int64)
    ty = np.rint(fwd.targets[rows, cols, 1]).astype(np.int64)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    back = np.full((len(rows), 2), np.nan)
    back[inside] = bwd.targets[ty[inside], tx[inside]]
    err = np.hypot(back[:, 0] - cols, back[:, 1] - rows)
    keep = np.nan_to_num(err, nan=np.inf) <= eps
    targets = np.full_like(fwd.targets, np.nan)
    targets[rows[keep], cols[keep]] = fwd.targets[rows[keep], cols[keep]]
    conf = np.where(np.isnan(targets[..., 0]), 0.0, fwd.confidence).astype(np.float32)
    return CorrespondenceMap(fwd.source_pose, fwd.target_pose, targets, conf)


def match_poses(src: Pose, tgt: Pose, mode="hard", kappa=DEFAULT_KAPPA, descriptors=None) -> CorrespondenceMap:
    """Convenience wrapper computing descriptors (unless given) and matching."""
    ds = descriptors[0] if descriptors else compute_descriptors(src)
    dt = descriptors[1] if descriptors else compute_descriptors(tgt)
    return match(ds, dt, src.mask, tgt.mask, mode=mode, kappa=kappa,
                 source_pose=src.pose_id, target_pose=tgt.pose_id)
