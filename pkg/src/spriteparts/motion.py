"""Per-superpixel rigid motion from dense correspondences.

Each superpixel's transform is fitted by RANSAC over its own correspondences
and those of its 1-ring neighbors, using 2-point closed-form Procrustes
hypotheses and a Procrustes refit on the winning inlier set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CorrespondenceMap, SuperpixelSegmentation
from .superpixel import adjacency, neighbor_lists


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 100
    inlier_threshold: float = 2.0  # px
    min_pairs: int = 2
    pool_neighbors: bool = True


@dataclass
class VotingMap:
    entries: np.ndarray  # (H, W, 4): x - x_c, x' - x_c'; NaN where invalid
    validity: np.ndarray  # (H, W) bool
    source_centroids: np.ndarray  # (K, 2)
    target_centroids: np.ndarray  # (K, 2), NaN for superpixels without matches
    labels: np.ndarray  # (H, W) superpixel ids

    def pairs(self, superpixel: int) -> tuple[np.ndarray, np.ndarray]:
        """Absolute ``(x, x')`` pairs of one superpixel's valid pixels."""
        rows, cols = np.nonzero((self.labels == superpixel) & self.validity)
        src = np.stack([cols, rows], axis=1).astype(np.float64)
        k = superpixel - 1
        dst = self.entries[rows, cols, 2:] + self.target_centroids[k]
        return src, dst


@dataclass
class MotionField:
    rotations: np.ndarray  # (K,) radians in (-pi, pi]
    translations: np.ndarray  # (K, 2)
    inlier_ratio: np.ndarray  # (K,) in [0, 1]; 0 flags a superpixel without a fit
    valid: np.ndarray  # (K,) bool
    inlier_pixels: np.ndarray | None = None  # (H, W) bool: matched pixels agreeing with their own superpixel's fit

    @property
    def count(self) -> int:
        return len(self.rotations)

    def matrices(self) -> np.ndarray:
        c, s = np.cos(self.rotations), np.sin(self.rotations)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    out = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(out <= -np.pi, out + 2 * np.pi, out)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def procrustes_2d(src, dst, weights=None) -> tuple[float, np.ndarray]:
    """Least-squares rotation angle and translation with ``dst ~ R @ src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    ps = (w[:, None] * src).sum(0) / wsum
    pd = (w[:, None] * dst).sum(0) / wsum
    a, b = src - ps, dst - pd
    dot = (w * (a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])).sum()
    cross = (w * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])).sum()
    theta = float(np.arctan2(cross, dot))
    t = pd - rotation_matrix(theta) @ ps
    return float(wrap_angle(theta)), t


def ransac_rigid(src, dst, params: RansacParams, rng, own: np.ndarray | None = None):
    """Robust rigid fit; returns ``(theta, t, inlier_mask)`` or None.

    Hypotheses are scored by inliers among ``own`` rows first (all rows when
    ``own`` is None), then by inliers over all rows, then by lower mean
    inlier error, then by lower iteration index. The refit uses only the
    winning hypothesis' ``own`` inliers when at least three exist.
    """
    n = len(src)
    if n < max(params.min_pairs, 2):
        return None
    own = np.ones(n, dtype=bool) if own is None else own
    i1 = rng.integers(0, n, params.iterations)
    i2 = rng.integers(0, n - 1, params.iterations)
    i2 = i2 + (i2 >= i1)
    ps, pd = (src[i1] + src[i2]) / 2, (dst[i1] + dst[i2]) / 2
    ds, dd = (src[i2] - src[i1]) / 2, (dst[i2] - dst[i1]) / 2
    theta = np.arctan2(ds[:, 0] * dd[:, 1] - ds[:, 1] * dd[:, 0], ds[:, 0] * dd[:, 0] + ds[:, 1] * dd[:, 1])
    degenerate = np.hypot(ds[:, 0], ds[:, 1]) < 1e-9
    c, s = np.cos(theta), np.sin(theta)
    tx = pd[:, 0] - (c * ps[:, 0] - s * ps[:, 1])
    ty = pd[:, 1] - (s * ps[:, 0] + c * ps[:, 1])
    rx = c[:, None] * src[None, :, 0] - s[:, None] * src[None, :, 1] + tx[:, None] - dst[None, :, 0]
    ry = s[:, None] * src[None, :, 0] + c[:, None] * src[None, :, 1] + ty[:, None] - dst[None, :, 1]
    err = np.hypot(rx, ry)
    inl = err <= params.inlier_threshold
    n_all = inl.sum(1)
    n_own = inl[:, own].sum(1)
    mean_err = np.where(n_all > 0, (err * inl).sum(1) / np.maximum(n_all, 1), np.inf)
    n_all = np.where(degenerate, -1, n_all)
    n_own = np.where(degenerate, -1, n_own)
    order = np.lexsort((np.arange(params.iterations), mean_err, -n_all, -n_own))
    best = order[0]
    if degenerate[best] or n_all[best] < 2:
        return None
    inliers = inl[best]
    # refit on the superpixel's own inliers when there are enough of them, so
    # neighbors from another part near a joint cannot bias the estimate
    own_inl = inliers & own
    if own_inl.sum() >= 3:
        inliers = own_inl
    theta_f, t_f = procrustes_2d(src[inliers], dst[inliers])
    r = rotation_matrix(theta_f)
    final = np.hypot(*(src @ r.T + t_f - dst).T) <= params.inlier_threshold
    return theta_f, t_f, final


def build_voting_map(seg: SuperpixelSegmentation, corr: CorrespondenceMap) -> VotingMap:
    if corr.source_pose != seg.pose_id:
        raise ValueError(f"segmentation is of pose {seg.pose_id}, correspondences start at {corr.source_pose}")
    if corr.shape != seg.labels.shape:
        raise ValueError("segmentation and correspondence shapes differ")
    labels = seg.labels
    k = seg.count
    valid = corr.valid & (labels > 0)
    rows, cols = np.nonzero(valid)
    lab = labels[rows, cols]
    tgt = corr.targets[rows, cols].astype(np.float64)
    cnt = np.bincount(lab, minlength=k + 1)[1:]
    tc = np.full((k, 2), np.nan)
    has = cnt > 0
    for d in range(2):
        tc[has, d] = np.bincount(lab, weights=tgt[:, d], minlength=k + 1)[1:][has] / cnt[has]
    entries = np.full((*labels.shape, 4), np.nan)
    entries[rows, cols, 0] = cols - seg.centroids[lab - 1, 0]
    entries[rows, cols, 1] = rows - seg.centroids[lab - 1, 1]
    entries[rows, cols, 2:] = tgt - tc[lab - 1]
    return VotingMap(entries, valid, seg.centroids.copy(), tc, labels)


def fit_superpixel_motions(
    vm: VotingMap,
    seg: SuperpixelSegmentation,
    adj=None,
    params: RansacParams = RansacParams(),
    seed=0,
) -> MotionField:
    """Rigid transform per superpixel; seeds derive from ``(seed, superpixel id)``."""
    k = seg.count
    nbrs = neighbor_lists(seg, adjacency(seg) if adj is None else adj)
    rows, cols = np.nonzero(vm.validity)
    lab = vm.labels[rows, cols]
    src_all = np.stack([cols, rows], axis=1).astype(np.float64)
    dst_all = vm.entries[rows, cols, 2:] + vm.target_centroids[lab - 1]
    order = np.argsort(lab, kind="stable")
    bounds = np.searchsorted(lab[order], np.arange(1, k + 2))
    members = [order[bounds[i]:bounds[i + 1]] for i in range(k)]

    rot = np.zeros(k)
    trans = np.zeros((k, 2))
    ratio = np.zeros(k)
    ok = np.zeros(k, dtype=bool)
    agree = np.zeros(vm.validity.shape, dtype=bool)
    seed_key = list(np.atleast_1d(seed).astype(np.int64))
    for i in range(k):
        pool = [members[i]]
        if params.pool_neighbors:
            pool += [members[j - 1] for j in nbrs[i]]
        idx = np.concatenate(pool)
        own = np.zeros(len(idx), dtype=bool)
        own[: len(members[i])] = True
        rng = np.random.default_rng(seed_key + [i + 1])
        fit = ransac_rigid(src_all[idx], dst_all[idx], params, rng, own=own)
        if fit is None:
            continue
        theta, t, inliers = fit
        rot[i], trans[i] = theta, t
        ratio[i] = inliers.mean()
        ok[i] = True
        mine = members[i][inliers[: len(members[i])]]
        agree[rows[mine], cols[mine]] = True
    return MotionField(wrap_angle(rot), trans, ratio, ok, agree)
