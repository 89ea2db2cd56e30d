"""Motion residuals, residual-based affinity, and spectral clustering of superpixels."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .core import CorrespondenceMap, SuperpixelSegmentation
from .motion import MotionField

SIGMA_FLOOR = 0.5  # px
DEFAULT_SIGMA = 2.0  # px, equal to the RANSAC inlier threshold
MAX_CLUSTERS = 12
EIGEN_FRACTION = 0.01
EIGEN_TOP = 10


@dataclass
class ResidualMatrix:
    D: np.ndarray  # (K, K, 2); NaN in rows/columns of invalid superpixels
    valid: np.ndarray  # (K,) bool

    @property
    def index(self) -> np.ndarray:
        """1-based ids of the valid superpixels, in row order of ``compact()``."""
        return np.flatnonzero(self.valid) + 1

    def compact(self) -> np.ndarray:
        v = self.valid
        return self.D[np.ix_(v, v)]


@dataclass
class AffinityMatrix:
    A: np.ndarray  # (n, n)
    index: np.ndarray  # superpixel ids for each row
    sigma: float = 1.0


@dataclass
class ClusterResult:
    hard_labels: np.ndarray  # (n,) in 1..C, aligned with ``index``
    count: int
    index: np.ndarray
    soft: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None

    def full_labels(self, n_superpixels: int) -> np.ndarray:
        """(K,) labels by superpixel id - 1; 0 for superpixels not clustered."""
        out = np.zeros(n_superpixels, dtype=np.int64)
        out[self.index - 1] = self.hard_labels
        return out


def _pixel_sums(seg: SuperpixelSegmentation, corr: CorrespondenceMap, use=None):
    k = seg.count
    valid = corr.valid & (seg.labels > 0)
    if use is not None:
        valid &= use
    rows, cols = np.nonzero(valid)
    lab = seg.labels[rows, cols]
    tgt = corr.targets[rows, cols].astype(np.float64)
    n = np.bincount(lab, minlength=k + 1)[1:].astype(np.float64)
    sx = np.stack([np.bincount(lab, weights=cols, minlength=k + 1)[1:],
                   np.bincount(lab, weights=rows, minlength=k + 1)[1:]], axis=1)
    sxp = np.stack([np.bincount(lab, weights=tgt[:, 0], minlength=k + 1)[1:],
                    np.bincount(lab, weights=tgt[:, 1], minlength=k + 1)[1:]], axis=1)
    return n, sx, sxp


def residual_matrix(mf: MotionField, seg: SuperpixelSegmentation, corr: CorrespondenceMap) -> ResidualMatrix:
    """``D[i, j]`` = mean over matched pixels x of superpixel j of ``R_i x + t_i - x'``.

    When the motion field records which pixels agree with their own
    superpixel's fit, only those enter the means, so stray matches and the odd
    pixel of a neighboring part do not bias superpixel j's column.
    """
    if mf.count != seg.count:
        raise ValueError(f"motion field has {mf.count} entries for {seg.count} superpixels")
    n, sx, sxp = _pixel_sums(seg, corr, mf.inlier_pixels)
    valid = mf.valid & (n > 0)
    if not valid.any():
        raise ValueError("no superpixel has both a motion and correspondences")
    safe = np.maximum(n, 1.0)[:, None]
    mean_x, mean_xp = sx / safe, sxp / safe
    r = mf.matrices()
    moved = np.einsum("iab,jb->ija", r, mean_x) + mf.translations[:, None, :]
    D = moved - mean_xp[None, :, :]
    D[~valid] = np.nan
    D[:, ~valid] = np.nan
    return ResidualMatrix(D, valid)


def affinity(res: ResidualMatrix, sigma: float | str = DEFAULT_SIGMA) -> AffinityMatrix:
    """Gaussian kernel on symmetric residuals.

    ``sigma`` is a bandwidth in pixels or ``"median"`` for the median
    off-diagonal residual norm. Either way it is floored at ``SIGMA_FLOOR``.
    The fixed default keeps joint-adjacent superpixels of different parts
    apart; the median bandwidth grows with the size of the motion and lets
    them bridge, which inflates the eigenvalue-based cluster count.
    """
    D = res.compact()
    n = len(D)
    norm = np.linalg.norm(D, axis=-1)
    if sigma == "median":
        off = ~np.eye(n, dtype=bool)
        sigma = float(np.median(norm[off])) if n > 1 else 0.0
    elif isinstance(sigma, str):
        raise ValueError(f"unknown bandwidth {sigma!r}")
    sigma = max(float(sigma), SIGMA_FLOOR)
    A = np.exp(-(norm ** 2 + norm.T ** 2) / (2 * sigma ** 2))
    np.fill_diagonal(A, 1.0)
    return AffinityMatrix(A, res.index, sigma)


def kmeans(x: np.ndarray, k: int, rng, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; returns ``(labels, centers)``."""
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for c in range(1, k):
        total = d2.sum()
        j = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers[c] = x[j]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(1))
    labels = np.full(n, -1)
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = np.argmin(dist, axis=1)
        for c in range(k):
            if not (new == c).any():
                # re-seed an empty cluster at the worst-served point
                far = int(np.argmax(dist[np.arange(n), new]))
                new[far] = c
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            centers[c] = x[labels == c].mean(0)
    return labels, centers


def cluster_count(eigenvalues: np.ndarray, max_clusters: int = MAX_CLUSTERS) -> int:
    """Eigenvalues above 1% of the sum of the 10 largest, clamped to [1, max]."""
    ev = np.sort(np.asarray(eigenvalues))[::-1]
    thr = EIGEN_FRACTION * ev[:EIGEN_TOP].sum()
    return int(np.clip((ev > thr).sum(), 1, min(max_clusters, len(ev))))


def cluster(aff: AffinityMatrix, seed=0, max_clusters: int = MAX_CLUSTERS) -> ClusterResult:
    A = np.asarray(aff.A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("affinity must be square")
    if not np.allclose(A, A.T, atol=1e-12):
        raise ValueError("affinity must be symmetric")
    if A.min() < 0 or A.max() > 1 + 1e-12:
        raise ValueError("affinity entries must lie in [0, 1]")
    n = len(A)
    deg = A.sum(1)
    inv = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    N = A * inv[:, None] * inv[None, :]
    vals, vecs = np.linalg.eigh(N)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    c = cluster_count(vals, max_clusters)
    emb = vecs[:, :c]
    emb = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    rng = np.random.default_rng(seed)
    if c == 1:
        raw = np.zeros(n, dtype=np.int64)
        centers = emb.mean(0, keepdims=True)
    else:
        raw, centers = kmeans(emb, c, rng)
    # number clusters by first appearance so outputs do not depend on k-means numbering
    first = {}
    for lab in raw:
        first.setdefault(int(lab), len(first) + 1)
    hard = np.array([first[int(l)] for l in raw], dtype=np.int64)
    perm = np.array(sorted(first, key=first.get))
    d2 = ((emb[:, None, :] - centers[perm][None]) ** 2).sum(-1)
    soft = np.exp(-(d2 - d2.min(1, keepdims=True)))
    soft /= soft.sum(1, keepdims=True)
    return ClusterResult(hard, len(first), np.asarray(aff.index), soft, vals)


def assign_invalid(labels: np.ndarray, nbrs: list[list[int]]) -> np.ndarray:
    """Give unlabeled superpixels (0) the most frequent label among labeled neighbors.

    Runs as a flood from labeled regions; components with no labeled superpixel
    at all become one new cluster each.
    """
    out = labels.copy()
    while True:
        todo = np.flatnonzero(out == 0)
        if not len(todo):
            return out
        updates = {}
        for i in todo:
            votes = Counter(int(out[j - 1]) for j in nbrs[i] if out[j - 1] > 0)
            if votes:
                top = max(votes.values())
                updates[i] = min(l for l, v in votes.items() if v == top)
        if not updates:
            break
        for i, lab in updates.items():
            out[i] = lab
    nxt = int(out.max()) + 1
    for i in np.flatnonzero(out == 0):
        if out[i] != 0:
            continue
        stack = [i]
        out[i] = nxt
        while stack:
            u = stack.pop()
            for j in nbrs[u]:
                if out[j - 1] == 0:
                    out[j - 1] = nxt
                    stack.append(j - 1)
        nxt += 1
    return out
