"""Candidate-part pooling, cross-pose coverage, set cover and solution ranking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linprog
from skimage.morphology import disk

from .arap import DEFAULT_LAMBDA, TEXTURE_PAD, build_control_mesh, deform_part, deformed_pixels, paint_order, render_part
from .core import CandidatePart, CorrespondenceMap, InputError, SelectionSolution, SpriteSheet, SuperpixelSegmentation
from .metrics import image_metrics
from .motion import RansacParams, ransac_rigid, rotation_matrix

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.5
TRUST_RADIUS = 2.0  # px; a part pixel is trusted when its match lands this close to its deformed position
DEFAULT_ROUNDS = 20
TRANSPORT_RANSAC = RansacParams(iterations=200, inlier_threshold=3.0)
BOUNDARY_TOLERANCE = 2  # px; transported pixels this close to the part still count
MIN_RIGIDITY = 0.9  # share of a part's reliable matches its rigid motion must explain


@dataclass
class CoverageMatrix:
    covers: np.ndarray  # (C, |P|) bool
    universe: list  # (pose id, superpixel id) per column
    dropped: list = field(default_factory=list)  # uncoverable elements removed from the universe

    @property
    def n_parts(self) -> int:
        return self.covers.shape[0]

    def is_cover(self, z) -> bool:
        z = np.asarray(z, dtype=bool)
        return bool(self.covers[z].any(axis=0).all()) if self.covers.shape[1] else True


def pool_candidates(clusterings, segs: dict) -> list[CandidatePart]:
    """One candidate per cluster of every ordered pose pair, exact duplicates removed.

    ``clusterings`` maps ``(source, target)`` to per-superpixel labels of the
    source segmentation (index ``id - 1``; 0 = unclustered, skipped). Pairs
    are visited in sorted order and clusters in label order, so ids are
    stable.
    """
    seen = {}
    parts = []
    for (s, t) in sorted(clusterings):
        labels = np.asarray(clusterings[(s, t)])
        seg = segs[s]
        if len(labels) != seg.count:
            raise ValueError(f"pair {s}->{t}: {len(labels)} labels for {seg.count} superpixels")
        for c in np.unique(labels[labels > 0]):
            members = frozenset((np.flatnonzero(labels == c) + 1).tolist())
            key = (s, members)
            if key in seen:
                continue
            seen[key] = len(parts)
            parts.append(CandidatePart.from_superpixels(len(parts), seg, members))
    return parts


def part_transport(part: CandidatePart, corr: CorrespondenceMap, seed=0, reliable=None,
                   min_rigidity: float = MIN_RIGIDITY):
    """Robust rigid fit ``(theta, t)`` of a part's correspondences into the target pose.

    ``reliable`` marks matches that agree with their own superpixel's motion;
    only those are used, so stray matches do not count against the part.
    Returns None when fewer than ``min_rigidity`` of them fit one rigid
    motion, i.e. when the part does not move as one piece into this pose.
    """
    where = part.pixel_mask if reliable is None else part.pixel_mask & reliable
    src, dst = corr.pairs(where)
    if len(src) < 2:
        return None
    rng = np.random.default_rng(list(np.atleast_1d(seed).astype(np.int64)) + [part.part_id, corr.target_pose])
    fit = ransac_rigid(src, dst, TRANSPORT_RANSAC, rng)
    if fit is None or fit[2].mean() < min_rigidity:
        return None
    return fit[0], fit[1]


def transported_fraction(part: CandidatePart, seg_t: SuperpixelSegmentation, theta: float, t,
                         tolerance: int = BOUNDARY_TOLERANCE) -> np.ndarray:
    """Per target superpixel, the fraction of its pixels that map back into the part.

    Each target pixel is carried to the source pose by the inverse of the
    part's rigid motion and counted when it lands within ``tolerance`` px of
    a part pixel, which absorbs the superpixel-sized jags of part borders.
    """
    mask = part.pixel_mask
    if tolerance > 0:
        mask = ndimage.binary_dilation(mask, disk(tolerance))
    r = rotation_matrix(theta)
    rows, cols = np.nonzero(seg_t.labels)
    pts = np.stack([cols, rows], axis=1).astype(np.float64)
    back = (pts - t) @ r  # r^T (x - t) as row vectors
    xi = np.rint(back[:, 0]).astype(np.int64)
    yi = np.rint(back[:, 1]).astype(np.int64)
    h, w = part.pixel_mask.shape
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    hit = np.zeros(len(pts), dtype=bool)
    hit[inside] = mask[yi[inside], xi[inside]]
    lab = seg_t.labels[rows, cols]
    k = seg_t.count
    n_hit = np.bincount(lab, weights=hit.astype(np.float64), minlength=k + 1)[1:]
    return n_hit / np.maximum(seg_t.sizes, 1)


def coverage(parts, segs: dict, corrs: dict, tau: float = DEFAULT_TAU, seed=0, reliable: dict | None = None,
             min_rigidity: float = MIN_RIGIDITY) -> CoverageMatrix:
    """Which universe elements (pose, superpixel) each candidate covers.

    A part covers its own superpixels. In another pose t it covers superpixel
    j when at least ``tau`` of j's pixels map back into the part under the
    part's rigid motion s -> t (fitted robustly to its correspondences, see
    ``part_transport``). A part that does not move rigidly into t covers
    nothing there. ``reliable`` maps ``(s, t)`` to the matches that agree
    with their superpixel's motion.
    """
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    poses = sorted(segs)
    universe = [(p, j) for p in poses for j in range(1, segs[p].count + 1)]
    col = {e: i for i, e in enumerate(universe)}
    covers = np.zeros((len(parts), len(universe)), dtype=bool)
    for c, part in enumerate(parts):
        s = part.source_pose
        for j in part.superpixels:
            covers[c, col[(s, j)]] = True
        for t in poses:
            if t == s:
                continue
            if (s, t) not in corrs:
                raise InputError(f"missing correspondence map {s}->{t}")
            rel = None if reliable is None else reliable.get((s, t))
            fit = part_transport(part, corrs[(s, t)], seed, rel, min_rigidity)
            if fit is None:
                continue
            frac = transported_fraction(part, segs[t], *fit)
            for j in np.flatnonzero(frac >= tau) + 1:
                covers[c, col[(t, int(j))]] = True
    keep = covers.any(axis=0)
    dropped = [e for e, k in zip(universe, keep) if not k]
    if dropped:
        log.warning("%d universe elements cannot be covered and were dropped", len(dropped))
    return CoverageMatrix(covers[:, keep], [e for e, k in zip(universe, keep) if k], dropped)


def lp_relaxation(cov: CoverageMatrix) -> tuple[np.ndarray, float]:
    """Optimal fractional cover: min sum z s.t. covers^T z >= 1, 0 <= z <= 1."""
    n, m = cov.covers.shape
    if m == 0:
        return np.zeros(n), 0.0
    if not cov.covers.any(axis=0).all():
        raise ValueError("infeasible: some element is covered by no part")
    res = linprog(
        np.ones(n), A_ub=-cov.covers.T.astype(np.float64), b_ub=-np.ones(m),
        bounds=[(0.0, 1.0)] * n, method="highs",
    )
    if res.status != 0:
        raise RuntimeError(f"LP relaxation failed: {res.message}")
    return np.clip(res.x, 0.0, 1.0), float(res.fun)


def _repair(covers, z):
    covered = covers[z].any(axis=0)
    while not covered.all():
        gain = covers[:, ~covered].sum(axis=1)
        gain[z] = -1
        best = int(np.argmax(gain))  # first maximum, i.e. lowest index
        z[best] = True
        covered |= covers[best]
    return z


def _prune(covers, z):
    """Drop redundant parts, trying those covering the most elements first."""
    sizes = covers.sum(axis=1)
    for c in sorted(np.flatnonzero(z), key=lambda c: (-sizes[c], c)):
        z[c] = False
        if not covers[z].any(axis=0).all():
            z[c] = True
    return z


def solve_set_cover(cov: CoverageMatrix, rounds: int = DEFAULT_ROUNDS, seed=0):
    """LP relaxation, then ``rounds`` randomized roundings with greedy repair and pruning.

    Returns ``(solutions, lp_value)``; solutions are distinct, in the order
    first produced.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    z_lp, lp_value = lp_relaxation(cov)
    n, m = cov.covers.shape
    alpha = math.log(2 * max(m, 1))
    p = np.minimum(1.0, alpha * z_lp)
    seed_key = list(np.atleast_1d(seed).astype(np.int64))
    out, seen = [], set()
    for trial in range(rounds):
        rng = np.random.default_rng(seed_key + [trial])
        z = rng.random(n) < p
        z = _prune(cov.covers, _repair(cov.covers, z))
        sol = SelectionSolution(z.astype(np.uint8))
        if sol.key() not in seen:
            seen.add(sol.key())
            out.append(sol)
    return out, lp_value


# -- ranking and label transfer ------------------------------------------------------------


class PartRenderCache:
    """Meshes and per-target renders of candidate parts, computed on demand."""

    def __init__(self, parts, sheet: SpriteSheet, corrs: dict, mode="corr_guided", lam=DEFAULT_LAMBDA,
                 spacing=None, seed=0, pad: int = TEXTURE_PAD):
        self.parts = {p.part_id: p for p in parts}
        self.sheet = sheet
        self.poses = {p.pose_id: p for p in sheet.poses}
        self.corrs = corrs
        self.mode, self.lam, self.seed = mode, lam, seed
        self.spacing = spacing
        self.pad = pad
        self.meshes: dict = {}
        self.renders: dict = {}

    def mesh(self, pid):
        if pid not in self.meshes:
            part = self.parts[pid]
            kw = {} if self.spacing is None else {"spacing": self.spacing}
            self.meshes[pid] = build_control_mesh(part, self.poses[part.source_pose], pad=self.pad, **kw)
        return self.meshes[pid]

    def render(self, pid, target_id):
        """``(color, padded, part, trusted)`` coverage of one part deformed into one pose.

        Trusted pixels are part pixels whose correspondence agrees with the
        deformation; straddling pixels that really belong to a neighboring
        part are not trusted.
        """
        key = (pid, target_id)
        if key not in self.renders:
            part = self.parts[pid]
            target = self.poses[target_id]
            mesh = self.mesh(pid)
            corr = None if part.source_pose == target_id else self.corrs.get((part.source_pose, target_id))
            state, _ = deform_part(part, mesh, target, corr, self.mode, self.lam, self.seed)
            trusted = mesh.core.copy()
            if corr is not None:
                pos = deformed_pixels(mesh, state.vertices)
                r, c = mesh.pixel_xy[:, 1].astype(int), mesh.pixel_xy[:, 0].astype(int)
                tgt = corr.targets[r, c].astype(np.float64)
                far = np.linalg.norm(pos - tgt, axis=1) > TRUST_RADIUS  # NaN (no match) compares False
                trusted[r[far], c[far]] = False
            self.renders[key] = render_part(mesh, state.vertices, target.shape, with_core=True, trusted=trusted)
        return self.renders[key]

    def reconstruct(self, pids, target_id):
        """Composite of the given parts in ``target_id``: ``(image uint8, coverage)``.

        Padding on the target foreground comes first, each pixel taken from
        the part whose deformed body is nearest (ties to the earlier part in
        ``paint_order``). Then, in ``paint_order``, the parts on the target
        foreground and finally their trusted pixels everywhere. Padding thus
        only fills seams between parts cut from different poses, and pixels a
        part holds by mistake neither hide the part they belong to nor spill
        onto the background.
        """
        target = self.poses[target_id]
        out = np.zeros((*target.shape, 3))
        cov = np.zeros(target.shape, dtype=bool)
        order = paint_order([self.parts[i] for i in pids])
        renders = [self.render(part.part_id, target_id) for part in order]
        best = np.full(target.shape, np.inf)
        for r in renders:
            dist = ndimage.distance_transform_edt(~r[2]) if r[2].any() else np.full(target.shape, np.inf)
            c = r[1] & target.mask & (dist < best)
            out[c] = r[0][c]
            best[c] = dist[c]
            cov |= c
        for layer in (2, 3):
            for r in renders:
                c = r[layer] & target.mask if layer == 2 else r[layer]
                out[c] = r[0][c]
                cov |= c
        return np.clip(np.rint(out), 0, 255).astype(np.uint8), cov


def score_solution(sol: SelectionSolution, cache: PartRenderCache) -> SelectionSolution:
    errors = []
    try:
        for pose in cache.sheet.poses:
            img, cov = cache.reconstruct(sol.selected, pose.pose_id)
            errors.append(image_metrics(img, pose, cov)[0])
        err = float(np.mean(errors))
    except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
        log.warning("reconstruction failed for solution %s: %s", sol.selected, exc)
        errors, err = [], math.inf
    return SelectionSolution(sol.z.copy(), err, errors)


def rank_solutions(solutions, cache: PartRenderCache) -> tuple[SelectionSolution, list[SelectionSolution]]:
    """Score every solution by mean per-pose reconstruction MSE and return ``(best, scored)``.

    Ties go to the lower cost, then the lexicographically smaller ``z``.
    """
    if not solutions:
        raise ValueError("no solutions to rank")
    scored = [score_solution(s, cache) for s in solutions]
    best = min(scored, key=lambda s: (s.recon_error, s.cost, s.key()))
    return best, scored


def transfer_labels(pids, cache: PartRenderCache, target_id) -> np.ndarray:
    """Per-pose part labels 1..k (in ``pids`` order) from the deformed parts.

    Parts paint in ``paint_order``, trusted pixels in a second pass as in
    ``PartRenderCache.reconstruct``; foreground pixels no part reaches take the
    label of the nearest labeled pixel, and background stays 0.
    """
    pose = cache.poses[target_id]
    rank = {pid: k + 1 for k, pid in enumerate(pids)}
    labels = np.zeros(pose.shape, dtype=np.uint16)
    for part in paint_order([cache.parts[i] for i in pids]):
        _, _, c, _ = cache.render(part.part_id, target_id)
        labels[c] = rank[part.part_id]
    for part in paint_order([cache.parts[i] for i in pids]):
        _, _, _, c = cache.render(part.part_id, target_id)
        labels[c] = rank[part.part_id]
    labels[~pose.mask] = 0
    missing = pose.mask & (labels == 0)
    if missing.any() and (labels > 0).any():
        _, (ri, ci) = ndimage.distance_transform_edt(labels == 0, return_indices=True)
        labels[missing] = labels[ri[missing], ci[missing]]
    return labels
