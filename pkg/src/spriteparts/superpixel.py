"""SLIC superpixels restricted to a foreground mask, plus region adjacency."""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab
from skimage.measure import label as label_regions

from .core import InputError, Pose, SuperpixelSegmentation

DEFAULT_TARGET_COUNT = 200
DEFAULT_COMPACTNESS = 10.0
DEFAULT_ITERATIONS = 10


def _grid_seeds(mask, comp, step):
    """One seed per grid cell holding at least a quarter cell of foreground.

    The seed is the cell's foreground pixel closest to the cell's foreground
    centroid, so it always lies on the mask.
    """
    rows, cols = np.nonzero(mask)
    r0, c0 = rows.min(), cols.min()
    n_cols = int(np.ceil((cols.max() - c0 + 1) / step)) + 1
    cell = ((rows - r0) // step).astype(np.int64) * n_cols + ((cols - c0) // step).astype(np.int64)
    n_cells = int(cell.max()) + 1
    counts = np.bincount(cell, minlength=n_cells)
    cy = np.bincount(cell, weights=rows, minlength=n_cells) / np.maximum(counts, 1)
    cx = np.bincount(cell, weights=cols, minlength=n_cells) / np.maximum(counts, 1)
    d2 = (rows - cy[cell]) ** 2 + (cols - cx[cell]) ** 2
    order = np.lexsort((cols, rows, d2, cell))
    first = order[np.r_[True, np.diff(cell[order]) != 0]]
    keep = counts[cell[first]] >= 0.25 * step * step
    seeds = np.stack([rows[first[keep]], cols[first[keep]]], axis=1)
    # every connected component gets at least one seed
    have = set(comp[seeds[:, 0], seeds[:, 1]].tolist()) if len(seeds) else set()
    extra = []
    for cid in range(1, int(comp.max()) + 1):
        if cid in have:
            continue
        rr, cc = np.nonzero(comp == cid)
        d = (rr - rr.mean()) ** 2 + (cc - cc.mean()) ** 2
        j = np.lexsort((cc, rr, d))[0]
        extra.append((rr[j], cc[j]))
    if extra:
        seeds = np.concatenate([seeds.reshape(-1, 2), np.array(extra)], axis=0)
    return seeds.astype(np.int64)


def _choose_step(mask, comp, target_count):
    area = int(mask.sum())
    step = max(np.sqrt(area / target_count), 1.0)
    best = None
    for _ in range(8):
        seeds = _grid_seeds(mask, comp, max(int(round(step)), 1) if step >= 2 else 1)
        err = abs(len(seeds) - target_count) / target_count
        if best is None or err < best[0]:
            best = (err, step, seeds)
        if err <= 0.05 or step <= 1:
            break
        step *= np.sqrt(len(seeds) / target_count)
        step = max(step, 1.0)
    _, step, seeds = best
    return max(int(round(step)), 1), seeds


def _merge_orphans(labels, mask):
    """Keep the largest 4-connected piece of each superpixel; merge the rest.

    Each orphan piece joins the adjacent superpixel whose centroid is nearest
    to the orphan's centroid.
    """
    regions = label_regions(np.where(mask, labels, 0), background=0, connectivity=1)
    n_reg = int(regions.max())
    if n_reg == 0:
        return labels
    flat_r = regions.ravel()
    fg = flat_r > 0
    rows, cols = np.indices(labels.shape)
    size = np.bincount(flat_r[fg], minlength=n_reg + 1)
    owner = np.zeros(n_reg + 1, dtype=np.int64)
    owner[flat_r[fg]] = labels.ravel()[fg]
    ry = np.bincount(flat_r[fg], weights=rows.ravel()[fg], minlength=n_reg + 1) / np.maximum(size, 1)
    rx = np.bincount(flat_r[fg], weights=cols.ravel()[fg], minlength=n_reg + 1) / np.maximum(size, 1)

    # largest region per owner label is its core; ties go to the lower region id
    order = np.lexsort((np.arange(n_reg + 1), -size, owner))
    core = {}
    for r in order:
        if r == 0:
            continue
        core.setdefault(int(owner[r]), int(r))
    orphans = [r for r in range(1, n_reg + 1) if core[int(owner[r])] != r]
    if not orphans:
        return labels

    # region adjacency over 4-neighbors
    pairs = set()
    for a, b in ((regions[:, :-1], regions[:, 1:]), (regions[:-1, :], regions[1:, :])):
        sel = (a != b) & (a > 0) & (b > 0)
        for u, v in zip(a[sel].tolist(), b[sel].tolist()):
            pairs.add((u, v))
            pairs.add((v, u))
    nbrs: dict[int, set[int]] = {}
    for u, v in pairs:
        nbrs.setdefault(u, set()).add(v)

    # superpixel centroids from core regions
    lab_y = {lab: ry[r] for lab, r in core.items()}
    lab_x = {lab: rx[r] for lab, r in core.items()}
    assigned = {r: int(owner[r]) for r in range(1, n_reg + 1) if core[int(owner[r])] == r}
    pending = sorted(orphans, key=lambda r: (size[r], r))
    while pending:
        progressed = False
        rest = []
        for r in pending:
            cands = sorted({assigned[n] for n in nbrs.get(r, ()) if n in assigned})
            if not cands:
                rest.append(r)
                continue
            d = [(ry[r] - lab_y[c]) ** 2 + (rx[r] - lab_x[c]) ** 2 for c in cands]
            assigned[r] = cands[int(np.argmin(d))]
            progressed = True
        if not progressed:
            # isolated pieces keep their own superpixel
            for r in rest:
                new = max(lab_y) + 1
                lab_y[new], lab_x[new] = ry[r], rx[r]
                assigned[r] = new
            break
        pending = rest
    lut = np.zeros(n_reg + 1, dtype=np.int64)
    for r, lab in assigned.items():
        lut[r] = lab
    return lut[regions]


def _relabel_consecutive(labels):
    """Renumber to 1..K in order of first appearance in raster order."""
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first)]
    lut = np.zeros(int(labels.max()) + 1, dtype=np.int32)
    lut[order] = np.arange(1, len(order) + 1, dtype=np.int32)
    return lut[labels]


def segment(
    pose: Pose,
    target_count: int = DEFAULT_TARGET_COUNT,
    compactness: float = DEFAULT_COMPACTNESS,
    n_iter: int = DEFAULT_ITERATIONS,
) -> SuperpixelSegmentation:
    """Partition the foreground of ``pose`` into roughly ``target_count`` superpixels."""
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    mask = np.asarray(pose.mask, dtype=bool)
    if not mask.any():
        raise InputError("cannot segment an empty foreground")
    h, w = mask.shape
    comp, _ = ndimage.label(mask)
    lab = rgb2lab(pose.image)
    step, seeds = _choose_step(mask, comp, target_count)

    k = len(seeds)
    centers = np.empty((k, 5))
    centers[:, :3] = lab[seeds[:, 0], seeds[:, 1]]
    centers[:, 3] = seeds[:, 0]
    centers[:, 4] = seeds[:, 1]
    center_comp = comp[seeds[:, 0], seeds[:, 1]]
    alive = np.ones(k, dtype=bool)
    rows, cols = np.nonzero(mask)
    flat_idx = rows * w + cols
    spatial_w = (compactness / step) ** 2
    assign = np.zeros((h, w), dtype=np.int64)

    for _ in range(n_iter):
        dist = np.full((h, w), np.inf)
        assign[:] = -1
        for i in np.flatnonzero(alive):
            cy, cx = centers[i, 3], centers[i, 4]
            y0, y1 = max(int(cy - 2 * step), 0), min(int(cy + 2 * step) + 1, h)
            x0, x1 = max(int(cx - 2 * step), 0), min(int(cx + 2 * step) + 1, w)
            win_ok = comp[y0:y1, x0:x1] == center_comp[i]
            dc = ((lab[y0:y1, x0:x1] - centers[i, :3]) ** 2).sum(axis=-1)
            yy, xx = np.mgrid[y0:y1, x0:x1]
            d = dc + ((yy - cy) ** 2 + (xx - cx) ** 2) * spatial_w
            d = np.where(win_ok, d, np.inf)
            sub = dist[y0:y1, x0:x1]
            better = d < sub
            sub[better] = d[better]
            assign[y0:y1, x0:x1][better] = i
        _fill_unassigned(assign, mask, comp, centers, center_comp, alive)
        a = assign.ravel()[flat_idx]
        counts = np.bincount(a, minlength=k)
        alive = counts > 0
        for ch in range(3):
            centers[alive, ch] = np.bincount(a, weights=lab[..., ch].ravel()[flat_idx], minlength=k)[alive] / counts[alive]
        centers[alive, 3] = np.bincount(a, weights=rows, minlength=k)[alive] / counts[alive]
        centers[alive, 4] = np.bincount(a, weights=cols, minlength=k)[alive] / counts[alive]

    labels = np.where(mask, assign + 1, 0)
    labels = _merge_orphans(labels, mask)
    labels = _relabel_consecutive(labels)
    return SuperpixelSegmentation.from_labels(labels, pose_id=pose.pose_id)


def _fill_unassigned(assign, mask, comp, centers, center_comp, alive):
    """Pixels outside every search window go to the spatially nearest live center of their component."""
    miss = mask & (assign < 0)
    if not miss.any():
        return
    rr, cc = np.nonzero(miss)
    live = np.flatnonzero(alive)
    for r, c in zip(rr.tolist(), cc.tolist()):
        same = live[center_comp[live] == comp[r, c]]
        pool = same if len(same) else live
        d = (centers[pool, 3] - r) ** 2 + (centers[pool, 4] - c) ** 2
        assign[r, c] = pool[int(np.argmin(d))]


def adjacency(seg: SuperpixelSegmentation) -> set[tuple[int, int]]:
    """Unordered superpixel pairs ``(i, j)``, ``i < j``, that touch 4-connectedly."""
    labels = seg.labels
    edges = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        sel = (a != b) & (a > 0) & (b > 0)
        if not sel.any():
            continue
        lo = np.minimum(a[sel], b[sel]).astype(np.int64)
        hi = np.maximum(a[sel], b[sel]).astype(np.int64)
        for pair in np.unique(np.stack([lo, hi], axis=1), axis=0):
            edges.add((int(pair[0]), int(pair[1])))
    return edges


def neighbor_lists(seg: SuperpixelSegmentation, edges=None) -> list[list[int]]:
    """1-ring neighbors for each superpixel, indexed by ``id - 1``."""
    edges = adjacency(seg) if edges is None else edges
    nbrs = [[] for _ in range(seg.count)]
    for i, j in sorted(edges):
        nbrs[i - 1].append(j)
        nbrs[j - 1].append(i)
    return nbrs
