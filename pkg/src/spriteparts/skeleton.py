"""Joints and bones from selected parts: root in the central part, a pin per limb, a tip at each limb's far end."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from skimage.morphology import disk, skeletonize

PIN_DILATION = 3  # px
ROLES = ("root", "pin", "tip")


@dataclass
class Joint:
    id: int
    x: float
    y: float
    role: str
    part: int | None = None  # index of the part the joint belongs to


@dataclass
class Skeleton:
    joints: list[Joint] = field(default_factory=list)
    bones: list[tuple[int, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "joints": [{"id": j.id, "x": j.x, "y": j.y, "role": j.role} for j in self.joints],
            "bones": [[int(p), int(c)] for p, c in self.bones],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    @classmethod
    def from_json(cls, doc: dict) -> Skeleton:
        joints = [Joint(int(j["id"]), float(j["x"]), float(j["y"]), str(j["role"])) for j in doc["joints"]]
        return cls(joints, [(int(p), int(c)) for p, c in doc["bones"]])


def _centroid(mask) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    return np.array([cols.mean(), rows.mean()])


def _snap(point, mask) -> np.ndarray:
    """Nearest pixel of ``mask`` to ``point`` (x, y); ties to the first in raster order."""
    rows, cols = np.nonzero(mask)
    d = (cols - point[0]) ** 2 + (rows - point[1]) ** 2
    k = int(np.argmin(d))
    if d[k] < 0.25:
        return np.asarray(point, dtype=np.float64)
    return np.array([cols[k], rows[k]], dtype=np.float64)


def central_part(masks, fg) -> int:
    """Index of the part whose centroid lies nearest the character centroid."""
    c = _centroid(fg)
    d = [np.hypot(*(_centroid(m) - c)) for m in masks]
    return int(np.argmin(d))


def pin_position(limb, center, fg, radius: int = PIN_DILATION) -> np.ndarray:
    """Centroid of the largest component where the two dilated parts meet.

    Without any overlap, the midpoint of the closest pixel pair.
    """
    fp = disk(radius)
    inter = ndimage.binary_dilation(limb, fp) & ndimage.binary_dilation(center, fp) & fg
    if inter.any():
        lab, n = ndimage.label(inter, structure=np.ones((3, 3)))
        sizes = np.bincount(lab.ravel())[1:]
        return _centroid(lab == int(np.argmax(sizes)) + 1)
    # closest pair: nearest center pixel for every limb pixel via the distance transform
    dist, (ri, ci) = ndimage.distance_transform_edt(~center, return_indices=True)
    rows, cols = np.nonzero(limb)
    k = int(np.argmin(dist[rows, cols]))
    r, c = rows[k], cols[k]
    return np.array([(c + ci[r, c]) / 2.0, (r + ri[r, c]) / 2.0])


def medial_geodesic(limb, pin) -> tuple[np.ndarray, np.ndarray]:
    """Medial-axis pixels of ``limb`` (as ``(x, y)``) and their geodesic distance from ``pin``.

    Paths enter the axis at the axis pixel nearest the pin and then follow
    8-connected axis steps (length 1 or sqrt 2). Axis pixels not connected to
    the entry get the straight-line distance from the pin plus a large offset,
    so any connected pixel is preferred.
    """
    axis = skeletonize(limb)
    if not axis.any():
        axis = limb.copy()
    rows, cols = np.nonzero(axis)
    pts = np.stack([cols, rows], axis=1).astype(np.float64)
    n = len(pts)
    idx = -np.ones(axis.shape, dtype=np.int64)
    idx[rows, cols] = np.arange(n)
    src, dst, w = [], [], []
    h, wd = axis.shape
    for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
        r2, c2 = rows + dr, cols + dc
        ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < wd)
        j = np.full(n, -1)
        j[ok] = idx[r2[ok], c2[ok]]
        m = j >= 0
        src.append(np.flatnonzero(m))
        dst.append(j[m])
        w.append(np.full(m.sum(), np.hypot(dr, dc)))
    src, dst, w = np.concatenate(src), np.concatenate(dst), np.concatenate(w)
    graph = coo_matrix((w, (src, dst)), shape=(n, n)).tocsr()
    entry_d = np.hypot(*(pts - pin).T)
    entry = int(np.argmin(entry_d))
    geo = dijkstra(graph, directed=False, indices=entry) + entry_d[entry]
    unreachable = ~np.isfinite(geo)
    geo[unreachable] = entry_d[unreachable] - 1e6
    return pts, geo


def tip_position(limb, pin) -> np.ndarray:
    pts, geo = medial_geodesic(limb, pin)
    return pts[int(np.argmax(geo))]


def build_skeleton(masks, fg) -> Skeleton:
    """Root at the central part, one pin and one tip per other part.

    ``masks`` are boolean part masks of one pose, ``fg`` its foreground.
    """
    masks = [np.asarray(m, dtype=bool) for m in masks if np.asarray(m).any()]
    fg = np.asarray(fg, dtype=bool)
    if not masks:
        raise ValueError("need at least one non-empty part")
    c = central_part(masks, fg)
    center = masks[c]
    joints = [Joint(0, *map(float, _snap(_centroid(center), center)), "root", c)]
    bones = []
    for i, limb in enumerate(masks):
        if i == c:
            continue
        pin = _snap(pin_position(limb, center, fg), fg)
        pin_id = len(joints)
        joints.append(Joint(pin_id, float(pin[0]), float(pin[1]), "pin", i))
        bones.append((0, pin_id))
        tip = tip_position(limb, pin)
        joints.append(Joint(pin_id + 1, float(tip[0]), float(tip[1]), "tip", i))
        bones.append((pin_id, pin_id + 1))
    return Skeleton(joints, bones)


def skeleton_from_labels(labels, fg=None) -> Skeleton:
    labels = np.asarray(labels)
    fg = labels > 0 if fg is None else fg
    return build_skeleton([labels == v for v in np.unique(labels[labels > 0])], fg)
