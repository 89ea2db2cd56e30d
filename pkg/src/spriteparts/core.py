"""Shared data containers passed between pipeline stages.

Coordinates follow image conventions throughout: points are ``(x, y)`` with
``x`` the column and ``y`` the row, and arrays are indexed ``[row, col]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InputError(ValueError):
    """Raised for malformed user-supplied data (files, manifests, configs)."""


@dataclass
class Pose:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) bool
    pose_id: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise InputError(f"pose {self.pose_id}: image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise InputError(
                f"pose {self.pose_id}: image {self.image.shape[:2]} and mask {self.mask.shape} disagree"
            )
        if not self.mask.any():
            raise InputError(f"pose {self.pose_id}: mask has no foreground pixels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class SpriteSheet:
    poses: list[Pose]
    name: str = "sheet"

    def __post_init__(self):
        if len(self.poses) < 2:
            raise InputError(f"a sprite sheet needs at least 2 poses, got {len(self.poses)}")
        shapes = {p.shape for p in self.poses}
        if len(shapes) != 1:
            raise InputError(f"pose dimensions differ across the sheet: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.poses[0].shape

    def __len__(self):
        return len(self.poses)


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W) uint16, 0 = background
    legend: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise InputError(f"label map must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max):
            raise InputError("labels must fit in 16 bits")
        self.labels = labels.astype(np.uint16)

    def ids(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels) if v != 0]


@dataclass
class CorrespondenceMap:
    """Dense map from source-pose foreground pixels to target-pose positions.

    ``targets[r, c]`` holds the ``(x, y)`` target of source pixel ``(c, r)``,
    or NaN where there is no correspondence.
    """

    source_pose: int
    target_pose: int
    targets: np.ndarray  # (H, W, 2) float64 in memory (APCR files store float32), NaN = none
    confidence: np.ndarray | None = None  # (H, W) float32 in [0, 1]

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim != 3 or self.targets.shape[2] != 2:
            raise InputError(f"targets must be HxWx2, got {self.targets.shape}")
        if self.confidence is None:
            self.confidence = np.where(self.valid, 1.0, 0.0).astype(np.float32)
        else:
            self.confidence = np.asarray(self.confidence, dtype=np.float32)

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.targets[..., 0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.targets.shape[:2]

    def pairs(self, where: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(src_xy, dst_xy)`` float arrays over valid pixels (optionally masked)."""
        ok = self.valid if where is None else (self.valid & where)
        rows, cols = np.nonzero(ok)
        src = np.stack([cols, rows], axis=1).astype(np.float64)
        dst = self.targets[rows, cols].astype(np.float64)
        return src, dst

    @classmethod
    def empty(cls, source_pose: int, target_pose: int, shape: tuple[int, int]) -> CorrespondenceMap:
        return cls(source_pose, target_pose, np.full((*shape, 2), np.nan, dtype=np.float64))

    @classmethod
    def identity(cls, source_pose: int, target_pose: int, mask: np.ndarray) -> CorrespondenceMap:
        rows, cols = np.indices(mask.shape)
        targets = np.stack([cols, rows], axis=-1).astype(np.float64)
        targets[~mask] = np.nan
        return cls(source_pose, target_pose, targets)


@dataclass
class SuperpixelSegmentation:
    labels: np.ndarray  # (H, W) int32, 0 = background, 1..K superpixels
    centroids: np.ndarray  # (K, 2) mean (x, y) of member pixels
    sizes: np.ndarray  # (K,) pixel counts
    pose_id: int = 0

    @property
    def count(self) -> int:
        return len(self.sizes)

    @classmethod
    def from_labels(cls, labels: np.ndarray, pose_id: int = 0) -> SuperpixelSegmentation:
        labels = np.asarray(labels, dtype=np.int32)
        k = int(labels.max()) if labels.size else 0
        flat = labels.ravel()
        rows, cols = np.indices(labels.shape)
        sizes = np.bincount(flat, minlength=k + 1)[1:]
        if k and (sizes == 0).any():
            raise ValueError("superpixel labels must be consecutive 1..K with no empty ids")
        sx = np.bincount(flat, weights=cols.ravel(), minlength=k + 1)[1:]
        sy = np.bincount(flat, weights=rows.ravel(), minlength=k + 1)[1:]
        centroids = np.stack([sx / sizes, sy / sizes], axis=1) if k else np.zeros((0, 2))
        return cls(labels, centroids, sizes.astype(np.int64), pose_id)


@dataclass
class CandidatePart:
    part_id: int
    source_pose: int
    superpixels: frozenset[int]
    pixel_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.superpixels = frozenset(int(s) for s in self.superpixels)
        if not self.superpixels:
            raise ValueError("a candidate part needs at least one superpixel")

    @property
    def area(self) -> int:
        return int(self.pixel_mask.sum())

    def bbox(self) -> tuple[int, int, int, int]:
        """``(x0, y0, x1, y1)`` inclusive pixel bounds of the part mask."""
        rows, cols = np.nonzero(self.pixel_mask)
        return int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())

    @classmethod
    def from_superpixels(
        cls, part_id: int, seg: SuperpixelSegmentation, superpixels
    ) -> CandidatePart:
        sp = frozenset(int(s) for s in superpixels)
        mask = np.isin(seg.labels, np.fromiter(sp, dtype=np.int32))
        return cls(part_id, seg.pose_id, sp, mask)


@dataclass
class SelectionSolution:
    z: np.ndarray  # (C,) uint8 in {0, 1}
    recon_error: float | None = None
    pose_errors: list[float] | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.uint8)

    @property
    def cost(self) -> int:
        return int(self.z.sum())

    @property
    def selected(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.z)]

    def key(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.z)
